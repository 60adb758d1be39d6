#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mulab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major f64 tensor.  Gradient storage is allocated on demand; most
// tensors (datasets, cached features) never carry one.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty unless gradients were requested

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}

    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape)) {
            throw std::invalid_argument("Tensor: value count " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const {
        if (rank() != 2) throw std::logic_error("Tensor::rows: tensor is not rank 2");
        return shape[0];
    }
    std::size_t cols() const {
        if (rank() != 2) throw std::logic_error("Tensor::cols: tensor is not rank 2");
        return shape[1];
    }

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

// Finite or -inf; the only non-finite value logits may legally carry.
inline bool finite_or_neg_inf(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x) && !(std::isinf(x) && x < 0)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Shared numeric kernels.  Both the autodiff graph and the plain inference
// path call these, so the two routes produce bit-identical values.
// ---------------------------------------------------------------------------

// c[m x n] = a[m x k] * b[k x n]
inline void matmul_kernel(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// m[r x n] += bias[n] on every row
inline void add_bias_kernel(const double* m, const double* bias, double* out,
                            std::size_t r, std::size_t n) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* src = m + i * n;
        double* dst = out + i * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] = src[j] + bias[j];
    }
}

inline void tanh_kernel(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

// log(sum_j exp(row_j)); tolerates -inf entries, errors upstream if all are.
inline double logsumexp_row(const double* row, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    if (std::isinf(mx) && mx < 0) return mx;  // caller decides how to treat all--inf rows
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    return mx + std::log(s);
}

// Softmax of one row; -inf logits map to exactly zero probability.
inline void softmax_row(const double* logits, double* probs, std::size_t n) {
    const double lse = logsumexp_row(logits, n);
    if (std::isinf(lse) && lse < 0) {
        throw std::runtime_error("softmax: all logits in a row are -inf");
    }
    for (std::size_t j = 0; j < n; ++j) {
        const double z = logits[j];
        probs[j] = (std::isinf(z) && z < 0) ? 0.0 : std::exp(z - lse);
    }
}

}  // namespace mulab
