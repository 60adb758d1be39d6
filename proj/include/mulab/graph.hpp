#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mulab/tensor.hpp"

namespace mulab {

// Error raised during graph construction or evaluation; always names the node.
struct GraphError : std::runtime_error {
    GraphError(const std::string& node, const std::string& msg)
        : std::runtime_error("node '" + node + "': " + msg) {}
};

enum class OpKind {
    input,           // placeholder bound at evaluation time (no gradient)
    param,           // placeholder bound at evaluation time (gradient returned)
    matmul,          // [m,k]x[k,n] -> [m,n]
    add_bias,        // [r,n] + [n] broadcast over rows
    add,             // elementwise, same shape
    sub,             // elementwise, same shape
    scale,           // multiply by a compile-time constant
    tanh_act,        // elementwise tanh
    row_normalize,   // rows scaled to unit L2 norm
    sum,             // -> scalar
    mean,            // -> scalar
    cross_entropy,   // mean softmax cross-entropy against integer labels
    kl_div,          // mean KL(softmax(teacher) || softmax(student)); teacher is constant
    supcon_core,     // supervised contrastive loss over embedding rows (no normalization)
    infonce,         // InfoNCE over paired embeddings [K,d],[K,d]
    infonce_labels,  // InfoNCE with a label-indexed embedding table [K,d],[C,d]
};

struct Node {
    OpKind kind;
    std::string name;
    std::vector<int> inputs;
    Shape shape;                // output shape
    double scalar = 0.0;        // scale factor or temperature
    std::vector<int> labels;    // integer labels for the label-consuming losses
    bool allow_neg_inf = false; // placeholders that may carry -inf logits
};

// Static computation graph: placeholders plus a topologically ordered list of
// op records.  Build once, evaluate many times with different bindings; the
// node list is append-only so insertion order is a valid topological order.
class Graph {
public:
    using NodeId = int;

    NodeId input(const std::string& name, Shape shape, bool allow_neg_inf = false) {
        return add_placeholder(OpKind::input, name, std::move(shape), allow_neg_inf);
    }

    NodeId param(const std::string& name, Shape shape) {
        return add_placeholder(OpKind::param, name, std::move(shape), false);
    }

    NodeId matmul(NodeId a, NodeId b) {
        const Node& na = node_at(a, "matmul");
        const Node& nb = node_at(b, "matmul");
        if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
            throw GraphError(next_name("matmul"), "shape mismatch " + shape_str(na.shape) +
                                                      " x " + shape_str(nb.shape));
        }
        return add_op(OpKind::matmul, {a, b}, Shape{na.shape[0], nb.shape[1]});
    }

    NodeId add_bias(NodeId m, NodeId b) {
        const Node& nm = node_at(m, "add_bias");
        const Node& nb = node_at(b, "add_bias");
        if (nm.shape.size() != 2 || nb.shape.size() != 1 || nm.shape[1] != nb.shape[0]) {
            throw GraphError(next_name("add_bias"), "shape mismatch " + shape_str(nm.shape) +
                                                        " + " + shape_str(nb.shape));
        }
        return add_op(OpKind::add_bias, {m, b}, nm.shape);
    }

    NodeId add(NodeId a, NodeId b) { return binary_same_shape(OpKind::add, "add", a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary_same_shape(OpKind::sub, "sub", a, b); }

    NodeId scale(NodeId a, double c) {
        NodeId id = add_op(OpKind::scale, {a}, node_at(a, "scale").shape);
        nodes_[id].scalar = c;
        return id;
    }

    NodeId tanh_act(NodeId a) { return add_op(OpKind::tanh_act, {a}, node_at(a, "tanh").shape); }

    NodeId row_normalize(NodeId a) {
        const Node& na = node_at(a, "row_normalize");
        if (na.shape.size() != 2) {
            throw GraphError(next_name("row_normalize"), "expects a rank-2 tensor");
        }
        return add_op(OpKind::row_normalize, {a}, na.shape);
    }

    NodeId sum(NodeId a) { return add_op(OpKind::sum, {a}, Shape{}); }
    NodeId mean(NodeId a) {
        if (shape_numel(node_at(a, "mean").shape) == 0) {
            throw GraphError(next_name("mean"), "empty input");
        }
        return add_op(OpKind::mean, {a}, Shape{});
    }

    NodeId cross_entropy(NodeId logits, std::vector<int> labels) {
        const Node& nl = node_at(logits, "cross_entropy");
        check_logits_and_labels("cross_entropy", nl.shape, labels);
        NodeId id = add_op(OpKind::cross_entropy, {logits}, Shape{});
        nodes_[id].labels = std::move(labels);
        return id;
    }

    // KL(softmax(teacher) || softmax(student)), mean over rows.  The teacher
    // is treated as a constant: no gradient flows into it, and it is the one
    // place where -inf logits (masked classes) are legal.
    NodeId kl_div(NodeId teacher, NodeId student) {
        const Node& nt = node_at(teacher, "kl_div");
        const Node& ns = node_at(student, "kl_div");
        if (nt.shape.size() != 2 || nt.shape != ns.shape) {
            throw GraphError(next_name("kl_div"), "shape mismatch " + shape_str(nt.shape) +
                                                      " vs " + shape_str(ns.shape));
        }
        return add_op(OpKind::kl_div, {teacher, student}, Shape{});
    }

    // Supervised contrastive loss over embedding rows.  Assumes whatever rows
    // it is given; callers wanting the standard unit-norm convention should
    // compose with row_normalize (see supcon_loss below).
    NodeId supcon_core(NodeId embeddings, std::vector<int> labels, double temperature) {
        const Node& ne = node_at(embeddings, "supcon_core");
        if (ne.shape.size() != 2 || ne.shape[0] < 2) {
            throw GraphError(next_name("supcon_core"), "needs a [B,d] batch with B >= 2");
        }
        if (labels.size() != ne.shape[0]) {
            throw GraphError(next_name("supcon_core"), "label count does not match batch size");
        }
        if (!(temperature > 0.0)) {
            throw GraphError(next_name("supcon_core"), "temperature must be positive");
        }
        NodeId id = add_op(OpKind::supcon_core, {embeddings}, Shape{});
        nodes_[id].labels = std::move(labels);
        nodes_[id].scalar = temperature;
        return id;
    }

    // Standard supervised contrastive loss: embeddings are L2-normalized
    // internally before the contrastive objective.
    NodeId supcon_loss(NodeId embeddings, std::vector<int> labels, double temperature) {
        return supcon_core(row_normalize(embeddings), std::move(labels), temperature);
    }

    NodeId infonce(NodeId u, NodeId v) {
        const Node& nu = node_at(u, "infonce");
        const Node& nv = node_at(v, "infonce");
        if (nu.shape.size() != 2 || nu.shape != nv.shape) {
            throw GraphError(next_name("infonce"), "expects matching [K,d] tensors, got " +
                                                       shape_str(nu.shape) + " vs " +
                                                       shape_str(nv.shape));
        }
        if (nu.shape[0] < 1) throw GraphError(next_name("infonce"), "K must be >= 1");
        return add_op(OpKind::infonce, {u, v}, Shape{});
    }

    // InfoNCE where the second view is table[label_k].  Numerically identical
    // to infonce(u, gather(table, labels)) but costs O(K*C*d) instead of
    // O(K^2*d), which matters when the label alphabet is small and K is not.
    NodeId infonce_labels(NodeId u, NodeId table, std::vector<int> labels) {
        const Node& nu = node_at(u, "infonce_labels");
        const Node& nt = node_at(table, "infonce_labels");
        if (nu.shape.size() != 2 || nt.shape.size() != 2 || nu.shape[1] != nt.shape[1]) {
            throw GraphError(next_name("infonce_labels"), "embedding widths differ: " +
                                                              shape_str(nu.shape) + " vs " +
                                                              shape_str(nt.shape));
        }
        if (labels.size() != nu.shape[0]) {
            throw GraphError(next_name("infonce_labels"), "label count does not match K");
        }
        for (int y : labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= nt.shape[0]) {
                throw GraphError(next_name("infonce_labels"), "label out of table range");
            }
        }
        NodeId id = add_op(OpKind::infonce_labels, {u, table}, Shape{});
        nodes_[id].labels = std::move(labels);
        return id;
    }

    void mark_output(const std::string& name, NodeId id) {
        node_at(id, "mark_output");
        outputs_.emplace_back(name, id);
    }

    void set_objective(NodeId id) {
        const Node& n = node_at(id, "set_objective");
        if (shape_numel(n.shape) != 1) {
            throw GraphError(n.name, "objective must be a scalar");
        }
        objective_ = id;
    }

    const std::vector<Node>& nodes() const { return nodes_; }
    int objective() const { return objective_; }
    const std::vector<std::pair<std::string, int>>& outputs() const { return outputs_; }

    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }

    // Lookup of a named placeholder, for graphs that reuse parameters across
    // several forward chains.
    NodeId node_by_name(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw GraphError(name, "no placeholder with this name");
        return it->second;
    }

private:
    NodeId add_placeholder(OpKind kind, const std::string& name, Shape shape, bool neg_inf) {
        if (by_name_.count(name)) {
            throw GraphError(name, "duplicate placeholder name");
        }
        Node n{kind, name, {}, std::move(shape), 0.0, {}, neg_inf};
        nodes_.push_back(std::move(n));
        by_name_[name] = static_cast<int>(nodes_.size()) - 1;
        return static_cast<int>(nodes_.size()) - 1;
    }

    NodeId add_op(OpKind kind, std::vector<int> inputs, Shape shape) {
        Node n{kind, next_name(kind_name(kind)), std::move(inputs), std::move(shape), 0.0, {}, false};
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    NodeId binary_same_shape(OpKind kind, const char* what, NodeId a, NodeId b) {
        const Node& na = node_at(a, what);
        const Node& nb = node_at(b, what);
        if (na.shape != nb.shape) {
            throw GraphError(next_name(what), "shape mismatch " + shape_str(na.shape) + " vs " +
                                                  shape_str(nb.shape));
        }
        return add_op(kind, {a, b}, na.shape);
    }

    const Node& node_at(NodeId id, const char* ctx) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw GraphError(std::string(ctx), "references an unknown node id");
        }
        return nodes_[static_cast<std::size_t>(id)];
    }

    void check_logits_and_labels(const char* ctx, const Shape& s, const std::vector<int>& labels) {
        if (s.size() != 2) throw GraphError(next_name(ctx), "logits must be [B,C]");
        if (labels.size() != s[0]) {
            throw GraphError(next_name(ctx), "label count does not match batch size");
        }
        for (int y : labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= s[1]) {
                throw GraphError(next_name(ctx), "label out of range");
            }
        }
    }

    static const char* kind_name(OpKind k) {
        switch (k) {
            case OpKind::input: return "input";
            case OpKind::param: return "param";
            case OpKind::matmul: return "matmul";
            case OpKind::add_bias: return "add_bias";
            case OpKind::add: return "add";
            case OpKind::sub: return "sub";
            case OpKind::scale: return "scale";
            case OpKind::tanh_act: return "tanh";
            case OpKind::row_normalize: return "row_normalize";
            case OpKind::sum: return "sum";
            case OpKind::mean: return "mean";
            case OpKind::cross_entropy: return "cross_entropy";
            case OpKind::kl_div: return "kl_div";
            case OpKind::supcon_core: return "supcon";
            case OpKind::infonce: return "infonce";
            case OpKind::infonce_labels: return "infonce_labels";
        }
        return "?";
    }

    std::string next_name(const std::string& base) {
        return base + "#" + std::to_string(nodes_.size());
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, int> by_name_;
    std::vector<std::pair<std::string, int>> outputs_;
    int objective_ = -1;
};

// ---------------------------------------------------------------------------
// Evaluator: owns per-node value/grad buffers so repeated evaluation of the
// same graph (training steps, finite differences) does not reallocate.
// ---------------------------------------------------------------------------

class Evaluator {
public:
    explicit Evaluator(const Graph& g) : g_(g) {
        const auto& nodes = g_.nodes();
        values_.resize(nodes.size());
        grads_.resize(nodes.size());
        bound_.assign(nodes.size(), nullptr);
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].kind != OpKind::input && nodes[i].kind != OpKind::param) {
                values_[i] = Tensor(nodes[i].shape);
            }
        }
    }

    // Placeholders reference caller-owned tensors; no copies are made.
    void bind(const std::string& name, const Tensor* t) {
        for (std::size_t i = 0; i < g_.nodes().size(); ++i) {
            const Node& n = g_.nodes()[i];
            if ((n.kind == OpKind::input || n.kind == OpKind::param) && n.name == name) {
                if (t->shape != n.shape) {
                    throw GraphError(n.name, "bound tensor shape " + shape_str(t->shape) +
                                                 " does not match declared " + shape_str(n.shape));
                }
                bound_[i] = t;
                return;
            }
        }
        throw GraphError(name, "no such placeholder");
    }

    double run_forward() {
        const auto& nodes = g_.nodes();
        for (std::size_t i = 0; i < nodes.size(); ++i) forward_node(static_cast<int>(i));
        if (g_.objective() >= 0) return value(g_.objective()).data[0];
        return 0.0;
    }

    void run_backward() {
        if (g_.objective() < 0) throw GraphError("graph", "no objective set for backward");
        const auto& nodes = g_.nodes();
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            grads_[i].assign(shape_numel(nodes[i].shape), 0.0);
        }
        grads_[static_cast<std::size_t>(g_.objective())][0] = 1.0;
        for (int i = static_cast<int>(nodes.size()) - 1; i >= 0; --i) backward_node(i);
    }

    const Tensor& value(int id) const {
        const Node& n = g_.node(id);
        if (n.kind == OpKind::input || n.kind == OpKind::param) {
            const Tensor* t = bound_[static_cast<std::size_t>(id)];
            if (!t) throw GraphError(n.name, "placeholder not bound");
            return *t;
        }
        return values_[static_cast<std::size_t>(id)];
    }

    const std::vector<double>& grad(int id) const { return grads_[static_cast<std::size_t>(id)]; }

    // Gradient buffer of a named param placeholder (valid after run_backward).
    const std::vector<double>& grad_of(const std::string& param_name) const {
        for (std::size_t i = 0; i < g_.nodes().size(); ++i) {
            const Node& n = g_.nodes()[i];
            if (n.kind == OpKind::param && n.name == param_name) return grads_[i];
        }
        throw GraphError(param_name, "no such param");
    }

    const Graph& graph() const { return g_; }

private:
    void forward_node(int id) {
        const Node& n = g_.node(id);
        const std::size_t i = static_cast<std::size_t>(id);
        switch (n.kind) {
            case OpKind::input:
            case OpKind::param: {
                const Tensor* t = bound_[i];
                if (!t) throw GraphError(n.name, "placeholder not bound");
                if (n.allow_neg_inf) {
                    if (!finite_or_neg_inf(t->data)) {
                        throw GraphError(n.name, "contains NaN or +inf");
                    }
                } else if (!all_finite(t->data)) {
                    throw GraphError(n.name, "contains non-finite values");
                }
                return;
            }
            case OpKind::matmul: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                matmul_kernel(a.data.data(), b.data.data(), values_[i].data.data(),
                              a.shape[0], a.shape[1], b.shape[1]);
                break;
            }
            case OpKind::add_bias: {
                const Tensor& m = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                add_bias_kernel(m.data.data(), b.data.data(), values_[i].data.data(),
                                m.shape[0], m.shape[1]);
                break;
            }
            case OpKind::add: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                for (std::size_t j = 0; j < a.numel(); ++j) {
                    values_[i].data[j] = a.data[j] + b.data[j];
                }
                break;
            }
            case OpKind::sub: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                for (std::size_t j = 0; j < a.numel(); ++j) {
                    values_[i].data[j] = a.data[j] - b.data[j];
                }
                break;
            }
            case OpKind::scale: {
                const Tensor& a = value(n.inputs[0]);
                for (std::size_t j = 0; j < a.numel(); ++j) {
                    values_[i].data[j] = n.scalar * a.data[j];
                }
                break;
            }
            case OpKind::tanh_act: {
                const Tensor& a = value(n.inputs[0]);
                tanh_kernel(a.data.data(), values_[i].data.data(), a.numel());
                break;
            }
            case OpKind::row_normalize: {
                const Tensor& a = value(n.inputs[0]);
                const std::size_t r = a.shape[0], d = a.shape[1];
                for (std::size_t row = 0; row < r; ++row) {
                    const double* x = a.data.data() + row * d;
                    double nrm = 0.0;
                    for (std::size_t j = 0; j < d; ++j) nrm += x[j] * x[j];
                    nrm = std::sqrt(nrm);
                    if (nrm == 0.0) throw GraphError(n.name, "zero row cannot be normalized");
                    double* y = values_[i].data.data() + row * d;
                    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] / nrm;
                }
                break;
            }
            case OpKind::sum: {
                const Tensor& a = value(n.inputs[0]);
                double s = 0.0;
                for (double x : a.data) s += x;
                values_[i].data[0] = s;
                break;
            }
            case OpKind::mean: {
                const Tensor& a = value(n.inputs[0]);
                double s = 0.0;
                for (double x : a.data) s += x;
                values_[i].data[0] = s / static_cast<double>(a.numel());
                break;
            }
            case OpKind::cross_entropy:
                forward_cross_entropy(n, i);
                break;
            case OpKind::kl_div:
                forward_kl_div(n, i);
                break;
            case OpKind::supcon_core:
                forward_supcon(n, i);
                break;
            case OpKind::infonce:
                forward_infonce(n, i);
                break;
            case OpKind::infonce_labels:
                forward_infonce_labels(n, i);
                break;
        }
        if (!all_finite(values_[i].data)) {
            throw GraphError(n.name, "produced non-finite values");
        }
    }

    void forward_cross_entropy(const Node& n, std::size_t i) {
        const Tensor& z = value(n.inputs[0]);
        const std::size_t b = z.shape[0], c = z.shape[1];
        double total = 0.0;
        for (std::size_t r = 0; r < b; ++r) {
            const double* row = z.data.data() + r * c;
            const double lse = logsumexp_row(row, c);
            total += lse - row[n.labels[r]];
        }
        values_[i].data[0] = total / static_cast<double>(b);
    }

    void forward_kl_div(const Node& n, std::size_t i) {
        const Tensor& t = value(n.inputs[0]);
        const Tensor& s = value(n.inputs[1]);
        const std::size_t b = t.shape[0], c = t.shape[1];
        std::vector<double> p(c);
        double total = 0.0;
        for (std::size_t r = 0; r < b; ++r) {
            const double* trow = t.data.data() + r * c;
            const double* srow = s.data.data() + r * c;
            const double t_lse = logsumexp_row(trow, c);
            if (std::isinf(t_lse) && t_lse < 0) {
                throw GraphError(n.name, "teacher row " + std::to_string(r) + " is all -inf");
            }
            const double s_lse = logsumexp_row(srow, c);
            double row_kl = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double lt = trow[j];
                if (std::isinf(lt) && lt < 0) continue;  // p_j = 0 contributes nothing
                const double pj = std::exp(lt - t_lse);
                p[j] = pj;
                // p_j * (log p_j - log q_j), with log-probs from the shifted logits
                row_kl += pj * ((lt - t_lse) - (srow[j] - s_lse));
            }
            total += row_kl;
        }
        values_[i].data[0] = total / static_cast<double>(b);
    }

    void forward_supcon(const Node& n, std::size_t i) {
        const Tensor& z = value(n.inputs[0]);
        const std::size_t b = z.shape[0], d = z.shape[1];
        const double tau = n.scalar;
        double total = 0.0;
        std::size_t anchors = 0;
        std::vector<double> s(b);
        for (std::size_t a = 0; a < b; ++a) {
            std::size_t pos = 0;
            double pos_sum = 0.0;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t o = 0; o < b; ++o) {
                if (o == a) continue;
                double dot = 0.0;
                const double* za = z.data.data() + a * d;
                const double* zo = z.data.data() + o * d;
                for (std::size_t j = 0; j < d; ++j) dot += za[j] * zo[j];
                s[o] = dot / tau;
                mx = std::max(mx, s[o]);
                if (n.labels[o] == n.labels[a]) {
                    ++pos;
                    pos_sum += s[o];
                }
            }
            if (pos == 0) continue;  // anchor without positives is dropped
            double denom = 0.0;
            for (std::size_t o = 0; o < b; ++o) {
                if (o != a) denom += std::exp(s[o] - mx);
            }
            total += -(pos_sum / static_cast<double>(pos)) + mx + std::log(denom);
            ++anchors;
        }
        values_[i].data[0] = anchors ? total / static_cast<double>(anchors) : 0.0;
    }

    void forward_infonce(const Node& n, std::size_t i) {
        const Tensor& u = value(n.inputs[0]);
        const Tensor& v = value(n.inputs[1]);
        const std::size_t k = u.shape[0], d = u.shape[1];
        const double logk = std::log(static_cast<double>(k));
        std::vector<double> row(k);
        double total = 0.0;
        for (std::size_t a = 0; a < k; ++a) {
            const double* ua = u.data.data() + a * d;
            for (std::size_t o = 0; o < k; ++o) {
                const double* vo = v.data.data() + o * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += ua[j] * vo[j];
                row[o] = dot;
            }
            total += row[a] - logsumexp_row(row.data(), k) + logk;
        }
        values_[i].data[0] = total / static_cast<double>(k);
    }

    void forward_infonce_labels(const Node& n, std::size_t i) {
        const Tensor& u = value(n.inputs[0]);
        const Tensor& tab = value(n.inputs[1]);
        const std::size_t k = u.shape[0], d = u.shape[1], c = tab.shape[0];
        std::vector<double> counts(c, 0.0);
        for (int y : n.labels) counts[static_cast<std::size_t>(y)] += 1.0;
        std::vector<double> t(c);
        double total = 0.0;
        for (std::size_t a = 0; a < k; ++a) {
            const double* ua = u.data.data() + a * d;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t o = 0; o < c; ++o) {
                const double* to = tab.data.data() + o * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += ua[j] * to[j];
                t[o] = dot;
                if (counts[o] > 0.0) mx = std::max(mx, t[o]);
            }
            // log sum_c (n_c/K) exp(t_c) == logsumexp over the present labels
            double denom = 0.0;
            for (std::size_t o = 0; o < c; ++o) {
                if (counts[o] > 0.0) {
                    denom += counts[o] / static_cast<double>(k) * std::exp(t[o] - mx);
                }
            }
            total += t[static_cast<std::size_t>(n.labels[a])] - (mx + std::log(denom));
        }
        values_[i].data[0] = total / static_cast<double>(k);
    }

    // ------------------------------- backward -------------------------------

    void backward_node(int id) {
        const Node& n = g_.node(id);
        const std::size_t i = static_cast<std::size_t>(id);
        const std::vector<double>& g = grads_[i];
        switch (n.kind) {
            case OpKind::input:
            case OpKind::param:
                return;
            case OpKind::matmul: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                std::vector<double>& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                std::vector<double>& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
                // da[i,p] += sum_j g[i,j] * b[p,j]
                for (std::size_t r = 0; r < m; ++r) {
                    const double* grow = g.data() + r * c;
                    double* darow = da.data() + r * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = b.data.data() + p * c;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
                        darow[p] += acc;
                    }
                }
                // db[p,j] += sum_i a[i,p] * g[i,j]
                for (std::size_t r = 0; r < m; ++r) {
                    const double* arow = a.data.data() + r * k;
                    const double* grow = g.data() + r * c;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        double* dbrow = db.data() + p * c;
                        for (std::size_t j = 0; j < c; ++j) dbrow[j] += av * grow[j];
                    }
                }
                return;
            }
            case OpKind::add_bias: {
                std::vector<double>& dm = grads_[static_cast<std::size_t>(n.inputs[0])];
                std::vector<double>& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                const std::size_t r = n.shape[0], c = n.shape[1];
                for (std::size_t j = 0; j < r * c; ++j) dm[j] += g[j];
                for (std::size_t row = 0; row < r; ++row) {
                    const double* grow = g.data() + row * c;
                    for (std::size_t j = 0; j < c; ++j) db[j] += grow[j];
                }
                return;
            }
            case OpKind::add: {
                std::vector<double>& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                std::vector<double>& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                for (std::size_t j = 0; j < g.size(); ++j) {
                    da[j] += g[j];
                    db[j] += g[j];
                }
                return;
            }
            case OpKind::sub: {
                std::vector<double>& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                std::vector<double>& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                for (std::size_t j = 0; j < g.size(); ++j) {
                    da[j] += g[j];
                    db[j] -= g[j];
                }
                return;
            }
            case OpKind::scale: {
                std::vector<double>& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                for (std::size_t j = 0; j < g.size(); ++j) da[j] += n.scalar * g[j];
                return;
            }
            case OpKind::tanh_act: {
                const Tensor& y = values_[i];
                std::vector<double>& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                for (std::size_t j = 0; j < g.size(); ++j) {
                    da[j] += g[j] * (1.0 - y.data[j] * y.data[j]);
                }
                return;
            }
            case OpKind::row_normalize: {
                const Tensor& x = value(n.inputs[0]);
                const Tensor& y = values_[i];
                std::vector<double>& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t r = x.shape[0], d = x.shape[1];
                for (std::size_t row = 0; row < r; ++row) {
                    const double* xr = x.data.data() + row * d;
                    const double* yr = y.data.data() + row * d;
                    const double* gr = g.data() + row * d;
                    double nrm = 0.0, ydotg = 0.0;
                    for (std::size_t j = 0; j < d; ++j) nrm += xr[j] * xr[j];
                    nrm = std::sqrt(nrm);
                    for (std::size_t j = 0; j < d; ++j) ydotg += yr[j] * gr[j];
                    double* dxr = dx.data() + row * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        dxr[j] += (gr[j] - yr[j] * ydotg) / nrm;
                    }
                }
                return;
            }
            case OpKind::sum: {
                std::vector<double>& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                for (double& x : da) x += g[0];
                return;
            }
            case OpKind::mean: {
                std::vector<double>& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                const double s = g[0] / static_cast<double>(da.size());
                for (double& x : da) x += s;
                return;
            }
            case OpKind::cross_entropy:
                backward_cross_entropy(n, g[0]);
                return;
            case OpKind::kl_div:
                backward_kl_div(n, g[0]);
                return;
            case OpKind::supcon_core:
                backward_supcon(n, g[0]);
                return;
            case OpKind::infonce:
                backward_infonce(n, g[0]);
                return;
            case OpKind::infonce_labels:
                backward_infonce_labels(n, g[0]);
                return;
        }
    }

    void backward_cross_entropy(const Node& n, double up) {
        const Tensor& z = value(n.inputs[0]);
        std::vector<double>& dz = grads_[static_cast<std::size_t>(n.inputs[0])];
        const std::size_t b = z.shape[0], c = z.shape[1];
        const double w = up / static_cast<double>(b);
        std::vector<double> p(c);
        for (std::size_t r = 0; r < b; ++r) {
            softmax_row(z.data.data() + r * c, p.data(), c);
            double* drow = dz.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) drow[j] += w * p[j];
            drow[n.labels[r]] -= w;
        }
    }

    void backward_kl_div(const Node& n, double up) {
        const Tensor& t = value(n.inputs[0]);
        const Tensor& s = value(n.inputs[1]);
        // teacher is a constant: gradient flows only into the student logits
        std::vector<double>& ds = grads_[static_cast<std::size_t>(n.inputs[1])];
        const std::size_t b = t.shape[0], c = t.shape[1];
        const double w = up / static_cast<double>(b);
        std::vector<double> p(c), q(c);
        for (std::size_t r = 0; r < b; ++r) {
            softmax_row(t.data.data() + r * c, p.data(), c);
            softmax_row(s.data.data() + r * c, q.data(), c);
            double* drow = ds.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) drow[j] += w * (q[j] - p[j]);
        }
    }

    void backward_supcon(const Node& n, double up) {
        const Tensor& z = value(n.inputs[0]);
        std::vector<double>& dz = grads_[static_cast<std::size_t>(n.inputs[0])];
        const std::size_t b = z.shape[0], d = z.shape[1];
        const double tau = n.scalar;
        // G[a][o] = dL/ds_{a,o}; dz = (G + G^T) z / tau
        std::vector<double> big_g(b * b, 0.0);
        std::vector<double> s(b);
        std::size_t anchors = 0;
        std::vector<std::size_t> anchor_rows;
        for (std::size_t a = 0; a < b; ++a) {
            std::size_t pos = 0;
            for (std::size_t o = 0; o < b; ++o) {
                if (o != a && n.labels[o] == n.labels[a]) ++pos;
            }
            if (pos == 0) continue;
            ++anchors;
            anchor_rows.push_back(a);
        }
        if (anchors == 0) return;
        const double inv_m = 1.0 / static_cast<double>(anchors);
        for (std::size_t a : anchor_rows) {
            double mx = -std::numeric_limits<double>::infinity();
            std::size_t pos = 0;
            for (std::size_t o = 0; o < b; ++o) {
                if (o == a) continue;
                const double* za = z.data.data() + a * d;
                const double* zo = z.data.data() + o * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += za[j] * zo[j];
                s[o] = dot / tau;
                mx = std::max(mx, s[o]);
                if (n.labels[o] == n.labels[a]) ++pos;
            }
            double denom = 0.0;
            for (std::size_t o = 0; o < b; ++o) {
                if (o != a) denom += std::exp(s[o] - mx);
            }
            for (std::size_t o = 0; o < b; ++o) {
                if (o == a) continue;
                const double q = std::exp(s[o] - mx) / denom;
                const double pos_term =
                    (n.labels[o] == n.labels[a]) ? 1.0 / static_cast<double>(pos) : 0.0;
                big_g[a * b + o] = inv_m * (q - pos_term);
            }
        }
        // dz_r += up/tau * sum_o (G[r][o] + G[o][r]) z_o
        for (std::size_t r = 0; r < b; ++r) {
            double* drow = dz.data() + r * d;
            for (std::size_t o = 0; o < b; ++o) {
                const double w = up / tau * (big_g[r * b + o] + big_g[o * b + r]);
                if (w == 0.0) continue;
                const double* zo = z.data.data() + o * d;
                for (std::size_t j = 0; j < d; ++j) drow[j] += w * zo[j];
            }
        }
    }

    void backward_infonce(const Node& n, double up) {
        const Tensor& u = value(n.inputs[0]);
        const Tensor& v = value(n.inputs[1]);
        std::vector<double>& du = grads_[static_cast<std::size_t>(n.inputs[0])];
        std::vector<double>& dv = grads_[static_cast<std::size_t>(n.inputs[1])];
        const std::size_t k = u.shape[0], d = u.shape[1];
        const double w = up / static_cast<double>(k);
        std::vector<double> row(k), p(k);
        for (std::size_t a = 0; a < k; ++a) {
            const double* ua = u.data.data() + a * d;
            for (std::size_t o = 0; o < k; ++o) {
                const double* vo = v.data.data() + o * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += ua[j] * vo[j];
                row[o] = dot;
            }
            softmax_row(row.data(), p.data(), k);
            // dS[a][o] = w * (1[o==a] - p_o)
            double* dua = du.data() + a * d;
            for (std::size_t o = 0; o < k; ++o) {
                const double ds = w * ((o == a ? 1.0 : 0.0) - p[o]);
                if (ds == 0.0) continue;
                const double* vo = v.data.data() + o * d;
                double* dvo = dv.data() + o * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dua[j] += ds * vo[j];
                    dvo[j] += ds * ua[j];
                }
            }
        }
    }

    void backward_infonce_labels(const Node& n, double up) {
        const Tensor& u = value(n.inputs[0]);
        const Tensor& tab = value(n.inputs[1]);
        std::vector<double>& du = grads_[static_cast<std::size_t>(n.inputs[0])];
        std::vector<double>& dtab = grads_[static_cast<std::size_t>(n.inputs[1])];
        const std::size_t k = u.shape[0], d = u.shape[1], c = tab.shape[0];
        std::vector<double> counts(c, 0.0);
        for (int y : n.labels) counts[static_cast<std::size_t>(y)] += 1.0;
        const double w = up / static_cast<double>(k);
        std::vector<double> t(c), r(c);
        for (std::size_t a = 0; a < k; ++a) {
            const double* ua = u.data.data() + a * d;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t o = 0; o < c; ++o) {
                const double* to = tab.data.data() + o * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += ua[j] * to[j];
                t[o] = dot;
                if (counts[o] > 0.0) mx = std::max(mx, t[o]);
            }
            double denom = 0.0;
            for (std::size_t o = 0; o < c; ++o) {
                r[o] = counts[o] > 0.0 ? counts[o] / static_cast<double>(k) * std::exp(t[o] - mx)
                                       : 0.0;
                denom += r[o];
            }
            double* dua = du.data() + a * d;
            for (std::size_t o = 0; o < c; ++o) {
                const double soft = r[o] / denom;
                const double ds =
                    w * ((static_cast<std::size_t>(n.labels[a]) == o ? 1.0 : 0.0) - soft);
                if (ds == 0.0) continue;
                const double* to = tab.data.data() + o * d;
                double* dto = dtab.data() + o * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dua[j] += ds * to[j];
                    dto[j] += ds * ua[j];
                }
            }
        }
    }

    const Graph& g_;
    std::vector<Tensor> values_;
    std::vector<std::vector<double>> grads_;
    std::vector<const Tensor*> bound_;
};

// ---------------------------------------------------------------------------
// Convenience entry points
// ---------------------------------------------------------------------------

struct ForwardBackwardResult {
    double objective = 0.0;
    std::map<std::string, Tensor> outputs;
    std::map<std::string, std::vector<double>> grads;  // keyed by param name
};

// One-shot evaluation: binds `point` by name, runs forward and (if an
// objective is set) backward, and copies out marked outputs plus gradients
// for every param placeholder.
inline ForwardBackwardResult forward_backward(const Graph& g,
                                              const std::map<std::string, Tensor>& point) {
    Evaluator ev(g);
    for (const auto& [name, t] : point) ev.bind(name, &t);
    ForwardBackwardResult res;
    res.objective = ev.run_forward();
    for (const auto& [name, id] : g.outputs()) res.outputs[name] = ev.value(id);
    if (g.objective() >= 0) {
        ev.run_backward();
        for (const Node& n : g.nodes()) {
            if (n.kind == OpKind::param) res.grads[n.name] = ev.grad_of(n.name);
        }
    }
    return res;
}

// Central-difference gradient verification.  Returns the maximum over all
// param entries of |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const Graph& g, std::map<std::string, Tensor> point,
                         double step = 1e-5) {
    if (g.objective() < 0) throw std::invalid_argument("grad_check: graph has no objective");
    Evaluator ev(g);
    for (auto& [name, t] : point) ev.bind(name, &t);
    const double base = ev.run_forward();
    if (!std::isfinite(base)) {
        throw std::runtime_error("grad_check: non-finite loss at the evaluation point");
    }
    ev.run_backward();
    std::map<std::string, std::vector<double>> analytic;
    for (const Node& n : g.nodes()) {
        if (n.kind == OpKind::param) analytic[n.name] = ev.grad_of(n.name);
    }
    double worst = 0.0;
    for (auto& [name, t] : point) {
        auto it = analytic.find(name);
        if (it == analytic.end()) continue;  // plain input, not differentiated
        for (std::size_t e = 0; e < t.numel(); ++e) {
            const double saved = t.data[e];
            t.data[e] = saved + step;
            const double up = ev.run_forward();
            t.data[e] = saved - step;
            const double down = ev.run_forward();
            t.data[e] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw std::runtime_error("grad_check: non-finite loss at a perturbed point");
            }
            const double numeric = (up - down) / (2.0 * step);
            const double a = it->second[e];
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace mulab
