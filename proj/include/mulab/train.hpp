#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mulab/dataset.hpp"
#include "mulab/graph.hpp"
#include "mulab/network.hpp"
#include "mulab/rng.hpp"
#include "mulab/split.hpp"

namespace mulab {

enum class TrainableScope { all, head_only, last_k, encoder_only };

enum class OptimizerKind { sgd, adaptive };

struct TrainConfig {
    std::size_t epochs = 1;
    std::size_t batch_size = 64;
    double learning_rate = 0.1;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double momentum = 0.9;           // sgd
    double beta1 = 0.9;              // adaptive first moment
    double beta2 = 0.999;            // adaptive second moment
    double eps = 1e-8;
    double l2 = 5e-4;                // coupled weight decay
    double l1 = 0.0;                 // proximal shrinkage after each step
    std::uint64_t shuffle_seed = 0;
    TrainableScope scope = TrainableScope::all;
    std::size_t last_k = 1;          // used when scope == last_k
    double loss_weight = 1.0;        // negative values train by gradient ascent

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) {
            throw std::invalid_argument("TrainConfig: learning_rate must be positive");
        }
        if (l2 < 0.0 || l1 < 0.0) throw std::invalid_argument("TrainConfig: penalties must be >= 0");
    }
};

struct RunRecord {
    std::vector<double> epoch_loss;      // mean data loss per epoch
    std::vector<double> epoch_accuracy;  // running train accuracy per epoch
    double seconds = 0.0;
    Network network;
};

// Raised when a loss or intermediate value stops being finite; carries the
// last finite state so callers can inspect how far training got.
struct NumericalAbort : std::runtime_error {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double last_finite_loss = 0.0;
    std::optional<Network> last_state;

    NumericalAbort(const std::string& msg, std::size_t ep, std::size_t st, double last,
                   std::optional<Network> state)
        : std::runtime_error("numerical abort at epoch " + std::to_string(ep) + " step " +
                             std::to_string(st) + ": " + msg +
                             " (last finite loss " + std::to_string(last) + ")"),
          epoch(ep), step(st), last_finite_loss(last), last_state(std::move(state)) {}
};

// One shared derivation for per-epoch shuffles: every training loop in the
// library draws its visit order from here, so two loops with the same seed
// walk the data identically.
inline std::vector<std::size_t> epoch_order(std::uint64_t shuffle_seed, std::size_t epoch,
                                            std::size_t n) {
    Rng rng(derive_seed(shuffle_seed, "epoch", epoch));
    return rng.permutation(n);
}

// ---------------------------------------------------------------------------
// Layer scope helpers
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> scope_layers(const Network& net, TrainableScope scope,
                                             std::size_t k = 1) {
    const std::size_t total = net.total_layers();
    std::size_t first = 0, last = total;  // [first, last)
    switch (scope) {
        case TrainableScope::all: break;
        case TrainableScope::head_only: first = total - net.head_depth; break;
        case TrainableScope::encoder_only: last = total - net.head_depth; break;
        case TrainableScope::last_k:
            if (k < 1 || k > total) {
                throw std::invalid_argument("scope_layers: k must be in [1, " +
                                            std::to_string(total) + "]");
            }
            first = total - k;
            break;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = first; i < last; ++i) out.push_back(i);
    if (out.empty()) throw std::invalid_argument("scope_layers: empty trainable scope");
    return out;
}

inline AffineLayer& layer_at(Network& net, std::size_t index) {
    return index < net.depth() ? net.blocks[index] : net.head;
}

inline const AffineLayer& layer_at(const Network& net, std::size_t index) {
    return index < net.depth() ? net.blocks[index] : net.head;
}

// ---------------------------------------------------------------------------
// Optimizer: SGD with momentum, or the adaptive first/second-moment rule.
// Updates a fixed list of tensors in place; state buffers match that list.
// ---------------------------------------------------------------------------

class Optimizer {
public:
    Optimizer(std::vector<Tensor*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
        slot_a_.resize(params_.size());
        slot_b_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            slot_a_[i].assign(params_[i]->numel(), 0.0);
            if (cfg_.optimizer == OptimizerKind::adaptive) {
                slot_b_[i].assign(params_[i]->numel(), 0.0);
            }
        }
    }

    void apply(const std::vector<const std::vector<double>*>& grads) {
        if (grads.size() != params_.size()) {
            throw std::logic_error("Optimizer: gradient list does not match parameter list");
        }
        ++t_;
        const double lr = cfg_.learning_rate;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = *params_[i];
            const std::vector<double>& g = *grads[i];
            std::vector<double>& a = slot_a_[i];
            if (cfg_.optimizer == OptimizerKind::sgd) {
                for (std::size_t j = 0; j < p.numel(); ++j) {
                    const double grad = g[j] + cfg_.l2 * p.data[j];
                    a[j] = cfg_.momentum * a[j] + grad;
                    p.data[j] -= lr * a[j];
                }
            } else {
                std::vector<double>& v = slot_b_[i];
                const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
                const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
                for (std::size_t j = 0; j < p.numel(); ++j) {
                    const double grad = g[j] + cfg_.l2 * p.data[j];
                    a[j] = cfg_.beta1 * a[j] + (1.0 - cfg_.beta1) * grad;
                    v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad * grad;
                    const double mhat = a[j] / bc1;
                    const double vhat = v[j] / bc2;
                    p.data[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                }
            }
            if (cfg_.l1 > 0.0) {
                // proximal soft-threshold: small weights land exactly on zero
                const double thr = lr * cfg_.l1;
                for (double& w : p.data) {
                    if (w > thr) w -= thr;
                    else if (w < -thr) w += thr;
                    else w = 0.0;
                }
            }
        }
    }

private:
    std::vector<Tensor*> params_;
    TrainConfig cfg_;
    std::vector<std::vector<double>> slot_a_;  // sgd velocity / adaptive m
    std::vector<std::vector<double>> slot_b_;  // adaptive v
    std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Supervised graph construction
// ---------------------------------------------------------------------------

namespace detail {

inline std::string weight_name(std::size_t layer) { return "w" + std::to_string(layer); }
inline std::string bias_name(std::size_t layer) { return "b" + std::to_string(layer); }

struct SupervisedGraph {
    Graph g;
    Graph::NodeId logits = -1;
    Graph::NodeId loss = -1;
};

// x -> blocks -> head -> cross_entropy(labels); objective scaled by weight.
inline SupervisedGraph make_supervised_graph(const Network& net, std::size_t batch,
                                             const std::vector<int>& labels, double loss_weight) {
    SupervisedGraph sg;
    auto x = sg.g.input("x", {batch, net.input_dim()});
    Graph::NodeId cur = x;
    for (std::size_t i = 0; i < net.total_layers(); ++i) {
        const AffineLayer& l = layer_at(net, i);
        auto w = sg.g.param(weight_name(i), l.w.shape);
        auto b = sg.g.param(bias_name(i), l.b.shape);
        cur = sg.g.add_bias(sg.g.matmul(cur, w), b);
        if (i < net.depth()) cur = sg.g.tanh_act(cur);
    }
    sg.logits = cur;
    sg.loss = sg.g.cross_entropy(cur, labels);
    sg.g.mark_output("loss", sg.loss);
    auto objective = loss_weight == 1.0 ? sg.loss : sg.g.scale(sg.loss, loss_weight);
    sg.g.set_objective(objective);
    return sg;
}

inline void bind_network(Evaluator& ev, const Network& net) {
    for (std::size_t i = 0; i < net.total_layers(); ++i) {
        const AffineLayer& l = layer_at(net, i);
        ev.bind(weight_name(i), &l.w);
        ev.bind(bias_name(i), &l.b);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// evaluate_accuracy
// ---------------------------------------------------------------------------

// First maximum wins: ties resolve to the lowest class index.
inline int argmax_row(const double* row, std::size_t n) {
    int best = 0;
    for (std::size_t j = 1; j < n; ++j) {
        if (row[j] > row[best]) best = static_cast<int>(j);
    }
    return best;
}

inline double evaluate_accuracy(const Network& net, const Dataset& data,
                                const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("evaluate_accuracy: empty data view");
    const std::size_t chunk = 512;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        const std::size_t stop = std::min(indices.size(), start + chunk);
        std::vector<std::size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                      indices.begin() + static_cast<std::ptrdiff_t>(stop));
        const Tensor batch = gather_rows(data.features, part);
        const Tensor logits = forward_logits(net, batch);
        for (std::size_t r = 0; r < part.size(); ++r) {
            const int pred = argmax_row(logits.data.data() + r * logits.shape[1],
                                        logits.shape[1]);
            if (pred == data.labels[part[r]]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

inline double evaluate_accuracy(const Network& net, const Dataset& data) {
    return evaluate_accuracy(net, data, all_indices(data));
}

inline double mean_cross_entropy(const Network& net, const Dataset& data,
                                 const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("mean_cross_entropy: empty data view");
    const std::size_t chunk = 512;
    double total = 0.0;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        const std::size_t stop = std::min(indices.size(), start + chunk);
        std::vector<std::size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                      indices.begin() + static_cast<std::ptrdiff_t>(stop));
        const Tensor logits = forward_logits(net, gather_rows(data.features, part));
        for (std::size_t r = 0; r < part.size(); ++r) {
            const double* row = logits.data.data() + r * logits.shape[1];
            total += logsumexp_row(row, logits.shape[1]) - row[data.labels[part[r]]];
        }
    }
    return total / static_cast<double>(indices.size());
}

// ---------------------------------------------------------------------------
// train_supervised
// ---------------------------------------------------------------------------

inline RunRecord train_supervised(Network net, const Dataset& data,
                                  const std::vector<std::size_t>& indices,
                                  const std::vector<int>* labels_override,
                                  const TrainConfig& cfg) {
    cfg.validate();
    if (indices.empty()) throw std::invalid_argument("train_supervised: empty data view");
    if (labels_override && labels_override->size() != indices.size()) {
        throw std::invalid_argument("train_supervised: labels_override length mismatch");
    }
    const auto t0 = std::chrono::steady_clock::now();

    const std::size_t n = indices.size();
    const auto trainable = scope_layers(net, cfg.scope, cfg.last_k);
    std::vector<Tensor*> params;
    for (std::size_t li : trainable) {
        params.push_back(&layer_at(net, li).w);
        params.push_back(&layer_at(net, li).b);
    }
    Optimizer opt(params, cfg);

    RunRecord rec;
    rec.epoch_loss.reserve(cfg.epochs);
    rec.epoch_accuracy.reserve(cfg.epochs);
    double last_finite = 0.0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(cfg.shuffle_seed, epoch, n);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0, step = 0; start < n; start += cfg.batch_size, ++step) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const std::size_t b = stop - start;
            std::vector<std::size_t> rows(b);
            std::vector<int> labels(b);
            for (std::size_t i = 0; i < b; ++i) {
                const std::size_t pos = order[start + i];
                rows[i] = indices[pos];
                labels[i] = labels_override ? (*labels_override)[pos] : data.labels[rows[i]];
            }
            const Tensor batch = gather_rows(data.features, rows);

            auto sg = detail::make_supervised_graph(net, b, labels, cfg.loss_weight);
            Evaluator ev(sg.g);
            ev.bind("x", &batch);
            detail::bind_network(ev, net);
            double loss;
            try {
                ev.run_forward();
                loss = ev.value(sg.loss).data[0];
            } catch (const GraphError& e) {
                throw NumericalAbort(e.what(), epoch, step, last_finite, net);
            }
            if (!std::isfinite(loss)) {
                throw NumericalAbort("loss is not finite", epoch, step, last_finite, net);
            }
            last_finite = loss;
            loss_sum += loss * static_cast<double>(b);
            const Tensor& logits = ev.value(sg.logits);
            for (std::size_t r = 0; r < b; ++r) {
                if (argmax_row(logits.data.data() + r * logits.shape[1], logits.shape[1]) ==
                    labels[r]) {
                    ++correct;
                }
            }
            ev.run_backward();
            std::vector<const std::vector<double>*> grads;
            grads.reserve(params.size());
            for (std::size_t li : trainable) {
                grads.push_back(&ev.grad_of(detail::weight_name(li)));
                grads.push_back(&ev.grad_of(detail::bias_name(li)));
            }
            opt.apply(grads);
        }
        rec.epoch_loss.push_back(loss_sum / static_cast<double>(n));
        rec.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
    }

    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.network = std::move(net);
    return rec;
}

inline RunRecord train_supervised(Network net, const Dataset& data, const TrainConfig& cfg) {
    return train_supervised(std::move(net), data, all_indices(data), nullptr, cfg);
}

}  // namespace mulab
