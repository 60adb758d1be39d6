#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mulab/graph.hpp"
#include "mulab/network.hpp"
#include "mulab/split.hpp"
#include "mulab/train.hpp"

namespace mulab {

// ---------------------------------------------------------------------------
// Request / result types shared by all unlearning procedures
// ---------------------------------------------------------------------------

struct UnlearnRequest {
    const Network& original;
    const SplitSpec& split;
    std::uint64_t seed = 0;
};

struct PhaseLog {
    std::string phase;
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;  // empty for phases without a label target
    double seconds = 0.0;
};

struct UnlearnResult {
    Network unlearned;
    double rte_seconds = 0.0;  // wall clock of the unlearning call itself
    std::vector<PhaseLog> phase_logs;
};

namespace detail {

class Stopwatch {
public:
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline void validate_request(const UnlearnRequest& req) {
    req.split.validate();
    if (req.original.num_classes() != static_cast<std::size_t>(req.split.base.num_classes)) {
        throw std::invalid_argument("unlearn: network classifies " +
                                    std::to_string(req.original.num_classes()) +
                                    " classes but the split has " +
                                    std::to_string(req.split.base.num_classes));
    }
    if (req.original.input_dim() != req.split.base.dim()) {
        throw std::invalid_argument("unlearn: network input width does not match the dataset");
    }
}

inline PhaseLog to_phase(std::string name, const RunRecord& rec) {
    PhaseLog log;
    log.phase = std::move(name);
    log.epoch_loss = rec.epoch_loss;
    log.epoch_accuracy = rec.epoch_accuracy;
    log.seconds = rec.seconds;
    return log;
}

// Deterministic stream of forget-set rows: re-permutes whenever a pass over
// the forget set is exhausted, so paired loops can draw batches forever.
class ForgetCycler {
public:
    ForgetCycler(const std::vector<std::size_t>& forget, std::uint64_t seed)
        : forget_(forget), seed_(seed) {}

    std::vector<std::size_t> next(std::size_t want) {
        want = std::min(want, forget_.size());
        std::vector<std::size_t> rows;
        rows.reserve(want);
        while (rows.size() < want) {
            if (pos_ == order_.size()) {
                order_ = epoch_order(seed_, pass_++, forget_.size());
                pos_ = 0;
            }
            rows.push_back(forget_[order_[pos_++]]);
        }
        return rows;
    }

private:
    const std::vector<std::size_t>& forget_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::size_t pass_ = 0;
};

// Forward through the trailing head region on cached encoder features,
// mirroring what the full network would produce past the encoder tap.
inline Tensor head_region_forward(const Network& net, const Tensor& features) {
    Tensor cur = features;
    const std::size_t b = features.shape[0];
    for (std::size_t i = net.total_layers() - net.head_depth; i < net.total_layers(); ++i) {
        const AffineLayer& l = layer_at(net, i);
        Tensor next({b, l.out_width()});
        matmul_kernel(cur.data.data(), l.w.data.data(), next.data.data(), b, l.in_width(),
                      l.out_width());
        add_bias_kernel(next.data.data(), l.b.data.data(), next.data.data(), b, l.out_width());
        if (i < net.depth()) tanh_kernel(next.data.data(), next.data.data(), next.numel());
        cur = std::move(next);
    }
    return cur;
}

// Encoder output for the listed rows, computed once and reused by head-only
// procedures so they never pay for encoder passes during training.
inline Tensor encoder_features(const Network& net, const Dataset& data,
                               const std::vector<std::size_t>& indices) {
    const std::size_t enc = net.encoder_output_index();
    Tensor out;
    const std::size_t chunk = 512;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        const std::size_t stop = std::min(indices.size(), start + chunk);
        std::vector<std::size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                      indices.begin() + static_cast<std::ptrdiff_t>(stop));
        const TapBundle taps = forward_with_taps(net, gather_rows(data.features, part));
        const Tensor& f = taps.features[enc];
        if (out.data.empty()) out = Tensor::zeros({indices.size(), f.shape[1]});
        std::copy(f.data.begin(), f.data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(start * f.shape[1]));
    }
    return out;
}

// Graph chain over an inclusive layer range; x is already built by the caller.
// Parameter nodes are named w<i>/b<i> to match bind_region below.
inline Graph::NodeId region_chain(Graph& g, Graph::NodeId x, const Network& net,
                                  std::size_t first, std::size_t last) {
    Graph::NodeId cur = x;
    for (std::size_t i = first; i < last; ++i) {
        const AffineLayer& l = layer_at(net, i);
        auto w = g.param(weight_name(i), l.w.shape);
        auto b = g.param(bias_name(i), l.b.shape);
        cur = g.add_bias(g.matmul(cur, w), b);
        if (i < net.depth()) cur = g.tanh_act(cur);
    }
    return cur;
}

// Second chain over the same layer range, reusing the parameter nodes that
// region_chain already registered (graphs reject duplicate placeholder names).
inline Graph::NodeId region_chain_shared(Graph& g, Graph::NodeId x, const Network& net,
                                         std::size_t first, std::size_t last,
                                         const std::vector<Graph::NodeId>& params) {
    Graph::NodeId cur = x;
    std::size_t p = 0;
    for (std::size_t i = first; i < last; ++i) {
        cur = g.add_bias(g.matmul(cur, params[p]), params[p + 1]);
        p += 2;
        if (i < net.depth()) cur = g.tanh_act(cur);
    }
    return cur;
}

inline void bind_region(Evaluator& ev, const Network& net, std::size_t first, std::size_t last) {
    for (std::size_t i = first; i < last; ++i) {
        const AffineLayer& l = layer_at(net, i);
        ev.bind(weight_name(i), &l.w);
        ev.bind(bias_name(i), &l.b);
    }
}

inline std::vector<Tensor*> region_params(Network& net, std::size_t first, std::size_t last) {
    std::vector<Tensor*> out;
    for (std::size_t i = first; i < last; ++i) {
        out.push_back(&layer_at(net, i).w);
        out.push_back(&layer_at(net, i).b);
    }
    return out;
}

inline std::vector<const std::vector<double>*> region_grads(const Evaluator& ev,
                                                            std::size_t first,
                                                            std::size_t last) {
    std::vector<const std::vector<double>*> out;
    for (std::size_t i = first; i < last; ++i) {
        out.push_back(&ev.grad_of(weight_name(i)));
        out.push_back(&ev.grad_of(bias_name(i)));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Supervised contrastive loss (value-only convenience over the graph op)
// ---------------------------------------------------------------------------

inline double supcon_value(const Tensor& embeddings, const std::vector<int>& labels,
                           double temperature) {
    Graph g;
    auto e = g.input("e", embeddings.shape);
    g.set_objective(g.supcon_loss(e, labels, temperature));
    Evaluator ev(g);
    ev.bind("e", &embeddings);
    return ev.run_forward();
}

// ---------------------------------------------------------------------------
// FT: finetune on the retain set, optionally with l1 shrinkage
// ---------------------------------------------------------------------------

struct FinetuneOptions {
    std::size_t epochs = 10;
    double learning_rate = 0.02;
    double l1_lambda = 0.0;  // 0 disables the sparsity term
    std::size_t batch_size = 64;
    double l2 = 5e-4;
};

inline UnlearnResult unlearn_finetune(const UnlearnRequest& req, const FinetuneOptions& opt) {
    detail::validate_request(req);
    detail::Stopwatch watch;
    TrainConfig cfg;
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.l1 = opt.l1_lambda;
    cfg.l2 = opt.l2;
    cfg.shuffle_seed = derive_seed(req.seed, "order");
    RunRecord rec = train_supervised(req.original, req.split.base, req.split.retain_indices,
                                     nullptr, cfg);
    UnlearnResult res;
    res.phase_logs.push_back(detail::to_phase("finetune", rec));
    res.unlearned = std::move(rec.network);
    res.rte_seconds = watch.elapsed();
    return res;
}

// ---------------------------------------------------------------------------
// RL: joint finetuning with randomly relabeled forget samples
// ---------------------------------------------------------------------------

struct RandomLabelOptions {
    std::size_t epochs = 10;
    double learning_rate = 0.02;
    std::size_t batch_size = 64;
    double l2 = 5e-4;
    std::uint64_t relabel_seed = 0;
};

// Uniform draw over the wrong labels only; the true label is never returned.
inline std::vector<int> random_wrong_labels(const Dataset& data,
                                            const std::vector<std::size_t>& rows,
                                            std::uint64_t relabel_seed) {
    Rng rng(derive_seed(relabel_seed, "relabel"));
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int truth = data.labels[rows[i]];
        const int draw = static_cast<int>(rng.below(static_cast<std::uint64_t>(data.num_classes - 1)));
        out[i] = draw >= truth ? draw + 1 : draw;
    }
    return out;
}

inline UnlearnResult unlearn_random_label(const UnlearnRequest& req,
                                          const RandomLabelOptions& opt) {
    detail::validate_request(req);
    detail::Stopwatch watch;
    const SplitSpec& split = req.split;

    std::vector<std::size_t> view = split.retain_indices;
    view.insert(view.end(), split.forget_indices.begin(), split.forget_indices.end());
    std::vector<int> labels = gather_labels(split.base.labels, split.retain_indices);
    const std::vector<int> pseudo =
        random_wrong_labels(split.base, split.forget_indices, opt.relabel_seed);
    labels.insert(labels.end(), pseudo.begin(), pseudo.end());

    TrainConfig cfg;
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.l2 = opt.l2;
    cfg.shuffle_seed = derive_seed(req.seed, "order");
    RunRecord rec = train_supervised(req.original, split.base, view, &labels, cfg);

    UnlearnResult res;
    res.phase_logs.push_back(detail::to_phase("random_label", rec));
    res.unlearned = std::move(rec.network);
    res.rte_seconds = watch.elapsed();
    return res;
}

// ---------------------------------------------------------------------------
// NegGrad+: descent on retain batches, weighted ascent on forget batches
// ---------------------------------------------------------------------------

struct NegGradOptions {
    std::size_t epochs = 5;
    double learning_rate = 0.01;
    double ascent_weight = 0.1;  // 0 degenerates to plain FT
    std::size_t batch_size = 64;
    double l2 = 5e-4;
    double loss_guard = 50.0;  // abort when the retain batch loss exceeds this
};

inline UnlearnResult unlearn_neggrad(const UnlearnRequest& req, const NegGradOptions& opt) {
    detail::validate_request(req);
    if (opt.ascent_weight < 0.0 || opt.ascent_weight > 1.0) {
        throw std::invalid_argument("unlearn_neggrad: ascent_weight must lie in [0, 1]");
    }
    detail::Stopwatch watch;
    const Dataset& base = req.split.base;
    const auto& retain = req.split.retain_indices;
    Network net = req.original;

    TrainConfig cfg;  // optimizer settings only; the loop below drives the data
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.l2 = opt.l2;
    cfg.validate();

    const std::uint64_t order_seed = derive_seed(req.seed, "order");
    detail::ForgetCycler cycler(req.split.forget_indices, derive_seed(req.seed, "forget-order"));

    const std::size_t total = net.total_layers();
    Optimizer optimizer(detail::region_params(net, 0, total), cfg);

    PhaseLog descent{"descent", {}, {}, 0.0};
    PhaseLog ascent{"ascent", {}, {}, 0.0};
    double last_finite = 0.0;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const auto order = epoch_order(order_seed, epoch, retain.size());
        double retain_loss_sum = 0.0, forget_loss_sum = 0.0;
        std::size_t correct = 0, forget_seen = 0;
        for (std::size_t start = 0, step = 0; start < retain.size();
             start += opt.batch_size, ++step) {
            const std::size_t stop = std::min(retain.size(), start + opt.batch_size);
            const std::size_t b = stop - start;
            std::vector<std::size_t> rows(b);
            std::vector<int> labels(b);
            for (std::size_t i = 0; i < b; ++i) {
                rows[i] = retain[order[start + i]];
                labels[i] = base.labels[rows[i]];
            }
            const Tensor xb = gather_rows(base.features, rows);

            const auto forget_rows = cycler.next(opt.batch_size);
            const Tensor xf = gather_rows(base.features, forget_rows);
            const std::vector<int> forget_labels = gather_labels(base.labels, forget_rows);

            Graph g;
            auto xr_in = g.input("xr", xb.shape);
            auto logits_r = detail::region_chain(g, xr_in, net, 0, total);
            auto ce_r = g.cross_entropy(logits_r, labels);
            g.mark_output("loss_r", ce_r);
            g.mark_output("logits_r", logits_r);
            std::vector<Graph::NodeId> shared;
            for (std::size_t i = 0; i < total; ++i) {
                shared.push_back(g.node_by_name(detail::weight_name(i)));
                shared.push_back(g.node_by_name(detail::bias_name(i)));
            }
            auto xf_in = g.input("xf", xf.shape);
            auto logits_f = detail::region_chain_shared(g, xf_in, net, 0, total, shared);
            auto ce_f = g.cross_entropy(logits_f, forget_labels);
            g.mark_output("loss_f", ce_f);
            g.set_objective(g.add(ce_r, g.scale(ce_f, -opt.ascent_weight)));

            Evaluator ev(g);
            ev.bind("xr", &xb);
            ev.bind("xf", &xf);
            detail::bind_region(ev, net, 0, total);
            double loss_r, loss_f;
            try {
                ev.run_forward();
                loss_r = ev.value(ce_r).data[0];
                loss_f = ev.value(ce_f).data[0];
            } catch (const GraphError& e) {
                throw NumericalAbort(e.what(), epoch, step, last_finite, net);
            }
            if (!std::isfinite(loss_r) || !std::isfinite(loss_f) || loss_r > opt.loss_guard) {
                throw NumericalAbort("retain loss diverged past " +
                                         std::to_string(opt.loss_guard),
                                     epoch, step, last_finite, net);
            }
            last_finite = loss_r;
            retain_loss_sum += loss_r * static_cast<double>(b);
            forget_loss_sum += loss_f * static_cast<double>(forget_rows.size());
            forget_seen += forget_rows.size();
            const Tensor& lr_val = ev.value(logits_r);
            for (std::size_t r = 0; r < b; ++r) {
                if (argmax_row(lr_val.data.data() + r * lr_val.shape[1], lr_val.shape[1]) ==
                    labels[r]) {
                    ++correct;
                }
            }
            ev.run_backward();
            optimizer.apply(detail::region_grads(ev, 0, total));
        }
        descent.epoch_loss.push_back(retain_loss_sum / static_cast<double>(retain.size()));
        descent.epoch_accuracy.push_back(static_cast<double>(correct) /
                                         static_cast<double>(retain.size()));
        ascent.epoch_loss.push_back(forget_loss_sum / static_cast<double>(forget_seen));
    }

    UnlearnResult res;
    res.unlearned = std::move(net);
    descent.seconds = watch.elapsed();
    res.phase_logs.push_back(std::move(descent));
    res.phase_logs.push_back(std::move(ascent));
    res.rte_seconds = watch.elapsed();
    return res;
}

// ---------------------------------------------------------------------------
// EU-k / CF-k: retrain or finetune only the last k layers
// ---------------------------------------------------------------------------

enum class LastKMode { eu, cf };

struct LastKOptions {
    std::size_t epochs = 10;
    double learning_rate = 0.02;
    std::size_t batch_size = 64;
    double l2 = 5e-4;
};

inline UnlearnResult unlearn_last_k(const UnlearnRequest& req, LastKMode mode, std::size_t k,
                                    const LastKOptions& opt) {
    detail::validate_request(req);
    Network net = req.original;
    const std::size_t total = net.total_layers();
    if (k < 1 || k > total) {
        throw std::invalid_argument("unlearn_last_k: k must be in [1, " + std::to_string(total) +
                                    "]");
    }
    detail::Stopwatch watch;
    if (mode == LastKMode::eu) net = reinit_layers(net, k, derive_seed(req.seed, "reinit"));

    TrainConfig cfg;
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.l2 = opt.l2;
    cfg.scope = TrainableScope::last_k;
    cfg.last_k = k;
    cfg.shuffle_seed = derive_seed(req.seed, "order");
    RunRecord rec = train_supervised(net, req.split.base, req.split.retain_indices, nullptr, cfg);

    if (k < total &&
        digest_of_layers(rec.network, 0, total - k) != digest_of_layers(req.original, 0, total - k)) {
        throw std::logic_error("unlearn_last_k: frozen prefix changed");
    }
    UnlearnResult res;
    res.phase_logs.push_back(detail::to_phase(mode == LastKMode::eu ? "exact_last_k"
                                                                    : "catastrophic_last_k",
                                              rec));
    res.unlearned = std::move(rec.network);
    res.rte_seconds = watch.elapsed();
    return res;
}

// Gold standard: a fresh network of the same architecture trained on the
// retain set only.  unlearn_last_k in EU mode with k == total layers matches
// this bit for bit under the same seed.
struct RetrainOptions {
    std::size_t epochs = 20;
    double learning_rate = 0.05;
    std::size_t batch_size = 64;
    double l2 = 5e-4;
};

inline UnlearnResult retrain_reference(const UnlearnRequest& req, const RetrainOptions& opt) {
    detail::validate_request(req);
    detail::Stopwatch watch;
    Network fresh = reinit_layers(req.original, req.original.total_layers(),
                                  derive_seed(req.seed, "reinit"));
    TrainConfig cfg;
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.l2 = opt.l2;
    cfg.shuffle_seed = derive_seed(req.seed, "order");
    RunRecord rec = train_supervised(fresh, req.split.base, req.split.retain_indices, nullptr, cfg);
    UnlearnResult res;
    res.phase_logs.push_back(detail::to_phase("retrain", rec));
    res.unlearned = std::move(rec.network);
    res.rte_seconds = watch.elapsed();
    return res;
}

// ---------------------------------------------------------------------------
// HD: head distillation with a frozen encoder
// ---------------------------------------------------------------------------

struct HdOptions {
    std::size_t epochs = 30;
    double learning_rate = 0.05;
    std::size_t batch_size = 64;
    double ascent_weight = 0.1;  // random-forgetting variant only
    double l2 = 0.0;             // decay off by default: distillation wants an exact match
};

inline UnlearnResult unlearn_hd(const UnlearnRequest& req, const HdOptions& opt) {
    detail::validate_request(req);
    detail::Stopwatch watch;
    const SplitSpec& split = req.split;
    const Dataset& base = split.base;
    Network net = req.original;
    const std::size_t total = net.total_layers();
    const std::size_t head_first = total - net.head_depth;

    TrainConfig cfg;
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.l2 = opt.l2;
    cfg.validate();
    Optimizer optimizer(detail::region_params(net, head_first, total), cfg);
    const std::uint64_t order_seed = derive_seed(req.seed, "order");

    PhaseLog log{split.mode == ForgetMode::classwise ? "head_distill" : "head_descent_ascent",
                 {},
                 {},
                 0.0};
    double last_finite = 0.0;

    if (split.mode == ForgetMode::classwise) {
        // Head matches the teacher's output with forget classes masked out.
        // Encoder features and teacher logits are computed once up front.
        const auto view = all_indices(base);
        const Tensor feats = detail::encoder_features(net, base, view);
        const Tensor teacher =
            mask_forget_logits(detail::head_region_forward(req.original, feats),
                               split.forget_classes);
        const std::size_t n = view.size();
        for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
            const auto order = epoch_order(order_seed, epoch, n);
            double loss_sum = 0.0;
            std::size_t correct = 0;
            for (std::size_t start = 0, step = 0; start < n; start += opt.batch_size, ++step) {
                const std::size_t stop = std::min(n, start + opt.batch_size);
                const std::size_t b = stop - start;
                std::vector<std::size_t> rows(b);
                for (std::size_t i = 0; i < b; ++i) rows[i] = order[start + i];
                const Tensor fb = gather_rows(feats, rows);
                const Tensor tb = gather_rows(teacher, rows);

                Graph g;
                auto f_in = g.input("f", fb.shape);
                auto logits = detail::region_chain(g, f_in, net, head_first, total);
                auto t_in = g.input("t", tb.shape, /*allow_neg_inf=*/true);
                auto kl = g.kl_div(t_in, logits);
                g.mark_output("logits", logits);
                g.set_objective(kl);

                Evaluator ev(g);
                ev.bind("f", &fb);
                ev.bind("t", &tb);
                detail::bind_region(ev, net, head_first, total);
                double loss;
                try {
                    loss = ev.run_forward();
                } catch (const GraphError& e) {
                    throw NumericalAbort(e.what(), epoch, step, last_finite, net);
                }
                if (!std::isfinite(loss)) {
                    throw NumericalAbort("distillation loss is not finite", epoch, step,
                                         last_finite, net);
                }
                last_finite = loss;
                loss_sum += loss * static_cast<double>(b);
                const Tensor& lv = ev.value(logits);
                for (std::size_t r = 0; r < b; ++r) {
                    if (argmax_row(lv.data.data() + r * lv.shape[1], lv.shape[1]) ==
                        base.labels[rows[r]]) {
                        ++correct;
                    }
                }
                ev.run_backward();
                optimizer.apply(detail::region_grads(ev, head_first, total));
            }
            log.epoch_loss.push_back(loss_sum / static_cast<double>(n));
            log.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
        }
    } else {
        // Random-forgetting variant: head-only descent on retain features and
        // weighted ascent on forget features.
        const Tensor retain_feats = detail::encoder_features(net, base, split.retain_indices);
        const Tensor forget_feats = detail::encoder_features(net, base, split.forget_indices);
        const std::vector<int> forget_labels = gather_labels(base.labels, split.forget_indices);
        std::vector<std::size_t> forget_local(split.forget_indices.size());
        for (std::size_t i = 0; i < forget_local.size(); ++i) forget_local[i] = i;
        detail::ForgetCycler cycler(forget_local, derive_seed(req.seed, "forget-order"));
        const std::size_t n = split.retain_indices.size();
        for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
            const auto order = epoch_order(order_seed, epoch, n);
            double loss_sum = 0.0;
            std::size_t correct = 0;
            for (std::size_t start = 0, step = 0; start < n; start += opt.batch_size, ++step) {
                const std::size_t stop = std::min(n, start + opt.batch_size);
                const std::size_t b = stop - start;
                std::vector<std::size_t> rows(b);
                std::vector<int> labels(b);
                for (std::size_t i = 0; i < b; ++i) {
                    rows[i] = order[start + i];
                    labels[i] = base.labels[split.retain_indices[rows[i]]];
                }
                const Tensor fb = gather_rows(retain_feats, rows);
                const auto frows = cycler.next(opt.batch_size);
                const Tensor ff = gather_rows(forget_feats, frows);
                std::vector<int> flabels(frows.size());
                for (std::size_t i = 0; i < frows.size(); ++i) flabels[i] = forget_labels[frows[i]];

                Graph g;
                auto fr_in = g.input("fr", fb.shape);
                auto logits_r = detail::region_chain(g, fr_in, net, head_first, total);
                auto ce_r = g.cross_entropy(logits_r, labels);
                g.mark_output("logits_r", logits_r);
                std::vector<Graph::NodeId> shared;
                for (std::size_t i = head_first; i < total; ++i) {
                    shared.push_back(g.node_by_name(detail::weight_name(i)));
                    shared.push_back(g.node_by_name(detail::bias_name(i)));
                }
                auto ff_in = g.input("ff", ff.shape);
                auto logits_f =
                    detail::region_chain_shared(g, ff_in, net, head_first, total, shared);
                auto ce_f = g.cross_entropy(logits_f, flabels);
                g.set_objective(g.add(ce_r, g.scale(ce_f, -opt.ascent_weight)));

                Evaluator ev(g);
                ev.bind("fr", &fb);
                ev.bind("ff", &ff);
                detail::bind_region(ev, net, head_first, total);
                double loss;
                try {
                    ev.run_forward();
                    loss = ev.value(ce_r).data[0];
                } catch (const GraphError& e) {
                    throw NumericalAbort(e.what(), epoch, step, last_finite, net);
                }
                if (!std::isfinite(loss)) {
                    throw NumericalAbort("head loss is not finite", epoch, step, last_finite, net);
                }
                last_finite = loss;
                loss_sum += loss * static_cast<double>(b);
                const Tensor& lv = ev.value(logits_r);
                for (std::size_t r = 0; r < b; ++r) {
                    if (argmax_row(lv.data.data() + r * lv.shape[1], lv.shape[1]) == labels[r]) {
                        ++correct;
                    }
                }
                ev.run_backward();
                optimizer.apply(detail::region_grads(ev, head_first, total));
            }
            log.epoch_loss.push_back(loss_sum / static_cast<double>(n));
            log.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
        }
    }

    if (encoder_digest(net) != encoder_digest(req.original)) {
        throw std::logic_error("unlearn_hd: encoder changed while only the head should train");
    }
    UnlearnResult res;
    res.unlearned = std::move(net);
    log.seconds = watch.elapsed();
    res.phase_logs.push_back(std::move(log));
    res.rte_seconds = watch.elapsed();
    return res;
}

// ---------------------------------------------------------------------------
// COLA / COLA+: contrastive collapse, then cross-entropy alignment
// ---------------------------------------------------------------------------

enum class ColaVariant { plain, plus };

struct ColaOptions {
    std::size_t collapse_epochs = 10;
    double collapse_lr = 0.05;
    std::size_t align_epochs = 10;
    double align_lr = 0.02;
    double temperature = 0.5;
    std::size_t batch_size = 128;
    double l2 = 5e-4;
};

// Most confident wrong answer: argmax of the row over classes != truth.
inline int second_best_label(const double* logits, std::size_t classes, int truth) {
    int best = -1;
    for (std::size_t c = 0; c < classes; ++c) {
        if (static_cast<int>(c) == truth) continue;
        if (best < 0 || logits[c] > logits[best]) best = static_cast<int>(c);
    }
    return best;
}

inline UnlearnResult unlearn_cola(const UnlearnRequest& req, ColaVariant variant,
                                  const ColaOptions& opt) {
    detail::validate_request(req);
    if (!(opt.temperature > 0.0)) {
        throw std::invalid_argument("unlearn_cola: temperature must be positive");
    }
    detail::Stopwatch watch;
    const SplitSpec& split = req.split;
    const Dataset& base = split.base;
    const auto& retain = split.retain_indices;
    Network net = req.original;
    const std::size_t enc_last = net.total_layers() - net.head_depth;  // encoder = [0, enc_last)

    TrainConfig cfg;
    cfg.epochs = opt.collapse_epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.collapse_lr;
    cfg.l2 = opt.l2;
    cfg.validate();
    Optimizer optimizer(detail::region_params(net, 0, enc_last), cfg);
    const std::uint64_t order_seed = derive_seed(req.seed, "order");
    detail::ForgetCycler cycler(split.forget_indices, derive_seed(req.seed, "forget-order"));

    PhaseLog collapse{"collapse", {}, {}, 0.0};
    double last_finite = 0.0;

    for (std::size_t epoch = 0; epoch < opt.collapse_epochs; ++epoch) {
        const auto order = epoch_order(order_seed, epoch, retain.size());
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0, step = 0; start < retain.size();
             start += opt.batch_size, ++step) {
            const std::size_t stop = std::min(retain.size(), start + opt.batch_size);
            const std::size_t b = stop - start;
            std::vector<std::size_t> rows(b);
            for (std::size_t i = 0; i < b; ++i) rows[i] = retain[order[start + i]];
            std::vector<int> labels = gather_labels(base.labels, rows);

            if (variant == ColaVariant::plus) {
                // Forget samples join the batch under a live pseudo-label: the
                // current model's most confident class other than the truth.
                const auto frows = cycler.next(opt.batch_size);
                const Tensor flogits = forward_logits(net, gather_rows(base.features, frows));
                for (std::size_t i = 0; i < frows.size(); ++i) {
                    const int truth = base.labels[frows[i]];
                    const int pseudo = second_best_label(
                        flogits.data.data() + i * flogits.shape[1], flogits.shape[1], truth);
                    if (pseudo == truth) {
                        throw std::logic_error("unlearn_cola: pseudo-label equals true label");
                    }
                    rows.push_back(frows[i]);
                    labels.push_back(pseudo);
                }
            }
            if (rows.size() < 2) continue;  // contrastive loss needs pairs
            const Tensor xb = gather_rows(base.features, rows);

            Graph g;
            auto x_in = g.input("x", xb.shape);
            auto embed = detail::region_chain(g, x_in, net, 0, enc_last);
            g.set_objective(g.supcon_loss(embed, labels, opt.temperature));

            Evaluator ev(g);
            ev.bind("x", &xb);
            detail::bind_region(ev, net, 0, enc_last);
            double loss;
            try {
                loss = ev.run_forward();
            } catch (const GraphError& e) {
                throw NumericalAbort(e.what(), epoch, step, last_finite, net);
            }
            if (!std::isfinite(loss)) {
                throw NumericalAbort("contrastive loss is not finite", epoch, step, last_finite,
                                     net);
            }
            last_finite = loss;
            loss_sum += loss * static_cast<double>(rows.size());
            seen += rows.size();
            ev.run_backward();
            optimizer.apply(detail::region_grads(ev, 0, enc_last));
        }
        collapse.epoch_loss.push_back(seen ? loss_sum / static_cast<double>(seen) : 0.0);
    }
    collapse.seconds = watch.elapsed();

    // Alignment: plain restarts the head from scratch, plus keeps it.
    if (variant == ColaVariant::plain) {
        net = reinit_layers(net, net.head_depth, derive_seed(req.seed, "head"));
    }
    TrainConfig align_cfg;
    align_cfg.epochs = opt.align_epochs;
    align_cfg.batch_size = opt.batch_size;
    align_cfg.learning_rate = opt.align_lr;
    align_cfg.l2 = opt.l2;
    align_cfg.shuffle_seed = derive_seed(req.seed, "align-order");
    RunRecord rec = train_supervised(net, base, retain, nullptr, align_cfg);

    UnlearnResult res;
    res.phase_logs.push_back(std::move(collapse));
    res.phase_logs.push_back(detail::to_phase("align", rec));
    res.unlearned = std::move(rec.network);
    res.rte_seconds = watch.elapsed();
    return res;
}

}  // namespace mulab
