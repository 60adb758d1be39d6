#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mulab/dataset.hpp"
#include "mulab/graph.hpp"
#include "mulab/network.hpp"
#include "mulab/rng.hpp"
#include "mulab/split.hpp"
#include "mulab/train.hpp"

namespace mulab {

// ---------------------------------------------------------------------------
// Contrastive lower-bound estimation of I(Z_l; Y) at hidden layers, and the
// information-difference index that compares an unlearned model against the
// original relative to a reference model.
//
// The estimator trains a small critic to tell which label each feature row
// belongs to; the resulting InfoNCE value is a lower bound on the mutual
// information and can never exceed the label entropy of the batch
// composition, because every batch carries exactly the same label counts.
// ---------------------------------------------------------------------------

// Which label variable is paired with the features.
//   binary      — membership: 1 on forget rows, 0 on retain rows
//   multiclass  — the true class, restricted to forget rows
enum class LabelKind { binary, multiclass };

inline const char* label_kind_name(LabelKind k) {
    return k == LabelKind::binary ? "binary" : "multiclass";
}

inline LabelKind label_kind_from_string(const std::string& s) {
    if (s == "binary") return LabelKind::binary;
    if (s == "multiclass") return LabelKind::multiclass;
    throw std::invalid_argument("label_kind_from_string: unknown kind '" + s + "'");
}

struct MiConfig {
    std::size_t embedding_dim = 32;  // critic output width d
    std::size_t replications = 5;    // independent critic runs averaged per layer
    std::size_t batch_k = 250;       // requested batch size (raised to satisfy the
                                     // log K >= 4 H(Y) saturation margin)
    std::size_t epochs = 30;
    std::size_t tail_epochs = 5;     // estimate = mean held-out value over this tail
    double eval_fraction = 0.2;      // per-label holdout used for the readout
    double critic_lr = 1e-3;         // feature critic, adaptive optimizer
    double table_lr = 5e-3;          // label table learns faster than the critic
    double forget_fraction = 0.5;    // binary batches: share of label-1 rows
    double retain_fraction = 1.0;    // random subsample of the retain pool
    std::uint64_t seed = 0;

    void validate() const {
        if (embedding_dim < 1) throw std::invalid_argument("MiConfig: embedding_dim must be >= 1");
        if (replications < 1) throw std::invalid_argument("MiConfig: replications must be >= 1");
        if (batch_k < 2) throw std::invalid_argument("MiConfig: batch_k must be >= 2");
        if (epochs < 1) throw std::invalid_argument("MiConfig: epochs must be >= 1");
        if (tail_epochs < 1) throw std::invalid_argument("MiConfig: tail_epochs must be >= 1");
        if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
            throw std::invalid_argument("MiConfig: eval_fraction must be in (0, 1)");
        }
        if (!(critic_lr > 0.0) || !(table_lr > 0.0)) {
            throw std::invalid_argument("MiConfig: learning rates must be positive");
        }
        if (!(forget_fraction > 0.0 && forget_fraction < 1.0)) {
            throw std::invalid_argument("MiConfig: forget_fraction must be in (0, 1)");
        }
        if (!(retain_fraction > 0.0 && retain_fraction <= 1.0)) {
            throw std::invalid_argument("MiConfig: retain_fraction must be in (0, 1]");
        }
    }
};

// Raw per-layer estimate.  `estimate` may be slightly negative (it is a bound
// evaluated on held-out rows); consumers that display values clip at zero, but
// differences are always taken on the raw numbers.
struct MiEstimate {
    double estimate = 0.0;
    double stddev = 0.0;
    std::vector<double> replication_values;
    double label_entropy = 0.0;  // H(Y) of the exact batch composition, nats
    std::size_t batch_k = 0;     // effective batch size after the margin raise
};

// Estimates across a set of layers under one label variable.
struct MiCurve {
    std::vector<std::size_t> layer_indices;
    std::vector<double> estimates;  // raw nats
    std::vector<double> stddevs;
    LabelKind label_kind = LabelKind::binary;
    double label_entropy = 0.0;
};

// Slack allowed around the mathematical range [0, H(Y)] before an estimate is
// considered numerically broken.
inline constexpr double kMiRangeSlack = 0.05;

// InfoNCE value of explicit embedding pairs; small graph evaluated once.
// Bounded above by log K for any inputs.
inline double infonce_value(const Tensor& u, const Tensor& v) {
    Graph g;
    auto a = g.input("u", u.shape);
    auto b = g.input("v", v.shape);
    auto val = g.infonce(a, b);
    g.mark_output("value", val);
    g.set_objective(val);
    Evaluator ev(g);
    ev.bind("u", &u);
    ev.bind("v", &v);
    ev.run_forward();
    return ev.value(val).data[0];
}

namespace detail {

// Critic: a stack of affine+tanh blocks mirroring the widths of the target
// network past the tapped layer, a linear projection to the embedding space,
// and a trainable table holding one embedding per label value.
struct Critic {
    std::vector<AffineLayer> hidden;
    AffineLayer projection;
    Tensor table;  // [num_labels x embedding_dim]
};

inline Critic init_critic(std::size_t in_width, const std::vector<std::size_t>& hidden_widths,
                          std::size_t num_labels, std::size_t embedding_dim, std::uint64_t seed) {
    Critic c;
    std::size_t in = in_width;
    std::size_t idx = 0;
    for (std::size_t w : hidden_widths) {
        c.hidden.push_back(init_affine(in, w, seed, idx++));
        in = w;
    }
    c.projection = init_affine(in, embedding_dim, seed, idx);
    c.table = Tensor({num_labels, embedding_dim});
    Rng rng(derive_seed(seed, "table"));
    const double scale = 1.0 / std::sqrt(static_cast<double>(embedding_dim));
    for (double& x : c.table.data) x = rng.uniform(-scale, scale);
    return c;
}

struct CriticGraph {
    Graph g;
    Graph::NodeId value = -1;
};

// z -> hidden blocks -> linear projection -> InfoNCE against the label table.
// The objective is the negated value: minimizing it maximizes the bound.
inline CriticGraph make_critic_graph(const Critic& c, std::size_t batch, std::size_t in_width,
                                     const std::vector<int>& labels) {
    CriticGraph cg;
    Graph::NodeId cur = cg.g.input("z", {batch, in_width});
    for (std::size_t i = 0; i < c.hidden.size(); ++i) {
        auto w = cg.g.param("f_w" + std::to_string(i), c.hidden[i].w.shape);
        auto b = cg.g.param("f_b" + std::to_string(i), c.hidden[i].b.shape);
        cur = cg.g.tanh_act(cg.g.add_bias(cg.g.matmul(cur, w), b));
    }
    auto pw = cg.g.param("p_w", c.projection.w.shape);
    auto pb = cg.g.param("p_b", c.projection.b.shape);
    cur = cg.g.add_bias(cg.g.matmul(cur, pw), pb);
    auto table = cg.g.param("g_table", c.table.shape);
    cg.value = cg.g.infonce_labels(cur, table, labels);
    cg.g.mark_output("value", cg.value);
    cg.g.set_objective(cg.g.scale(cg.value, -1.0));
    return cg;
}

inline void bind_critic(Evaluator& ev, const Critic& c) {
    for (std::size_t i = 0; i < c.hidden.size(); ++i) {
        ev.bind("f_w" + std::to_string(i), &c.hidden[i].w);
        ev.bind("f_b" + std::to_string(i), &c.hidden[i].b);
    }
    ev.bind("p_w", &c.projection.w);
    ev.bind("p_b", &c.projection.b);
    ev.bind("g_table", &c.table);
}

// Exact-count batch: counts[c] rows drawn from each label's shuffled order,
// cycling (rows repeat) when an order is shorter than its quota.
struct GroupCursor {
    const std::vector<std::size_t>* order = nullptr;
    std::size_t pos = 0;

    std::size_t next() {
        const std::size_t row = (*order)[pos];
        pos = (pos + 1) % order->size();
        return row;
    }
};

struct MiBatch {
    std::vector<std::size_t> rows;  // positions into the feature tensor
    std::vector<int> labels;
};

inline MiBatch draw_batch(std::vector<GroupCursor>& cursors,
                          const std::vector<std::size_t>& counts) {
    MiBatch b;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        for (std::size_t k = 0; k < counts[c]; ++k) {
            b.rows.push_back(cursors[c].next());
            b.labels.push_back(static_cast<int>(c));
        }
    }
    return b;
}

// Per-block post-tanh features of one layer for the given dataset rows.
inline Tensor layer_features(const Network& net, const Dataset& data,
                             const std::vector<std::size_t>& rows, std::size_t layer) {
    const std::size_t width = net.blocks[layer].out_width();
    Tensor out({rows.size(), width});
    const std::size_t chunk = 512;
    for (std::size_t start = 0; start < rows.size(); start += chunk) {
        const std::size_t stop = std::min(rows.size(), start + chunk);
        std::vector<std::size_t> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                      rows.begin() + static_cast<std::ptrdiff_t>(stop));
        TapBundle taps = forward_with_taps(net, gather_rows(data.features, part));
        const Tensor& z = taps.features[layer];
        std::copy(z.data.begin(), z.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * width));
    }
    return out;
}

inline double entropy_of_counts(const std::vector<std::size_t>& counts) {
    double total = 0.0;
    for (std::size_t c : counts) total += static_cast<double>(c);
    double h = 0.0;
    for (std::size_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return h;
}

inline double mean_of(const std::vector<double>& xs, std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += xs[i];
    return s / static_cast<double>(to - from);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core estimator on explicit features.
//
// `batch_counts[c]` is the number of label-c rows in every batch; zero only
// for labels absent from the pool.  If the implied batch size K leaves the
// saturation margin log K < 4 H(Y), every count is scaled by the smallest
// integer factor that restores it — this keeps the composition (and hence
// H(Y)) unchanged while making the log K ceiling irrelevant to the readout.
// Each replication reinitializes the critic from a seed derived only from
// (seed, layer_tag, replication), never from the model, so two models with
// identical features produce bit-identical estimates.
// ---------------------------------------------------------------------------
inline MiEstimate estimate_feature_mi(const Tensor& features, const std::vector<int>& labels,
                                      std::size_t num_labels,
                                      const std::vector<std::size_t>& critic_widths,
                                      std::vector<std::size_t> batch_counts, const MiConfig& cfg,
                                      std::size_t layer_tag) {
    cfg.validate();
    if (features.shape.size() != 2 || features.shape[0] == 0) {
        throw std::invalid_argument("estimate_feature_mi: features must be a nonempty matrix");
    }
    const std::size_t n = features.shape[0];
    const std::size_t width = features.shape[1];
    if (labels.size() != n) {
        throw std::invalid_argument("estimate_feature_mi: label count does not match rows");
    }
    if (num_labels < 2) {
        throw std::invalid_argument("estimate_feature_mi: need at least two label values");
    }
    if (batch_counts.size() != num_labels) {
        throw std::invalid_argument("estimate_feature_mi: batch_counts size mismatch");
    }

    std::vector<std::vector<std::size_t>> groups(num_labels);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= num_labels) {
            throw std::invalid_argument("estimate_feature_mi: label out of range");
        }
        groups[static_cast<std::size_t>(y)].push_back(i);
    }
    std::size_t present = 0;
    for (std::size_t c = 0; c < num_labels; ++c) {
        const bool has_rows = !groups[c].empty();
        if (has_rows) ++present;
        if (has_rows != (batch_counts[c] > 0)) {
            throw std::invalid_argument(
                "estimate_feature_mi: batch_counts must be positive exactly for present labels");
        }
    }
    if (present < 2) {
        throw std::invalid_argument(
            "estimate_feature_mi: the label variable is constant on this pool; the "
            "mutual-information target is degenerate");
    }
    for (std::size_t c = 0; c < num_labels; ++c) {
        if (!groups[c].empty() && groups[c].size() < 2) {
            throw std::invalid_argument("estimate_feature_mi: label " + std::to_string(c) +
                                        " has a single row; cannot hold out an eval split");
        }
    }

    // Effective batch: scale counts so that log K >= 4 H(Y).
    const double h = detail::entropy_of_counts(batch_counts);
    std::size_t k = 0;
    for (std::size_t c : batch_counts) k += c;
    const double k_needed = std::exp(4.0 * h);
    if (static_cast<double>(k) < k_needed) {
        const auto factor =
            static_cast<std::size_t>(std::ceil(k_needed / static_cast<double>(k) - 1e-12));
        for (std::size_t& c : batch_counts) c *= factor;
        k *= factor;
    }

    std::vector<double> rep_values;
    rep_values.reserve(cfg.replications);

    for (std::size_t rep = 0; rep < cfg.replications; ++rep) {
        const std::uint64_t critic_seed = derive_seed(cfg.seed, "mi-critic", layer_tag, rep);
        const std::uint64_t split_seed = derive_seed(cfg.seed, "mi-split", layer_tag, rep);
        const std::uint64_t order_seed = derive_seed(cfg.seed, "mi-order", layer_tag, rep);

        // Per-label holdout: at least one row on each side.
        std::vector<std::vector<std::size_t>> train_rows(num_labels), eval_rows(num_labels);
        std::size_t train_total = 0, eval_total = 0;
        for (std::size_t c = 0; c < num_labels; ++c) {
            if (groups[c].empty()) continue;
            const std::size_t g = groups[c].size();
            auto want = static_cast<std::size_t>(
                std::llround(cfg.eval_fraction * static_cast<double>(g)));
            want = std::min(std::max<std::size_t>(want, 1), g - 1);
            Rng rng(derive_seed(split_seed, "group", c));
            const std::vector<std::size_t> perm = rng.permutation(g);
            for (std::size_t i = 0; i < g; ++i) {
                (i < want ? eval_rows[c] : train_rows[c]).push_back(groups[c][perm[i]]);
            }
            eval_total += want;
            train_total += g - want;
        }

        // Held-out batches are fixed for the whole replication.
        std::vector<std::vector<std::size_t>> eval_orders(num_labels);
        std::vector<detail::GroupCursor> eval_cursors(num_labels);
        for (std::size_t c = 0; c < num_labels; ++c) {
            if (groups[c].empty()) continue;
            Rng rng(derive_seed(order_seed, "eval", c));
            for (std::size_t i : rng.permutation(eval_rows[c].size())) {
                eval_orders[c].push_back(eval_rows[c][i]);
            }
            eval_cursors[c].order = &eval_orders[c];
        }
        const std::size_t eval_steps = std::max<std::size_t>(1, eval_total / k);
        std::vector<detail::MiBatch> eval_batches;
        std::vector<Tensor> eval_features;
        for (std::size_t s = 0; s < eval_steps; ++s) {
            eval_batches.push_back(detail::draw_batch(eval_cursors, batch_counts));
            eval_features.push_back(gather_rows(features, eval_batches.back().rows));
        }

        detail::Critic critic =
            detail::init_critic(width, critic_widths, num_labels, cfg.embedding_dim, critic_seed);
        std::vector<Tensor*> f_params;
        for (auto& blk : critic.hidden) {
            f_params.push_back(&blk.w);
            f_params.push_back(&blk.b);
        }
        f_params.push_back(&critic.projection.w);
        f_params.push_back(&critic.projection.b);

        TrainConfig f_cfg;
        f_cfg.optimizer = OptimizerKind::adaptive;
        f_cfg.learning_rate = cfg.critic_lr;
        f_cfg.l2 = 0.0;
        TrainConfig g_cfg = f_cfg;
        g_cfg.learning_rate = cfg.table_lr;
        Optimizer f_opt(f_params, f_cfg);
        Optimizer g_opt({&critic.table}, g_cfg);

        const std::size_t train_steps = std::max<std::size_t>(1, train_total / k);
        std::vector<double> epoch_values;
        epoch_values.reserve(cfg.epochs);
        double last_finite = 0.0;

        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::vector<std::vector<std::size_t>> train_orders(num_labels);
            std::vector<detail::GroupCursor> cursors(num_labels);
            for (std::size_t c = 0; c < num_labels; ++c) {
                if (groups[c].empty()) continue;
                Rng rng(derive_seed(order_seed, "train", epoch, c));
                for (std::size_t i : rng.permutation(train_rows[c].size())) {
                    train_orders[c].push_back(train_rows[c][i]);
                }
                cursors[c].order = &train_orders[c];
            }
            for (std::size_t step = 0; step < train_steps; ++step) {
                const detail::MiBatch batch = detail::draw_batch(cursors, batch_counts);
                const Tensor z = gather_rows(features, batch.rows);
                auto cg = detail::make_critic_graph(critic, k, width, batch.labels);
                Evaluator ev(cg.g);
                ev.bind("z", &z);
                detail::bind_critic(ev, critic);
                ev.run_forward();
                const double value = ev.value(cg.value).data[0];
                if (!std::isfinite(value)) {
                    throw NumericalAbort("contrastive bound is not finite", epoch, step,
                                         last_finite, std::nullopt);
                }
                last_finite = value;
                ev.run_backward();
                std::vector<const std::vector<double>*> f_grads;
                for (std::size_t i = 0; i < critic.hidden.size(); ++i) {
                    f_grads.push_back(&ev.grad_of("f_w" + std::to_string(i)));
                    f_grads.push_back(&ev.grad_of("f_b" + std::to_string(i)));
                }
                f_grads.push_back(&ev.grad_of("p_w"));
                f_grads.push_back(&ev.grad_of("p_b"));
                f_opt.apply(f_grads);
                g_opt.apply({&ev.grad_of("g_table")});
            }

            double eval_sum = 0.0;
            for (std::size_t s = 0; s < eval_steps; ++s) {
                auto cg = detail::make_critic_graph(critic, k, width, eval_batches[s].labels);
                Evaluator ev(cg.g);
                ev.bind("z", &eval_features[s]);
                detail::bind_critic(ev, critic);
                ev.run_forward();
                const double value = ev.value(cg.value).data[0];
                if (!std::isfinite(value)) {
                    throw NumericalAbort("held-out contrastive bound is not finite", epoch, s,
                                         last_finite, std::nullopt);
                }
                eval_sum += value;
            }
            epoch_values.push_back(eval_sum / static_cast<double>(eval_steps));
        }

        const std::size_t tail = std::min(cfg.tail_epochs, cfg.epochs);
        rep_values.push_back(detail::mean_of(epoch_values, cfg.epochs - tail, cfg.epochs));
    }

    MiEstimate out;
    out.replication_values = rep_values;
    out.estimate = detail::mean_of(rep_values, 0, rep_values.size());
    if (rep_values.size() > 1) {
        double ss = 0.0;
        for (double v : rep_values) ss += (v - out.estimate) * (v - out.estimate);
        out.stddev = std::sqrt(ss / static_cast<double>(rep_values.size() - 1));
    }
    out.label_entropy = h;
    out.batch_k = k;
    if (out.estimate < -kMiRangeSlack || out.estimate > h + kMiRangeSlack) {
        throw std::runtime_error("estimate_feature_mi: estimate " + std::to_string(out.estimate) +
                                 " outside [-" + std::to_string(kMiRangeSlack) + ", H(Y)+" +
                                 std::to_string(kMiRangeSlack) + "] with H(Y) = " +
                                 std::to_string(h));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer-level wrapper: taps Z_l, builds the label pool for the requested
// variable, and mirrors the target's remaining block widths in the critic.
// ---------------------------------------------------------------------------
inline MiEstimate estimate_layer_mi(const Network& net, const SplitSpec& split, std::size_t layer,
                                    LabelKind kind, const MiConfig& cfg) {
    cfg.validate();
    if (layer >= net.depth()) {
        throw std::invalid_argument("estimate_layer_mi: layer " + std::to_string(layer) +
                                    " out of range [0, " + std::to_string(net.depth()) + ")");
    }

    std::vector<std::size_t> rows;
    std::vector<int> labels;
    std::size_t num_labels = 0;
    std::vector<std::size_t> counts;

    if (kind == LabelKind::binary) {
        std::vector<std::size_t> retain = split.retain_indices;
        if (cfg.retain_fraction < 1.0) {
            retain = subsample(retain, cfg.retain_fraction, derive_seed(cfg.seed, "mi-retain"),
                               nullptr, false);
        }
        rows.reserve(retain.size() + split.forget_indices.size());
        for (std::size_t i : retain) {
            rows.push_back(i);
            labels.push_back(0);
        }
        for (std::size_t i : split.forget_indices) {
            rows.push_back(i);
            labels.push_back(1);
        }
        num_labels = 2;
        auto ones = static_cast<std::size_t>(
            std::llround(cfg.forget_fraction * static_cast<double>(cfg.batch_k)));
        ones = std::min(std::max<std::size_t>(ones, 1), cfg.batch_k - 1);
        counts = {cfg.batch_k - ones, ones};
    } else {
        num_labels = net.num_classes();
        std::vector<bool> seen(num_labels, false);
        rows = split.forget_indices;
        labels.reserve(rows.size());
        for (std::size_t i : rows) {
            labels.push_back(split.base.labels[i]);
            seen[static_cast<std::size_t>(split.base.labels[i])] = true;
        }
        std::size_t n_present = 0;
        for (bool s : seen) n_present += s ? 1 : 0;
        if (n_present < 2) {
            throw std::invalid_argument(
                "estimate_layer_mi: class labels are constant on the forget set; the "
                "multiclass variable needs a random-mode split");
        }
        const std::size_t per = (cfg.batch_k + n_present - 1) / n_present;
        counts.assign(num_labels, 0);
        for (std::size_t c = 0; c < num_labels; ++c) {
            if (seen[c]) counts[c] = per;
        }
    }

    const Tensor z = detail::layer_features(net, split.base, rows, layer);
    std::vector<std::size_t> critic_widths;
    for (std::size_t i = layer + 1; i < net.depth(); ++i) {
        critic_widths.push_back(net.blocks[i].out_width());
    }
    return estimate_feature_mi(z, labels, num_labels, critic_widths, std::move(counts), cfg,
                               layer);
}

// Default probe set: the last two blocks.
inline std::vector<std::size_t> default_mi_layers(const Network& net) {
    return {net.depth() - 2, net.depth() - 1};
}

inline MiCurve mi_curve(const Network& net, const SplitSpec& split,
                        const std::vector<std::size_t>& layers, LabelKind kind,
                        const MiConfig& cfg) {
    if (layers.empty()) throw std::invalid_argument("mi_curve: layer list must be nonempty");
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
        if (layers[i] >= layers[i + 1]) {
            throw std::invalid_argument("mi_curve: layers must be strictly increasing");
        }
    }
    MiCurve curve;
    curve.label_kind = kind;
    curve.layer_indices = layers;
    for (std::size_t l : layers) {
        const MiEstimate e = estimate_layer_mi(net, split, l, kind, cfg);
        curve.estimates.push_back(e.estimate);
        curve.stddevs.push_back(e.stddev);
        curve.label_entropy = e.label_entropy;
    }
    return curve;
}

// Restrict a curve to a subset of its layers.  Because the estimator seeds
// every replication by layer index, the result is bit-identical to computing
// the smaller curve directly.
inline MiCurve subset_curve(const MiCurve& curve, const std::vector<std::size_t>& layers) {
    MiCurve out;
    out.label_kind = curve.label_kind;
    out.label_entropy = curve.label_entropy;
    for (std::size_t l : layers) {
        bool found = false;
        for (std::size_t i = 0; i < curve.layer_indices.size(); ++i) {
            if (curve.layer_indices[i] == l) {
                out.layer_indices.push_back(l);
                out.estimates.push_back(curve.estimates[i]);
                out.stddevs.push_back(curve.stddevs[i]);
                found = true;
                break;
            }
        }
        if (!found) {
            throw std::invalid_argument("subset_curve: layer " + std::to_string(l) +
                                        " not present in the source curve");
        }
    }
    if (out.layer_indices.empty()) {
        throw std::invalid_argument("subset_curve: layer list must be nonempty");
    }
    return out;
}

// Display helper: estimates are lower bounds, so small negatives read as zero.
inline std::vector<double> clipped_estimates(const MiCurve& curve) {
    std::vector<double> out = curve.estimates;
    for (double& e : out) e = std::max(0.0, e);
    return out;
}

// ---------------------------------------------------------------------------
// Information difference and its normalized index
// ---------------------------------------------------------------------------

inline double information_difference(const MiCurve& a, const MiCurve& b) {
    if (a.label_kind != b.label_kind) {
        throw std::invalid_argument("information_difference: label kinds differ");
    }
    if (a.layer_indices != b.layer_indices) {
        throw std::invalid_argument("information_difference: layer sets differ");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < a.estimates.size(); ++i) {
        total += a.estimates[i] - b.estimates[i];
    }
    return total;
}

// Below this remaining-information mass (nats) the original model retains too
// little signal relative to the reference for the ratio to mean anything.
inline constexpr double kIdiDenominatorFloor = 1e-3;

struct IdiResult {
    double id_unlearned = 0.0;  // ID(unlearned, reference)
    double id_original = 0.0;   // ID(original, reference)
    double value = 0.0;         // ratio; 0 and flagged when degenerate
    bool degenerate = false;    // |id_original| at or below the floor
    bool over_unlearning = false;  // unlearned fell below the reference
};

inline IdiResult idi(const MiCurve& unlearned, const MiCurve& original, const MiCurve& reference) {
    IdiResult r;
    r.id_unlearned = information_difference(unlearned, reference);
    r.id_original = information_difference(original, reference);
    if (std::abs(r.id_original) <= kIdiDenominatorFloor) {
        r.degenerate = true;
        return r;
    }
    r.value = r.id_unlearned / r.id_original;
    r.over_unlearning = r.value < 0.0;
    return r;
}

// One row per layer; stable formatting so identical runs serialize to
// identical bytes.
inline void write_mi_curve_csv(std::ostream& os, const MiCurve& curve) {
    os << "layer,estimate_nats,stddev,label_kind,H_Y\n" << std::setprecision(17);
    for (std::size_t i = 0; i < curve.layer_indices.size(); ++i) {
        os << curve.layer_indices[i] << ',' << curve.estimates[i] << ',' << curve.stddevs[i]
           << ',' << label_kind_name(curve.label_kind) << ',' << curve.label_entropy << '\n';
    }
}

}  // namespace mulab
