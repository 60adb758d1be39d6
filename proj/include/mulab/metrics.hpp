#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mulab/network.hpp"
#include "mulab/split.hpp"
#include "mulab/train.hpp"

namespace mulab {

// ---------------------------------------------------------------------------
// UA / RA / TA
// ---------------------------------------------------------------------------

struct AccuracyMetrics {
    double ua = 0.0;  // 1 - accuracy on the forget set
    double ra = 0.0;  // accuracy on the retain set
    double ta = 0.0;  // accuracy on the held-out test set
};

inline AccuracyMetrics accuracy_metrics(const Network& model, const SplitSpec& split) {
    AccuracyMetrics m;
    m.ua = 1.0 - evaluate_accuracy(model, split.base, split.forget_indices);
    m.ra = evaluate_accuracy(model, split.base, split.retain_indices);
    m.ta = evaluate_accuracy(model, split.test);
    return m;
}

// ---------------------------------------------------------------------------
// Membership inference
// ---------------------------------------------------------------------------

enum class MiaFeature { confidence, entropy };

inline MiaFeature mia_feature_from_string(const std::string& s) {
    if (s == "confidence") return MiaFeature::confidence;
    if (s == "entropy") return MiaFeature::entropy;
    throw std::invalid_argument("mia feature must be 'confidence' or 'entropy', got '" + s + "'");
}

// Single scalar-feature threshold attacker.  Samples exactly at the threshold
// classify as non-members, which can only lower the reported MIA.
struct AttackPredictor {
    MiaFeature feature = MiaFeature::entropy;
    double threshold = 0.0;
    bool train_above = true;  // orientation: members lie above / below the threshold
    double balanced_accuracy = 0.5;  // on its balanced training sample
    bool degenerate = false;         // all training features identical
    std::size_t members = 0, non_members = 0;
    std::uint64_t seed = 0;

    bool predicts_train(double f) const { return train_above ? f > threshold : f < threshold; }
};

// Per-sample attack feature: the true-class probability or the prediction
// entropy of the model's softmax output.
inline std::vector<double> attack_features(const Network& model, const Dataset& data,
                                           const std::vector<std::size_t>& rows,
                                           MiaFeature kind) {
    std::vector<double> out;
    out.reserve(rows.size());
    const std::size_t chunk = 512;
    std::vector<double> probs(model.num_classes());
    for (std::size_t start = 0; start < rows.size(); start += chunk) {
        const std::size_t stop = std::min(rows.size(), start + chunk);
        std::vector<std::size_t> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                      rows.begin() + static_cast<std::ptrdiff_t>(stop));
        const Tensor logits = forward_logits(model, gather_rows(data.features, part));
        const std::size_t c = logits.shape[1];
        for (std::size_t r = 0; r < part.size(); ++r) {
            softmax_row(logits.data.data() + r * c, probs.data(), c);
            if (kind == MiaFeature::confidence) {
                out.push_back(probs[static_cast<std::size_t>(data.labels[part[r]])]);
            } else {
                double h = 0.0;
                for (double p : probs) {
                    if (p > 0.0) h -= p * std::log(p);
                }
                out.push_back(h);
            }
        }
    }
    return out;
}

// Pick the threshold and orientation maximizing balanced accuracy over the
// member / non-member training features.
inline AttackPredictor fit_attack_predictor(const std::vector<double>& member_features,
                                            const std::vector<double>& non_member_features) {
    if (member_features.empty() || non_member_features.empty()) {
        throw std::invalid_argument("fit_attack_predictor: empty feature lists");
    }
    AttackPredictor p;
    p.members = member_features.size();
    p.non_members = non_member_features.size();

    std::vector<double> candidates = member_features;
    candidates.insert(candidates.end(), non_member_features.begin(), non_member_features.end());
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    if (candidates.size() == 1) {
        // every feature identical: no signal, fall back to "everything is a
        // non-member" and flag the degeneracy
        p.degenerate = true;
        p.threshold = candidates[0];
        p.train_above = true;
        p.balanced_accuracy = 0.5;
        return p;
    }
    // thresholds sit at the observed values plus one sentinel below the range;
    // the strict predicate makes each value's own samples land on the
    // non-member side of its threshold
    candidates.insert(candidates.begin(), candidates.front() - 1.0);

    double best = -1.0;
    for (bool above : {true, false}) {
        for (double thr : candidates) {
            std::size_t tp = 0, tn = 0;
            for (double f : member_features) {
                if (above ? f > thr : f < thr) ++tp;
            }
            for (double f : non_member_features) {
                if (!(above ? f > thr : f < thr)) ++tn;
            }
            const double bal = 0.5 * (static_cast<double>(tp) / static_cast<double>(p.members) +
                                      static_cast<double>(tn) / static_cast<double>(p.non_members));
            if (bal > best) {
                best = bal;
                p.threshold = thr;
                p.train_above = above;
            }
        }
    }
    p.balanced_accuracy = best;
    return p;
}

struct MiaResult {
    double percentage = 0.0;  // 1 - TN/|forget|, scaled to percent
    AttackPredictor predictor;
};

// Scoring half of the metric, usable with any predictor (including the two
// constant boundary cases).
inline double mia_from_predictor(const Network& model, const SplitSpec& split,
                                 const AttackPredictor& predictor) {
    const auto forget_f =
        attack_features(model, split.base, split.forget_indices, predictor.feature);
    std::size_t tn = 0;
    for (double f : forget_f) {
        if (!predictor.predicts_train(f)) ++tn;
    }
    const double frac = static_cast<double>(tn) / static_cast<double>(forget_f.size());
    return 100.0 * (1.0 - frac);
}

// Fraction of forget samples the attacker still flags as members.  The
// attacker trains on balanced retain-vs-test samples; the forget set is
// never part of its training data.
inline MiaResult mia_score(const Network& model, const SplitSpec& split, MiaFeature variant,
                           std::uint64_t seed) {
    split.validate();
    const std::size_t test_n = split.test.size();
    if (test_n < 50) {
        throw std::invalid_argument("mia_score: needs at least 50 test samples, got " +
                                    std::to_string(test_n));
    }
    const std::size_t n = std::min(split.retain_indices.size(), test_n);

    // balanced member / non-member sample, seeded and order-independent
    Rng rng(derive_seed(seed, "mia"));
    std::vector<std::size_t> member_rows = split.retain_indices;
    if (member_rows.size() > n) {
        const auto pick = rng.sample_without_replacement(member_rows.size(), n);
        std::vector<std::size_t> chosen(n);
        for (std::size_t i = 0; i < n; ++i) chosen[i] = member_rows[pick[i]];
        member_rows = std::move(chosen);
    }
    std::vector<std::size_t> non_member_rows = all_indices(split.test);
    if (non_member_rows.size() > n) {
        const auto pick = rng.sample_without_replacement(non_member_rows.size(), n);
        std::vector<std::size_t> chosen(n);
        for (std::size_t i = 0; i < n; ++i) chosen[i] = non_member_rows[pick[i]];
        non_member_rows = std::move(chosen);
    }

    const auto member_f = attack_features(model, split.base, member_rows, variant);
    const auto non_member_f = attack_features(model, split.test, non_member_rows, variant);
    AttackPredictor predictor = fit_attack_predictor(member_f, non_member_f);
    predictor.feature = variant;
    predictor.seed = seed;

    MiaResult res;
    res.predictor = predictor;
    res.percentage = mia_from_predictor(model, split, predictor);
    return res;
}

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence to the reference model
// ---------------------------------------------------------------------------

// JSD of two explicit probability rows; natural log, so the range is
// [0, ln 2] with the maximum at disjoint support.
inline double jsd_rows(const double* p, const double* q, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / m);
    }
    return acc;
}

inline double jsd_to_reference(const Network& model_u, const Network& model_r,
                               const Dataset& data, const std::vector<std::size_t>& rows) {
    if (model_u.num_classes() != model_r.num_classes()) {
        throw std::invalid_argument("jsd_to_reference: class counts differ");
    }
    if (rows.empty()) throw std::invalid_argument("jsd_to_reference: empty data view");
    const std::size_t c = model_u.num_classes();
    std::vector<double> pu(c), pr(c);
    double total = 0.0;
    const std::size_t chunk = 512;
    for (std::size_t start = 0; start < rows.size(); start += chunk) {
        const std::size_t stop = std::min(rows.size(), start + chunk);
        std::vector<std::size_t> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                      rows.begin() + static_cast<std::ptrdiff_t>(stop));
        const Tensor batch = gather_rows(data.features, part);
        const Tensor lu = forward_logits(model_u, batch);
        const Tensor lr = forward_logits(model_r, batch);
        for (std::size_t r = 0; r < part.size(); ++r) {
            softmax_row(lu.data.data() + r * c, pu.data(), c);
            softmax_row(lr.data.data() + r * c, pr.data(), c);
            total += jsd_rows(pu.data(), pr.data(), c);
        }
    }
    return total / static_cast<double>(rows.size());
}

// ---------------------------------------------------------------------------
// Recovery probe: how much forget-class skill a fresh head can recover from
// a frozen encoder using a small data subset
// ---------------------------------------------------------------------------

inline double recovery_probe(const Network& model, const SplitSpec& split, double fraction,
                             std::uint64_t seed, TrainConfig probe_config) {
    split.validate();
    if (split.mode != ForgetMode::classwise) {
        throw std::invalid_argument("recovery_probe: defined for class-wise splits only");
    }
    // random fresh head; the subset is drawn without class balancing, so
    // sparse classes can genuinely go missing
    const auto subset = subsample(all_indices(split.base), fraction, derive_seed(seed, "probe-sub"),
                                  nullptr, /*stratified=*/false);
    bool has_forget_class = false;
    for (std::size_t row : subset) {
        if (std::find(split.forget_classes.begin(), split.forget_classes.end(),
                      split.base.labels[row]) != split.forget_classes.end()) {
            has_forget_class = true;
            break;
        }
    }
    if (!has_forget_class) {
        throw std::runtime_error("recovery_probe: subset contains no forget-class samples");
    }

    Network probe = reinit_layers(model, model.head_depth, derive_seed(seed, "probe-head"));
    probe_config.scope = TrainableScope::head_only;
    probe_config.shuffle_seed = derive_seed(seed, "probe-order");
    RunRecord rec = train_supervised(probe, split.base, subset, nullptr, probe_config);
    if (encoder_digest(rec.network) != encoder_digest(model)) {
        throw std::logic_error("recovery_probe: encoder changed during head training");
    }

    std::vector<std::size_t> forget_test;
    for (std::size_t i = 0; i < split.test.size(); ++i) {
        if (std::find(split.forget_classes.begin(), split.forget_classes.end(),
                      split.test.labels[i]) != split.forget_classes.end()) {
            forget_test.push_back(i);
        }
    }
    if (forget_test.empty()) {
        throw std::runtime_error("recovery_probe: test set has no forget-class samples");
    }
    return evaluate_accuracy(rec.network, split.test, forget_test);
}

}  // namespace mulab
