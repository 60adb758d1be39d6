// Release gate: twelve numbered checks, one [PASS]/[FAIL] line each, exit
// status nonzero if any line fails.  Checks 4-8 share one fixed benchmark —
// ten Gaussian blob classes, 500 train / 100 test rows per class, a
// [64, 64, 32] tanh network, class 4 forgotten — evaluated over five seeds.
// Everything runs single-threaded; check 12 enforces the overall budget.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mulab/experiment.hpp"

using namespace mulab;
namespace fs = std::filesystem;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Gate {
    bool all_ok = true;

    void report(int number, bool ok, const std::string& what) {
        std::printf("[%s] %2d  %s\n", ok ? "PASS" : "FAIL", number, what.c_str());
        std::fflush(stdout);
        all_ok = all_ok && ok;
    }
};

std::string note(const char* pattern, ...) {
    char buf[768];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof buf, pattern, args);
    va_end(args);
    return std::string(buf);
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : t.data) x = scale * rng.normal();
    return t;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------
// Check 1: analytic gradients against central differences for every loss the
// laboratory trains with, plus a full two-block network end to end.
// ---------------------------------------------------------------------------

double worst_cross_entropy() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(seed, "gate-ce"));
        Graph g;
        auto z = g.param("z", {5, 7});
        std::vector<int> labels(5);
        for (int& y : labels) y = static_cast<int>(rng.below(7));
        g.set_objective(g.cross_entropy(z, labels));
        std::map<std::string, Tensor> point{{"z", random_tensor({5, 7}, rng, 1.5)}};
        worst = std::max(worst, grad_check(g, point, 1e-5));
    }
    return worst;
}

double worst_kl_div() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(seed, "gate-kl"));
        Graph g;
        auto t = g.input("t", {4, 6}, true);
        auto s = g.param("s", {4, 6});
        g.set_objective(g.kl_div(t, s));
        Tensor teacher = random_tensor({4, 6}, rng, 1.5);
        if (seed < 8) {  // teacher rows with one class masked out entirely
            for (std::size_t r = 0; r < 4; ++r) teacher.at(r, seed % 6) = kNegInf;
        }
        std::map<std::string, Tensor> point{{"t", std::move(teacher)},
                                            {"s", random_tensor({4, 6}, rng, 1.5)}};
        worst = std::max(worst, grad_check(g, point, 1e-5));
    }
    return worst;
}

double worst_supcon() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(seed, "gate-supcon"));
        Graph g;
        auto e = g.param("e", {6, 5});
        std::vector<int> labels(6);
        for (int& y : labels) y = static_cast<int>(rng.below(3));
        g.set_objective(g.supcon_loss(e, labels, 0.3));
        std::map<std::string, Tensor> point{{"e", random_tensor({6, 5}, rng)}};
        worst = std::max(worst, grad_check(g, point, 1e-5));
    }
    return worst;
}

double worst_infonce() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(seed, "gate-nce"));
        Graph g;
        auto u = g.param("u", {6, 4});
        auto v = g.param("v", {6, 4});
        g.set_objective(g.infonce(u, v));
        std::map<std::string, Tensor> point{{"u", random_tensor({6, 4}, rng)},
                                            {"v", random_tensor({6, 4}, rng)}};
        worst = std::max(worst, grad_check(g, point, 1e-5));

        Graph g2;
        auto u2 = g2.param("u", {7, 4});
        auto tab = g2.param("tab", {3, 4});
        std::vector<int> labels(7);
        for (int& y : labels) y = static_cast<int>(rng.below(3));
        g2.set_objective(g2.infonce_labels(u2, tab, labels));
        std::map<std::string, Tensor> point2{{"u", random_tensor({7, 4}, rng)},
                                             {"tab", random_tensor({3, 4}, rng)}};
        worst = std::max(worst, grad_check(g2, point2, 1e-5));
    }
    return worst;
}

double worst_full_network() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(seed, "gate-mlp"));
        Graph g;
        auto x = g.input("x", {8, 6});
        auto w1 = g.param("w1", {6, 16});
        auto b1 = g.param("b1", {16});
        auto w2 = g.param("w2", {16, 12});
        auto b2 = g.param("b2", {12});
        auto wh = g.param("wh", {12, 4});
        auto bh = g.param("bh", {4});
        auto z1 = g.tanh_act(g.add_bias(g.matmul(x, w1), b1));
        auto z2 = g.tanh_act(g.add_bias(g.matmul(z1, w2), b2));
        auto logits = g.add_bias(g.matmul(z2, wh), bh);
        std::vector<int> labels(8);
        for (int& y : labels) y = static_cast<int>(rng.below(4));
        g.set_objective(g.cross_entropy(logits, labels));
        std::map<std::string, Tensor> point{
            {"x", random_tensor({8, 6}, rng)},     {"w1", random_tensor({6, 16}, rng, 0.5)},
            {"b1", random_tensor({16}, rng, 0.1)}, {"w2", random_tensor({16, 12}, rng, 0.5)},
            {"b2", random_tensor({12}, rng, 0.1)}, {"wh", random_tensor({12, 4}, rng, 0.5)},
            {"bh", random_tensor({4}, rng, 0.1)}};
        worst = std::max(worst, grad_check(g, point, 1e-5));
    }
    return worst;
}

void check_gradients(Gate& gate) {
    const auto start = std::chrono::steady_clock::now();
    double worst = worst_cross_entropy();
    worst = std::max(worst, worst_kl_div());
    worst = std::max(worst, worst_supcon());
    worst = std::max(worst, worst_infonce());
    worst = std::max(worst, worst_full_network());
    const double secs = seconds_since(start);
    gate.report(1, worst <= 1e-4 && secs < 30.0,
                note("gradient suite: worst relative error %.2e across 5 losses x 10 points "
                     "in %.1f s (need <= 1e-4 and < 30 s)",
                     worst, secs));
}

// ---------------------------------------------------------------------------
// Check 2: the estimator's calibration on pools with known information
// content, and the exact ceiling of the contrastive bound.
// ---------------------------------------------------------------------------

void check_estimator_calibration(Gate& gate) {
    // Two clusters split by a wide margin along the first coordinate; the
    // second coordinate is pure noise.
    const std::size_t n = 240;
    Tensor features({n, 2});
    std::vector<int> labels(n);
    Rng pool_rng(3);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % 2);
        features.at(i, 0) = (labels[i] == 1 ? 1.0 : -1.0) + pool_rng.uniform(-0.05, 0.05);
        features.at(i, 1) = pool_rng.uniform(-1.0, 1.0);
    }

    MiConfig cfg;
    cfg.embedding_dim = 8;
    cfg.replications = 3;
    cfg.batch_k = 32;
    cfg.epochs = 30;
    cfg.tail_epochs = 5;
    cfg.critic_lr = 5e-3;
    cfg.table_lr = 2e-2;
    cfg.seed = 5;

    const MiEstimate det = estimate_feature_mi(features, labels, 2, {8}, {16, 16}, cfg, 0);

    std::vector<int> shuffled(n);
    Rng perm_rng(9);
    const std::vector<std::size_t> perm = perm_rng.permutation(n);
    for (std::size_t i = 0; i < n; ++i) shuffled[i] = labels[perm[i]];
    const MiEstimate rand = estimate_feature_mi(features, shuffled, 2, {8}, {16, 16}, cfg, 0);

    const double ln2 = std::log(2.0);
    const bool det_ok = det.estimate >= 0.9 * ln2 && det.estimate <= det.label_entropy + 0.05;
    const bool rand_ok = std::abs(rand.estimate) <= 0.05;

    // The contrastive value can never exceed log K, batch by batch, exactly.
    bool bound_ok = true;
    for (std::uint64_t trial = 0; trial < 200; ++trial) {
        Rng rng(derive_seed(trial, "gate-bound"));
        const std::size_t k = 2 + rng.below(39);
        const std::size_t d = 1 + rng.below(8);
        const double scale = rng.uniform(0.1, 3.0);
        const Tensor u = random_tensor({k, d}, rng, scale);
        const Tensor v = random_tensor({k, d}, rng, scale);
        if (infonce_value(u, v) > std::log(static_cast<double>(k))) bound_ok = false;
    }

    gate.report(2, det_ok && rand_ok && bound_ok,
                note("estimator calibration: separated pool %.3f nats (need >= %.3f, <= H+0.05), "
                     "permuted labels %+.3f (|.| <= 0.05), contrastive value <= log K on 200/200 "
                     "random batches%s",
                     det.estimate, 0.9 * ln2, rand.estimate, bound_ok ? "" : " VIOLATED"));
}

// ---------------------------------------------------------------------------
// Check 3: arithmetic identities of the index, no training involved.
// ---------------------------------------------------------------------------

MiCurve hand_curve(std::vector<double> estimates) {
    MiCurve c;
    c.layer_indices = {0, 1, 2};
    c.estimates = std::move(estimates);
    c.stddevs.assign(c.estimates.size(), 0.0);
    c.label_kind = LabelKind::binary;
    c.label_entropy = std::log(2.0);
    return c;
}

void check_index_identities(Gate& gate) {
    const MiCurve curve_o = hand_curve({0.61, 0.55, 0.68});
    const MiCurve curve_r = hand_curve({0.31, 0.12, 0.05});

    const IdiResult top = idi(curve_o, curve_o, curve_r);
    const IdiResult bottom = idi(curve_r, curve_o, curve_r);
    const bool ratio_ok = std::abs(top.value - 1.0) <= 1e-12 && !top.degenerate &&
                          std::abs(bottom.value) <= 1e-12 && !bottom.degenerate;

    bool self_ok = information_difference(curve_o, curve_o) == 0.0 &&
                   information_difference(curve_r, curve_r) == 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(derive_seed(seed, "gate-curve"));
        const MiCurve c = hand_curve(
            {rng.uniform(-0.05, 0.69), rng.uniform(-0.05, 0.69), rng.uniform(-0.05, 0.69)});
        if (information_difference(c, c) != 0.0) self_ok = false;
    }

    gate.report(3, ratio_ok && self_ok,
                note("index identities: index(original)-1 = %.1e, index(reference) = %.1e "
                     "(both within 1e-12), self-distance exactly zero on 12 curves",
                     std::abs(top.value - 1.0), std::abs(bottom.value)));
}

// ---------------------------------------------------------------------------
// Benchmark runner shared by checks 4-8 (and reused by 9 and 10).
// ---------------------------------------------------------------------------

struct DeskCell {
    double ua = 0.0, ra = 0.0, mia = 0.0, rte = 0.0;
    double idi_probe = 0.0;  // probe layers = last two blocks
    double idi_full = 0.0;   // every block
};

struct DeskResults {
    std::vector<std::string> methods;
    std::map<std::string, std::vector<double>> ua, ra, mia, rte, idi_probe, idi_full;
    std::vector<double> probe_original, probe_retrain;
    bool hd_encoder_intact = true;
    bool hd_ua_perfect = true;
    bool curves_in_range = true;
    double hd_idi_min = 0.0, hd_idi_max = 0.0;

    // Seed-0 artifacts for the later checks.
    std::map<std::string, Network> nets0;
    SynthPair pair;
    SplitSpec split;
};

MiConfig desk_mi_config(std::uint64_t seed) {
    MiConfig mi;
    mi.replications = 3;
    mi.batch_k = 250;
    mi.epochs = 30;
    mi.tail_epochs = 5;
    mi.critic_lr = 5e-3;
    mi.table_lr = 2e-2;
    mi.retain_fraction = 0.15;
    mi.seed = seed;
    return mi;
}

ColaOptions desk_cola_options() {
    ColaOptions o;
    o.collapse_epochs = 50;
    o.collapse_lr = 0.25;
    o.align_epochs = 30;
    o.align_lr = 0.02;
    o.batch_size = 128;
    o.temperature = 0.2;
    o.l2 = 0.0;
    return o;
}

RetrainOptions desk_retrain_options() {
    RetrainOptions o;
    o.epochs = 300;
    o.learning_rate = 0.05;
    o.batch_size = 64;
    o.l2 = 0.0;
    return o;
}

DeskResults run_desk_benchmark() {
    DeskResults out;
    out.methods = {"original", "retrain", "ft", "rl", "neggrad", "hd", "cola"};
    out.pair = synthesize(SynthKind::blobs, 10, 500, 16, 1.0, 7);
    out.split = split_classwise(out.pair.train, out.pair.test, {4});
    const SplitSpec& split = out.split;

    bool first_seed = true;
    for (std::uint64_t seed : {0, 1, 2, 3, 4}) {
        TrainConfig pre;
        pre.epochs = 300;
        pre.batch_size = 64;
        pre.learning_rate = 0.05;
        pre.momentum = 0.9;
        pre.l2 = 0.0;
        pre.shuffle_seed = derive_seed(seed, "pretrain");
        Network original =
            train_supervised(build_mlp(16, {64, 64, 32}, 10, derive_seed(seed, "init")),
                             split.base, pre)
                .network;

        std::map<std::string, Network> nets;
        std::map<std::string, double> rtes;
        nets["original"] = original;
        rtes["original"] = 0.0;
        {
            UnlearnRequest req{original, split, derive_seed(seed, "retrain")};
            UnlearnResult r = retrain_reference(req, desk_retrain_options());
            nets["retrain"] = std::move(r.unlearned);
            rtes["retrain"] = r.rte_seconds;
        }
        {
            FinetuneOptions o;
            o.epochs = 60;
            o.learning_rate = 0.01;
            o.l2 = 0.0;
            UnlearnRequest req{original, split, derive_seed(seed, "ft")};
            UnlearnResult r = unlearn_finetune(req, o);
            nets["ft"] = std::move(r.unlearned);
            rtes["ft"] = r.rte_seconds;
        }
        {
            RandomLabelOptions o;
            o.epochs = 10;
            o.learning_rate = 0.02;
            o.l2 = 0.0;
            o.relabel_seed = derive_seed(seed, "relabel");
            UnlearnRequest req{original, split, derive_seed(seed, "rl")};
            UnlearnResult r = unlearn_random_label(req, o);
            nets["rl"] = std::move(r.unlearned);
            rtes["rl"] = r.rte_seconds;
        }
        {
            NegGradOptions o;
            o.epochs = 12;
            o.learning_rate = 0.005;
            o.ascent_weight = 0.25;
            o.l2 = 0.0;
            UnlearnRequest req{original, split, derive_seed(seed, "neggrad")};
            UnlearnResult r = unlearn_neggrad(req, o);
            nets["neggrad"] = std::move(r.unlearned);
            rtes["neggrad"] = r.rte_seconds;
        }
        {
            HdOptions o;
            o.epochs = 10;
            o.learning_rate = 0.05;
            UnlearnRequest req{original, split, derive_seed(seed, "hd")};
            UnlearnResult r = unlearn_hd(req, o);
            nets["hd"] = std::move(r.unlearned);
            rtes["hd"] = r.rte_seconds;
        }
        {
            UnlearnRequest req{original, split, derive_seed(seed, "cola")};
            UnlearnResult r = unlearn_cola(req, ColaVariant::plain, desk_cola_options());
            nets["cola"] = std::move(r.unlearned);
            rtes["cola"] = r.rte_seconds;
        }

        const MiConfig mi = desk_mi_config(derive_seed(seed, "mi"));
        const std::vector<std::size_t> layers = {0, 1, 2};
        std::map<std::string, MiCurve> curves;
        for (const std::string& m : out.methods) {
            curves[m] = mi_curve(nets[m], split, layers, LabelKind::binary, mi);
            for (std::size_t i = 0; i < curves[m].estimates.size(); ++i) {
                if (curves[m].estimates[i] > curves[m].label_entropy + kMiRangeSlack) {
                    out.curves_in_range = false;
                }
            }
        }
        const MiCurve probe_o = subset_curve(curves["original"], {1, 2});
        const MiCurve probe_r = subset_curve(curves["retrain"], {1, 2});

        for (const std::string& m : out.methods) {
            const AccuracyMetrics acc = accuracy_metrics(nets[m], split);
            const double attack =
                mia_score(nets[m], split, MiaFeature::entropy, derive_seed(seed, "mia"))
                    .percentage;
            const IdiResult probe = idi(subset_curve(curves[m], {1, 2}), probe_o, probe_r);
            const IdiResult full = idi(curves[m], curves["original"], curves["retrain"]);
            out.ua[m].push_back(100.0 * acc.ua);
            out.ra[m].push_back(100.0 * acc.ra);
            out.mia[m].push_back(attack);
            out.rte[m].push_back(rtes[m]);
            out.idi_probe[m].push_back(probe.value);
            out.idi_full[m].push_back(full.value);
        }

        out.hd_encoder_intact =
            out.hd_encoder_intact && encoder_digest(nets["hd"]) == encoder_digest(original);
        out.hd_ua_perfect = out.hd_ua_perfect && out.ua["hd"].back() == 100.0;

        TrainConfig probe_cfg;
        probe_cfg.epochs = 10;
        probe_cfg.learning_rate = 0.05;
        probe_cfg.batch_size = 32;
        out.probe_original.push_back(
            100.0 *
            recovery_probe(nets["original"], split, 0.02, derive_seed(seed, "probe"), probe_cfg));
        out.probe_retrain.push_back(
            100.0 *
            recovery_probe(nets["retrain"], split, 0.02, derive_seed(seed, "probe"), probe_cfg));

        if (first_seed) {
            out.nets0 = nets;
            first_seed = false;
        }
        std::fprintf(stderr, "  [benchmark] seed %llu done\n",
                     static_cast<unsigned long long>(seed));
    }

    const auto& hd = out.idi_probe["hd"];
    out.hd_idi_min = *std::min_element(hd.begin(), hd.end());
    out.hd_idi_max = *std::max_element(hd.begin(), hd.end());
    return out;
}

void check_head_distillation(Gate& gate, const DeskResults& r) {
    const double ratio = mean(r.rte.at("hd")) / mean(r.rte.at("ft"));
    const bool idi_ok = r.hd_idi_min >= 0.85 && r.hd_idi_max <= 1.15;
    gate.report(4, r.hd_ua_perfect && r.hd_encoder_intact && ratio < 0.05 && idi_ok,
                note("head distillation: forget accuracy wiped on 5/5 seeds, encoder bytes "
                     "unchanged (%s), relearn-time ratio vs finetune %.3f (< 0.05), index in "
                     "[%.3f, %.3f] (need [0.85, 1.15])",
                     r.hd_encoder_intact ? "yes" : "NO", ratio, r.hd_idi_min, r.hd_idi_max));
}

void check_attack_blindness(Gate& gate, const DeskResults& r) {
    const double reference = mean(r.mia.at("retrain"));
    const double gap_hd = std::abs(mean(r.mia.at("hd")) - reference);
    int beaten = 0;
    for (const char* m : {"ft", "rl", "neggrad"}) {
        if (std::abs(mean(r.mia.at(m)) - reference) >= gap_hd) ++beaten;
    }
    gate.report(5, beaten >= 2,
                note("attack blindness: head distillation's attack gap %.1f is within the gap "
                     "of %d/3 genuine methods (ft %.1f, rl %.1f, neggrad %.1f; need >= 2)",
                     gap_hd, beaten, std::abs(mean(r.mia.at("ft")) - reference),
                     std::abs(mean(r.mia.at("rl")) - reference),
                     std::abs(mean(r.mia.at("neggrad")) - reference)));
}

void check_probe_recovery(Gate& gate, const DeskResults& r) {
    const double po = mean(r.probe_original);
    const double pr = mean(r.probe_retrain);
    gate.report(6, po - pr >= 30.0,
                note("probe recovery: fresh head on 2%% of the data recovers %.1f%% forget-class "
                     "accuracy from the original encoder vs %.1f%% from retrain (gap %.1f, "
                     "need >= 30 points)",
                     po, pr, po - pr));
}

void check_collapse_align(Gate& gate, const DeskResults& r) {
    bool ok = true;
    double worst_ra = 100.0, worst_abs_idi = 0.0, worst_margin = 1e9;
    for (std::size_t s = 0; s < 5; ++s) {
        const double ua = r.ua.at("cola")[s];
        const double ra = r.ra.at("cola")[s];
        const double index = r.idi_probe.at("cola")[s];
        const double rl_index = r.idi_probe.at("rl")[s];
        ok = ok && ua == 100.0 && ra >= 99.0 && std::abs(index) <= 0.25 && index < rl_index;
        worst_ra = std::min(worst_ra, ra);
        worst_abs_idi = std::max(worst_abs_idi, std::abs(index));
        worst_margin = std::min(worst_margin, rl_index - index);
    }
    gate.report(7, ok,
                note("collapse-align: every seed wipes the forget class, worst retain accuracy "
                     "%.1f%% (>= 99), worst |index| %.3f (<= 0.25), always below relabeling by "
                     ">= %.3f",
                     worst_ra, worst_abs_idi, worst_margin));
}

void check_truncation_stability(Gate& gate, const DeskResults& r) {
    bool ok = r.curves_in_range;
    double worst = 0.0;
    std::string worst_method = "-";
    for (const std::string& m : r.methods) {
        const double diff = std::abs(mean(r.idi_probe.at(m)) - mean(r.idi_full.at(m)));
        if (diff > worst) {
            worst = diff;
            worst_method = m;
        }
        if (diff > 0.1) ok = false;
    }
    gate.report(8, ok,
                note("truncation stability: index from the last two blocks vs all blocks differs "
                     "by at most %.3f (%s; need <= 0.1 for all 7 models)%s",
                     worst, worst_method.c_str(),
                     r.curves_in_range ? "" : "; an estimate exceeded its entropy ceiling"));
}

// ---------------------------------------------------------------------------
// Check 9: closed-form properties of the scalar metrics.
// ---------------------------------------------------------------------------

void check_metric_sanity(Gate& gate, const DeskResults& r) {
    const SplitSpec& split = r.split;
    const std::vector<std::size_t> rows = all_indices(split.base);
    const Network& reference = r.nets0.at("retrain");

    const double ln2 = std::log(2.0);
    bool range_ok = true;
    for (const std::string& m : r.methods) {
        const double d = jsd_to_reference(r.nets0.at(m), reference, split.base, rows);
        if (!(d >= 0.0 && d <= ln2 + 1e-12)) range_ok = false;
    }
    const bool self_ok =
        jsd_to_reference(r.nets0.at("original"), r.nets0.at("original"), split.base, rows) == 0.0 &&
        jsd_to_reference(reference, reference, split.base, rows) == 0.0;

    AttackPredictor always_member;
    always_member.feature = MiaFeature::entropy;
    always_member.threshold = -std::numeric_limits<double>::infinity();
    always_member.train_above = true;
    AttackPredictor never_member = always_member;
    never_member.threshold = std::numeric_limits<double>::infinity();
    const bool boundary_ok =
        mia_from_predictor(r.nets0.at("original"), split, always_member) == 100.0 &&
        mia_from_predictor(r.nets0.at("original"), split, never_member) == 0.0;

    const Network untrained = build_mlp(16, {64, 64, 32}, 10, 999);
    const double balanced =
        100.0 * mia_score(untrained, split, MiaFeature::entropy, 12345).predictor.balanced_accuracy;
    const bool chance_ok = balanced >= 45.0 && balanced <= 55.0;

    gate.report(9, range_ok && self_ok && boundary_ok && chance_ok,
                note("metric sanity: divergence within [0, ln 2] for 7 models and exactly 0 "
                     "against itself, constant attackers score exactly 100/0, untrained-model "
                     "attacker balanced accuracy %.1f%% (need 50 +/- 5)",
                     balanced));
}

// ---------------------------------------------------------------------------
// Check 10: the random-forgetting variant, end to end with the pseudo-label
// collapse cycle.
// ---------------------------------------------------------------------------

void check_random_forgetting(Gate& gate, const DeskResults& r) {
    const SplitSpec random_split = split_random(r.pair.train, r.pair.test, 50, 21);
    const Network& original = r.nets0.at("original");
    const std::size_t classes = static_cast<std::size_t>(r.pair.train.num_classes);

    // Every forget row's pseudo-label must differ from its true label; the
    // collapse phase aborts if this ever breaks, but check it exhaustively.
    const Tensor logits =
        forward_logits(original, gather_rows(r.pair.train.features, random_split.forget_indices));
    std::size_t checked = 0;
    bool pseudo_ok = true;
    for (std::size_t i = 0; i < random_split.forget_indices.size(); ++i) {
        const int truth = r.pair.train.labels[random_split.forget_indices[i]];
        const int pseudo =
            second_best_label(logits.data.data() + i * classes, classes, truth);
        if (pseudo == truth || pseudo < 0 || pseudo >= static_cast<int>(classes)) {
            pseudo_ok = false;
        }
        ++checked;
    }

    UnlearnRequest retrain_req{original, random_split, derive_seed(0, "retrain-random")};
    const Network reference = retrain_reference(retrain_req, desk_retrain_options()).unlearned;

    UnlearnRequest req{original, random_split, derive_seed(0, "cola-plus")};
    const UnlearnResult plus = unlearn_cola(req, ColaVariant::plus, desk_cola_options());
    const AccuracyMetrics acc = accuracy_metrics(plus.unlearned, random_split);

    // Class-label information curves on the forget rows only.
    const MiConfig mi = desk_mi_config(derive_seed(0, "mi-random"));
    const std::vector<std::size_t> layers = {1, 2};
    const MiCurve co = mi_curve(original, random_split, layers, LabelKind::multiclass, mi);
    const MiCurve cr = mi_curve(reference, random_split, layers, LabelKind::multiclass, mi);
    const MiCurve cu = mi_curve(plus.unlearned, random_split, layers, LabelKind::multiclass, mi);
    const IdiResult index = idi(cu, co, cr);

    const bool ran = std::isfinite(acc.ua) && std::isfinite(acc.ra) &&
                     (index.degenerate || std::isfinite(index.value));
    gate.report(10, pseudo_ok && ran,
                note("random forgetting: pseudo-label != true label on %zu/%zu forget rows, "
                     "collapse cycle + class-label curves on the forget rows completed "
                     "(ua %.1f%%, ra %.1f%%, index %s%.3f)",
                     checked, random_split.forget_indices.size(), 100.0 * acc.ua, 100.0 * acc.ra,
                     index.degenerate ? "degenerate at " : "", index.value));
}

// ---------------------------------------------------------------------------
// Check 11: the pipeline is a pure function of its configuration, and
// checkpoints survive a disk round trip bit for bit.
// ---------------------------------------------------------------------------

const char* kSmallConfig =
    "run_id = \"gate\"\n"
    "seeds = [0, 1]\n"
    "[dataset]\n"
    "classes = 3\n"
    "per_class = 90\n"
    "dims = 6\n"
    "noise = 0.4\n"
    "seed = 11\n"
    "[split]\n"
    "mode = \"classwise\"\n"
    "forget_classes = [1]\n"
    "[model]\n"
    "widths = [12, 8]\n"
    "[pretrain]\n"
    "epochs = 6\n"
    "batch_size = 32\n"
    "learning_rate = 0.1\n"
    "[retrain]\n"
    "epochs = 6\n"
    "batch_size = 32\n"
    "learning_rate = 0.1\n"
    "[methods.ft]\n"
    "epochs = 2\n"
    "[methods.hd]\n"
    "epochs = 3\n"
    "learning_rate = 0.05\n"
    "[mi]\n"
    "embedding_dim = 8\n"
    "replications = 2\n"
    "batch_k = 32\n"
    "epochs = 8\n"
    "tail_epochs = 3\n"
    "critic_lr = 5e-3\n"
    "table_lr = 2e-2\n";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Strip one column (the wall-clock one) from a small CSV.
std::string drop_csv_column(const std::string& text, std::size_t column) {
    std::istringstream in(text);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream fields(line);
        std::string field;
        std::size_t i = 0;
        bool first = true;
        while (std::getline(fields, field, ',')) {
            if (i++ == column) continue;
            out << (first ? "" : ",") << field;
            first = false;
        }
        out << '\n';
    }
    return out.str();
}

std::string run_pipeline_into(const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const nlohmann::json j = parse_config_text(kSmallConfig);
    ExperimentConfig cfg = experiment_from_json(j);
    cfg.out_dir = dir.string();
    std::ostringstream sink;
    run_experiment(cfg, config_digest(j), Stage::all, sink);
    return drop_csv_column(slurp(dir / "report.csv"), 7);
}

void check_determinism(Gate& gate, const DeskResults& r) {
    const fs::path root = fs::temp_directory_path() / "mulab-acceptance";
    const fs::path dir_a = root / "a";
    const fs::path dir_b = root / "b";
    const std::string report_a = run_pipeline_into(dir_a);
    const std::string report_b = run_pipeline_into(dir_b);
    const bool reports_equal = !report_a.empty() && report_a == report_b;

    bool curves_equal = true;
    std::size_t curve_files = 0;
    for (const auto& entry : fs::directory_iterator(dir_a / "mi_curves")) {
        ++curve_files;
        if (slurp(entry.path()) != slurp(dir_b / "mi_curves" / entry.path().filename())) {
            curves_equal = false;
        }
    }

    const Network& net = r.nets0.at("original");
    const Network loaded = checkpoint_roundtrip(net, (root / "roundtrip.ckpt").string());
    const bool roundtrip_ok = parameter_digest(loaded) == parameter_digest(net) &&
                              loaded.head_depth == net.head_depth;

    gate.report(11, reports_equal && curves_equal && curve_files > 0 && roundtrip_ok,
                note("determinism: two fresh pipeline runs agree byte-for-byte on the report "
                     "(minus wall-clock) and on %zu curve files; checkpoint round-trip preserves "
                     "every parameter bit (%s)",
                     curve_files, roundtrip_ok ? "yes" : "NO"));
}

}  // namespace

int main() {
    const auto start = std::chrono::steady_clock::now();
    Gate gate;

    check_gradients(gate);
    check_estimator_calibration(gate);
    check_index_identities(gate);

    std::fprintf(stderr, "  [benchmark] training 7 models x 5 seeds, ~3 minutes...\n");
    const DeskResults desk = run_desk_benchmark();
    check_head_distillation(gate, desk);
    check_attack_blindness(gate, desk);
    check_probe_recovery(gate, desk);
    check_collapse_align(gate, desk);
    check_truncation_stability(gate, desk);
    check_metric_sanity(gate, desk);
    check_random_forgetting(gate, desk);
    check_determinism(gate, desk);

    const double total = seconds_since(start);
    gate.report(12, total <= 900.0,
                note("budget: full gate finished in %.0f s single-threaded (limit 900 s)", total));

    std::printf("%s\n", gate.all_ok ? "acceptance: all 12 checks passed"
                                    : "acceptance: FAILURES above");
    return gate.all_ok ? 0 : 1;
}
