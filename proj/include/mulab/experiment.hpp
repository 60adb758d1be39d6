#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "mulab/checkpoint.hpp"
#include "mulab/config.hpp"
#include "mulab/metrics.hpp"
#include "mulab/mi.hpp"
#include "mulab/unlearn.hpp"

namespace mulab {

inline constexpr const char* kCodeVersion = "mulab 0.1.0";

// How far down the pipeline a run goes.  Each stage implies the earlier ones;
// cached artifacts make repeated prefixes cheap.
enum class Stage { pretrain, unlearn, metrics, idi, all };

inline int stage_rank(Stage s) { return static_cast<int>(s); }

inline Stage stage_from_string(const std::string& s) {
    if (s == "pretrain") return Stage::pretrain;
    if (s == "unlearn") return Stage::unlearn;
    if (s == "metrics") return Stage::metrics;
    if (s == "idi") return Stage::idi;
    if (s == "all") return Stage::all;
    throw ConfigError("unknown stage '" + s + "'");
}

// One (model, seed) cell of the report.  Accuracy-style metrics are stored as
// percentages; a metric that was not computed stays NaN and serializes empty.
struct ReportRow {
    std::string method;
    std::uint64_t seed = 0;
    double ua = std::numeric_limits<double>::quiet_NaN();
    double ra = std::numeric_limits<double>::quiet_NaN();
    double ta = std::numeric_limits<double>::quiet_NaN();
    double mia = std::numeric_limits<double>::quiet_NaN();
    double jsd = std::numeric_limits<double>::quiet_NaN();
    double rte_seconds = std::numeric_limits<double>::quiet_NaN();
    double idi = std::numeric_limits<double>::quiet_NaN();
    double recovery = std::numeric_limits<double>::quiet_NaN();
    bool idi_degenerate = false;
    bool idi_over = false;
    MiCurve curve;
    bool has_curve = false;
};

struct MetricsReport {
    std::string config_digest;
    std::string code_version = kCodeVersion;
    std::string run_id;
    std::vector<ReportRow> rows;
};

inline void write_report_files(const MetricsReport& report, const std::filesystem::path& out);

namespace detail {

namespace fs = std::filesystem;

inline std::string fmt17(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string csv_field(double v) { return std::isnan(v) ? std::string() : fmt17(v); }

inline void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << text;
}

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline nlohmann::json read_json_file(const fs::path& path) {
    return nlohmann::json::parse(read_text_file(path));
}

inline std::string cell_name(const std::string& method, std::uint64_t seed) {
    return method + "-s" + std::to_string(seed);
}

// Strict reader for the curve CSV this library writes.
inline MiCurve parse_mi_curve_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "layer,estimate_nats,stddev,label_kind,H_Y") {
        throw ConfigError("curve file has an unexpected header");
    }
    MiCurve curve;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> parts;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                parts.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (parts.size() != 5) throw ConfigError("curve file has a malformed row");
        curve.layer_indices.push_back(static_cast<std::size_t>(std::stoull(parts[0])));
        curve.estimates.push_back(std::stod(parts[1]));
        curve.stddevs.push_back(std::stod(parts[2]));
        const LabelKind kind = label_kind_from_string(parts[3]);
        const double h = std::stod(parts[4]);
        if (first) {
            curve.label_kind = kind;
            curve.label_entropy = h;
            first = false;
        } else if (kind != curve.label_kind) {
            throw ConfigError("curve file mixes label kinds");
        }
    }
    if (first) throw ConfigError("curve file has no rows");
    return curve;
}

// Runs independent jobs on up to `workers` threads; the first exception wins
// and is rethrown after all workers drain.
inline void run_jobs(std::vector<std::function<void()>>& jobs, std::size_t workers) {
    if (workers <= 1 || jobs.size() <= 1) {
        for (auto& job : jobs) job();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                jobs[i]();
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t n = std::min(workers, jobs.size());
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline std::size_t count_int(const nlohmann::json& p, const char* key, std::size_t fallback) {
    return p.contains(key) ? static_cast<std::size_t>(p.at(key).get<double>()) : fallback;
}

inline double num(const nlohmann::json& p, const char* key, double fallback) {
    return p.contains(key) ? p.at(key).get<double>() : fallback;
}

}  // namespace detail

// Builds the unlearning call for one method table; the request carries the
// per-seed stream every method derives its own randomness from.
inline UnlearnResult dispatch_method(const MethodSpec& m, const UnlearnRequest& req) {
    const nlohmann::json& p = m.params;
    using detail::count_int;
    using detail::num;
    if (m.name == "ft") {
        FinetuneOptions o;
        o.epochs = count_int(p, "epochs", o.epochs);
        o.learning_rate = num(p, "learning_rate", o.learning_rate);
        o.l1_lambda = num(p, "l1", o.l1_lambda);
        o.batch_size = count_int(p, "batch_size", o.batch_size);
        o.l2 = num(p, "l2", o.l2);
        return unlearn_finetune(req, o);
    }
    if (m.name == "rl") {
        RandomLabelOptions o;
        o.epochs = count_int(p, "epochs", o.epochs);
        o.learning_rate = num(p, "learning_rate", o.learning_rate);
        o.batch_size = count_int(p, "batch_size", o.batch_size);
        o.l2 = num(p, "l2", o.l2);
        o.relabel_seed = derive_seed(req.seed, "relabel");
        return unlearn_random_label(req, o);
    }
    if (m.name == "neggrad") {
        NegGradOptions o;
        o.epochs = count_int(p, "epochs", o.epochs);
        o.learning_rate = num(p, "learning_rate", o.learning_rate);
        o.ascent_weight = num(p, "ascent_weight", o.ascent_weight);
        o.batch_size = count_int(p, "batch_size", o.batch_size);
        o.l2 = num(p, "l2", o.l2);
        o.loss_guard = num(p, "loss_guard", o.loss_guard);
        return unlearn_neggrad(req, o);
    }
    if (m.name == "euk" || m.name == "cfk") {
        LastKOptions o;
        o.epochs = count_int(p, "epochs", o.epochs);
        o.learning_rate = num(p, "learning_rate", o.learning_rate);
        o.batch_size = count_int(p, "batch_size", o.batch_size);
        o.l2 = num(p, "l2", o.l2);
        const std::size_t k = count_int(p, "k", 1);
        return unlearn_last_k(req, m.name == "euk" ? LastKMode::eu : LastKMode::cf, k, o);
    }
    if (m.name == "hd") {
        HdOptions o;
        o.epochs = count_int(p, "epochs", o.epochs);
        o.learning_rate = num(p, "learning_rate", o.learning_rate);
        o.batch_size = count_int(p, "batch_size", o.batch_size);
        o.ascent_weight = num(p, "ascent_weight", o.ascent_weight);
        o.l2 = num(p, "l2", o.l2);
        return unlearn_hd(req, o);
    }
    if (m.name == "cola" || m.name == "cola_plus") {
        ColaOptions o;
        o.collapse_epochs = count_int(p, "collapse_epochs", o.collapse_epochs);
        o.collapse_lr = num(p, "collapse_lr", o.collapse_lr);
        o.align_epochs = count_int(p, "align_epochs", o.align_epochs);
        o.align_lr = num(p, "align_lr", o.align_lr);
        o.temperature = num(p, "temperature", o.temperature);
        o.batch_size = count_int(p, "batch_size", o.batch_size);
        o.l2 = num(p, "l2", o.l2);
        return unlearn_cola(req, m.name == "cola" ? ColaVariant::plain : ColaVariant::plus, o);
    }
    throw ConfigError("unknown method '" + m.name + "'");
}

namespace detail {

struct CellResult {
    Network net;
    double seconds = 0.0;
};

// Load a cached checkpoint + timing sidecar, or compute and persist them.
inline CellResult ensure_model(const fs::path& out, const std::string& name,
                               const std::function<CellResult()>& compute, std::ostream& log,
                               std::mutex& log_mutex) {
    const fs::path ckpt = out / "checkpoints" / (name + ".ckpt");
    const fs::path meta = out / "cells" / (name + ".json");
    if (fs::exists(ckpt) && fs::exists(meta)) {
        CellResult r;
        r.net = load_checkpoint(ckpt.string());
        r.seconds = read_json_file(meta).value("seconds", 0.0);
        std::lock_guard<std::mutex> lock(log_mutex);
        log << "  [cache] " << name << "\n";
        return r;
    }
    CellResult r = compute();
    save_checkpoint(r.net, ckpt.string());
    nlohmann::json j;
    j["seconds"] = r.seconds;
    write_text_file(meta, j.dump(2) + "\n");
    std::lock_guard<std::mutex> lock(log_mutex);
    log << "  [done]  " << name << " (" << std::setprecision(3) << r.seconds << "s)\n";
    return r;
}

struct BlackBox {
    double ua, ra, ta, mia, jsd, recovery;
};

inline nlohmann::json blackbox_to_json(const BlackBox& b) {
    nlohmann::json j;
    auto put = [&j](const char* k, double v) {
        if (!std::isnan(v)) j[k] = v;
    };
    put("ua_pct", b.ua);
    put("ra_pct", b.ra);
    put("ta_pct", b.ta);
    put("mia_pct", b.mia);
    put("jsd_nats", b.jsd);
    put("recovery_pct", b.recovery);
    return j;
}

inline BlackBox blackbox_from_json(const nlohmann::json& j) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    BlackBox b{nan, nan, nan, nan, nan, nan};
    b.ua = j.value("ua_pct", nan);
    b.ra = j.value("ra_pct", nan);
    b.ta = j.value("ta_pct", nan);
    b.mia = j.value("mia_pct", nan);
    b.jsd = j.value("jsd_nats", nan);
    b.recovery = j.value("recovery_pct", nan);
    return b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run_experiment: the pipeline is a pure function of (config, seeds); every
// artifact lands under the output directory, keyed so a rerun with the same
// config reuses it and a rerun with a different config is refused.
// ---------------------------------------------------------------------------
inline MetricsReport run_experiment(const ExperimentConfig& cfg, const std::string& digest,
                                    Stage stage, std::ostream& log, std::size_t jobs = 1) {
    namespace fs = std::filesystem;
    const fs::path out(cfg.out_dir);
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "cells");
    fs::create_directories(out / "mi_curves");

    const fs::path manifest_path = out / "manifest.json";
    if (fs::exists(manifest_path)) {
        const nlohmann::json m = detail::read_json_file(manifest_path);
        const std::string seen = m.value("config_digest", "");
        if (seen != digest) {
            throw ConfigError("output directory '" + cfg.out_dir +
                              "' holds artifacts for a different config (digest " + seen +
                              " vs " + digest + "); use a fresh --out or clear it");
        }
    } else {
        nlohmann::json m;
        m["config_digest"] = digest;
        m["code_version"] = kCodeVersion;
        m["run_id"] = cfg.run_id;
        detail::write_text_file(manifest_path, m.dump(2) + "\n");
    }

    log << "dataset: " << cfg.classes << " classes x " << cfg.per_class << " (dims " << cfg.dims
        << ")\n";
    SynthPair pair = synthesize(cfg.kind, cfg.classes, cfg.per_class, cfg.dims, cfg.noise,
                                cfg.data_seed);
    SplitSpec split = cfg.mode == ForgetMode::classwise
                          ? split_classwise(pair.train, pair.test, cfg.forget_classes)
                          : split_random(pair.train, pair.test, cfg.forget_per_class,
                                         cfg.split_seed);

    std::mutex log_mutex;
    std::map<std::string, detail::CellResult> models;
    std::mutex models_mutex;

    auto store = [&](const std::string& name, detail::CellResult r) {
        std::lock_guard<std::mutex> lock(models_mutex);
        models.emplace(name, std::move(r));
    };
    auto model_of = [&](const std::string& name) -> const detail::CellResult& {
        std::lock_guard<std::mutex> lock(models_mutex);
        const auto it = models.find(name);
        if (it == models.end()) throw std::logic_error("missing model cell " + name);
        return it->second;  // std::map nodes stay put across later insertions
    };

    // Stage 1: Original and Retrain per seed.
    log << "stage: pretrain (" << cfg.seeds.size() << " seeds)\n";
    {
        std::vector<std::function<void()>> work;
        for (std::uint64_t seed : cfg.seeds) {
            work.push_back([&, seed] {
                const std::string name = detail::cell_name("original", seed);
                detail::CellResult cell = detail::ensure_model(
                    out, name,
                    [&]() {
                        TrainConfig t;
                        t.epochs = cfg.pretrain_epochs;
                        t.batch_size = cfg.pretrain_batch;
                        t.learning_rate = cfg.pretrain_lr;
                        t.momentum = cfg.pretrain_momentum;
                        t.l2 = cfg.pretrain_l2;
                        t.shuffle_seed = derive_seed(seed, "pretrain");
                        Network init = build_mlp(static_cast<std::size_t>(cfg.dims), cfg.widths,
                                                 static_cast<std::size_t>(cfg.classes),
                                                 derive_seed(seed, "init"));
                        RunRecord rec = train_supervised(std::move(init), split.base, t);
                        return detail::CellResult{std::move(rec.network), rec.seconds};
                    },
                    log, log_mutex);
                store(name, std::move(cell));
            });
        }
        detail::run_jobs(work, jobs);

        work.clear();
        for (std::uint64_t seed : cfg.seeds) {
            work.push_back([&, seed] {
                const std::string name = detail::cell_name("retrain", seed);
                detail::CellResult cell = detail::ensure_model(
                    out, name,
                    [&]() {
                        const Network& original =
                            model_of(detail::cell_name("original", seed)).net;
                        UnlearnRequest req{original, split, derive_seed(seed, "retrain")};
                        UnlearnResult res = retrain_reference(req, cfg.retrain);
                        return detail::CellResult{std::move(res.unlearned), res.rte_seconds};
                    },
                    log, log_mutex);
                store(name, std::move(cell));
            });
        }
        detail::run_jobs(work, jobs);
    }

    // Stage 2: unlearning methods per (method, seed).
    if (stage_rank(stage) >= stage_rank(Stage::unlearn) && !cfg.methods.empty()) {
        log << "stage: unlearn (" << cfg.methods.size() << " methods)\n";
        std::vector<std::function<void()>> work;
        for (const MethodSpec& m : cfg.methods) {
            for (std::uint64_t seed : cfg.seeds) {
                work.push_back([&, m, seed] {
                    const std::string name = detail::cell_name(m.name, seed);
                    detail::CellResult cell = detail::ensure_model(
                        out, name,
                        [&]() {
                            const Network& original =
                                model_of(detail::cell_name("original", seed)).net;
                            UnlearnRequest req{original, split, derive_seed(seed, m.name)};
                            UnlearnResult res = dispatch_method(m, req);
                            return detail::CellResult{std::move(res.unlearned),
                                                      res.rte_seconds};
                        },
                        log, log_mutex);
                    store(name, std::move(cell));
                });
            }
        }
        detail::run_jobs(work, jobs);
    }

    // Row skeleton: baselines first, then the configured methods.
    std::vector<std::string> row_methods = {"original", "retrain"};
    if (stage_rank(stage) >= stage_rank(Stage::unlearn)) {
        for (const MethodSpec& m : cfg.methods) row_methods.push_back(m.name);
    }

    MetricsReport report;
    report.config_digest = digest;
    report.run_id = cfg.run_id;
    for (const std::string& method : row_methods) {
        for (std::uint64_t seed : cfg.seeds) {
            ReportRow row;
            row.method = method;
            row.seed = seed;
            row.rte_seconds = method == "original"
                                  ? std::numeric_limits<double>::quiet_NaN()
                                  : model_of(detail::cell_name(method, seed)).seconds;
            report.rows.push_back(std::move(row));
        }
    }
    auto row_at = [&](const std::string& method, std::uint64_t seed) -> ReportRow& {
        for (ReportRow& r : report.rows) {
            if (r.method == method && r.seed == seed) return r;
        }
        throw std::logic_error("missing report row " + method);
    };

    // Stage 3: black-box metrics per row.
    if (stage_rank(stage) >= stage_rank(Stage::metrics)) {
        log << "stage: metrics\n";
        std::vector<std::function<void()>> work;
        for (const std::string& method : row_methods) {
            for (std::uint64_t seed : cfg.seeds) {
                work.push_back([&, method, seed] {
                    const std::string name = detail::cell_name(method, seed);
                    const fs::path cache = out / "cells" / (name + "-metrics.json");
                    detail::BlackBox bb;
                    if (fs::exists(cache)) {
                        bb = detail::blackbox_from_json(detail::read_json_file(cache));
                    } else {
                        const double nan = std::numeric_limits<double>::quiet_NaN();
                        bb = detail::BlackBox{nan, nan, nan, nan, nan, nan};
                        const Network& net = model_of(name).net;
                        const Network& retrain =
                            model_of(detail::cell_name("retrain", seed)).net;
                        if (cfg.metrics.accuracy) {
                            const AccuracyMetrics a = accuracy_metrics(net, split);
                            bb.ua = 100.0 * a.ua;
                            bb.ra = 100.0 * a.ra;
                            bb.ta = 100.0 * a.ta;
                        }
                        if (cfg.metrics.mia) {
                            bb.mia = mia_score(net, split, cfg.metrics.mia_feature,
                                               derive_seed(seed, "mia"))
                                         .percentage;
                        }
                        if (cfg.metrics.jsd) {
                            bb.jsd = jsd_to_reference(net, retrain, split.base,
                                                      all_indices(split.base));
                        }
                        if (cfg.metrics.probe && split.mode == ForgetMode::classwise) {
                            TrainConfig probe;
                            probe.epochs = cfg.metrics.probe_epochs;
                            probe.learning_rate = cfg.metrics.probe_lr;
                            probe.batch_size = 32;
                            bb.recovery = 100.0 * recovery_probe(net, split,
                                                                 cfg.metrics.probe_fraction,
                                                                 derive_seed(seed, "probe"),
                                                                 probe);
                        }
                        detail::write_text_file(cache,
                                                detail::blackbox_to_json(bb).dump(2) + "\n");
                    }
                    ReportRow& row = row_at(method, seed);
                    row.ua = bb.ua;
                    row.ra = bb.ra;
                    row.ta = bb.ta;
                    row.mia = bb.mia;
                    row.jsd = bb.jsd;
                    row.recovery = bb.recovery;
                });
            }
        }
        detail::run_jobs(work, jobs);
    }

    // Stage 4: MI curves and the information-difference index.
    if (stage_rank(stage) >= stage_rank(Stage::idi) && cfg.metrics.idi) {
        log << "stage: idi\n";
        const LabelKind kind =
            cfg.mode == ForgetMode::classwise ? LabelKind::binary : LabelKind::multiclass;
        std::vector<std::size_t> layers = cfg.mi_layers;
        if (layers.empty()) layers = {cfg.widths.size() - 2, cfg.widths.size() - 1};

        std::map<std::string, MiCurve> curves;
        std::mutex curves_mutex;
        auto ensure_curve = [&](const std::string& name, const Network& net,
                                std::uint64_t seed) {
            const fs::path path = out / "mi_curves" / (name + ".csv");
            MiCurve curve;
            if (fs::exists(path)) {
                curve = detail::parse_mi_curve_csv(detail::read_text_file(path));
                std::lock_guard<std::mutex> lock(log_mutex);
                log << "  [cache] curve " << name << "\n";
            } else {
                MiConfig mi = cfg.mi;
                mi.seed = derive_seed(seed, "mi");
                curve = mi_curve(net, split, layers, kind, mi);
                std::ostringstream os;
                write_mi_curve_csv(os, curve);
                detail::write_text_file(path, os.str());
                std::lock_guard<std::mutex> lock(log_mutex);
                log << "  [done]  curve " << name << "\n";
            }
            std::lock_guard<std::mutex> lock(curves_mutex);
            curves.emplace(name, std::move(curve));
        };

        std::vector<std::function<void()>> work;
        for (const std::string& method : row_methods) {
            for (std::uint64_t seed : cfg.seeds) {
                work.push_back([&, method, seed] {
                    const std::string name = detail::cell_name(method, seed);
                    ensure_curve(name, model_of(name).net, seed);
                });
            }
        }
        detail::run_jobs(work, jobs);

        for (const std::string& method : row_methods) {
            for (std::uint64_t seed : cfg.seeds) {
                ReportRow& row = row_at(method, seed);
                row.curve = curves.at(detail::cell_name(method, seed));
                row.has_curve = true;
                const MiCurve& curve_o = curves.at(detail::cell_name("original", seed));
                const MiCurve& curve_r = curves.at(detail::cell_name("retrain", seed));
                const IdiResult r = idi(row.curve, curve_o, curve_r);
                row.idi = r.degenerate ? std::numeric_limits<double>::quiet_NaN() : r.value;
                row.idi_degenerate = r.degenerate;
                row.idi_over = r.over_unlearning;
            }
        }
    }

    // Persist the consolidated report once metrics exist.
    if (stage_rank(stage) >= stage_rank(Stage::metrics)) {
        write_report_files(report, out);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

namespace detail {

struct Aggregate {
    std::string method;
    std::size_t seeds = 0;
    std::map<std::string, double> mean;
    std::map<std::string, double> stddev;
};

inline const std::array<const char*, 8>& metric_keys() {
    static const std::array<const char*, 8> keys = {"ua_pct",      "ra_pct",   "ta_pct",
                                                    "mia_pct",     "jsd_nats", "rte_seconds",
                                                    "idi",         "recovery_pct"};
    return keys;
}

inline std::map<std::string, double> row_metrics(const ReportRow& r) {
    return {{"ua_pct", r.ua},         {"ra_pct", r.ra},
            {"ta_pct", r.ta},         {"mia_pct", r.mia},
            {"jsd_nats", r.jsd},      {"rte_seconds", r.rte_seconds},
            {"idi", r.idi},           {"recovery_pct", r.recovery}};
}

inline std::vector<Aggregate> aggregate_rows(const std::vector<ReportRow>& rows) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const ReportRow*>> by_method;
    for (const ReportRow& r : rows) {
        if (!by_method.count(r.method)) order.push_back(r.method);
        by_method[r.method].push_back(&r);
    }
    std::vector<Aggregate> out;
    for (const std::string& method : order) {
        const auto& cells = by_method[method];
        Aggregate agg;
        agg.method = method;
        agg.seeds = cells.size();
        for (const char* key : metric_keys()) {
            std::vector<double> values;
            for (const ReportRow* r : cells) {
                const double v = row_metrics(*r)[key];
                if (!std::isnan(v)) values.push_back(v);
            }
            if (values.size() != cells.size()) continue;  // metric absent for some seed
            double mean = 0.0;
            for (double v : values) mean += v;
            mean /= static_cast<double>(values.size());
            double ss = 0.0;
            for (double v : values) ss += (v - mean) * (v - mean);
            const double sd = values.size() > 1
                                  ? std::sqrt(ss / static_cast<double>(values.size() - 1))
                                  : 0.0;
            agg.mean[key] = mean;
            agg.stddev[key] = sd;
        }
        out.push_back(std::move(agg));
    }
    return out;
}

}  // namespace detail

inline void write_report_files(const MetricsReport& report, const std::filesystem::path& out) {
    // CSV: one row per (method, seed), then mean/std rows per method.
    std::ostringstream csv;
    csv << "method,seed,ua_pct,ra_pct,ta_pct,mia_pct,jsd_nats,rte_seconds,idi,idi_flag,"
           "recovery_pct\n";
    auto put_row = [&csv](const std::string& method, const std::string& seed_label,
                          const std::map<std::string, double>& m, const std::string& flag) {
        auto field = [&m](const char* k) {
            const auto it = m.find(k);
            return it == m.end() ? std::string() : detail::csv_field(it->second);
        };
        csv << method << ',' << seed_label << ',' << field("ua_pct") << ',' << field("ra_pct")
            << ',' << field("ta_pct") << ',' << field("mia_pct") << ',' << field("jsd_nats")
            << ',' << field("rte_seconds") << ',' << field("idi") << ',' << flag << ','
            << field("recovery_pct") << '\n';
    };
    for (const ReportRow& r : report.rows) {
        std::string flag;
        if (r.idi_degenerate) flag = "degenerate";
        else if (r.idi_over) flag = "over";
        put_row(r.method, std::to_string(r.seed), detail::row_metrics(r), flag);
    }
    for (const detail::Aggregate& a : detail::aggregate_rows(report.rows)) {
        put_row(a.method, "mean", a.mean, "");
        put_row(a.method, "std", a.stddev, "");
    }
    detail::write_text_file(out / "report.csv", csv.str());

    // JSON mirror with run identifiers, config digest, and the raw curves.
    nlohmann::json j;
    j["code_version"] = report.code_version;
    j["config_digest"] = report.config_digest;
    j["run_id"] = report.run_id;
    j["rows"] = nlohmann::json::array();
    for (const ReportRow& r : report.rows) {
        nlohmann::json row;
        row["method"] = r.method;
        row["seed"] = r.seed;
        for (const auto& [key, value] : detail::row_metrics(r)) {
            if (!std::isnan(value)) row[key] = value;
        }
        if (r.idi_degenerate) row["idi_degenerate"] = true;
        if (r.idi_over) row["idi_over_unlearning"] = true;
        if (r.has_curve) {
            nlohmann::json c;
            c["layers"] = r.curve.layer_indices;
            c["estimates"] = r.curve.estimates;
            c["stddevs"] = r.curve.stddevs;
            c["label_kind"] = label_kind_name(r.curve.label_kind);
            c["H_Y"] = r.curve.label_entropy;
            row["curve"] = std::move(c);
        }
        j["rows"].push_back(std::move(row));
    }
    j["aggregates"] = nlohmann::json::array();
    for (const detail::Aggregate& a : detail::aggregate_rows(report.rows)) {
        nlohmann::json agg;
        agg["method"] = a.method;
        agg["seeds"] = a.seeds;
        agg["mean"] = a.mean;
        agg["std"] = a.stddev;
        j["aggregates"].push_back(std::move(agg));
    }
    detail::write_text_file(out / "report.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// render_report: human-readable comparison against Retrain plus flat curve
// series for external plotting.
// ---------------------------------------------------------------------------
inline void render_report(const std::string& results_dir, std::ostream& os) {
    namespace fs = std::filesystem;
    const fs::path out(results_dir);
    const fs::path report_path = out / "report.json";
    if (!fs::exists(report_path)) {
        throw ConfigError("no report.json under '" + results_dir + "'; run the pipeline first");
    }
    const nlohmann::json j = detail::read_json_file(report_path);

    struct MethodView {
        std::string method;
        std::map<std::string, double> mean;
        std::map<std::string, double> stddev;
    };
    std::vector<MethodView> views;
    for (const auto& agg : j.at("aggregates")) {
        MethodView v;
        v.method = agg.at("method").get<std::string>();
        for (auto it = agg.at("mean").begin(); it != agg.at("mean").end(); ++it) {
            v.mean[it.key()] = it.value().get<double>();
        }
        for (auto it = agg.at("std").begin(); it != agg.at("std").end(); ++it) {
            v.stddev[it.key()] = it.value().get<double>();
        }
        views.push_back(std::move(v));
    }

    const MethodView* retrain = nullptr;
    for (const MethodView& v : views) {
        if (v.method == "retrain") retrain = &v;
    }
    if (!retrain) throw ConfigError("report has no retrain baseline row");

    const std::vector<std::pair<std::string, std::string>> columns = {
        {"ua_pct", "UA%"},     {"ra_pct", "RA%"},   {"ta_pct", "TA%"},
        {"mia_pct", "MIA%"},   {"jsd_nats", "JSD"}, {"rte_seconds", "RTE(s)"},
        {"idi", "IDI"},        {"recovery_pct", "REC%"}};
    std::vector<std::pair<std::string, std::string>> present;
    for (const auto& col : columns) {
        bool anywhere = false;
        for (const MethodView& v : views) anywhere = anywhere || v.mean.count(col.first);
        if (anywhere) {
            present.push_back(col);
        } else if (col.first != "recovery_pct") {
            os << "warning: metric '" << col.second << "' missing from results\n";
        }
    }

    // Sort by |IDI|: Retrain (0 by construction) leads, Original trails.
    std::vector<const MethodView*> ordered;
    for (const MethodView& v : views) ordered.push_back(&v);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const MethodView* a, const MethodView* b) {
                         auto key = [](const MethodView* v) {
                             const auto it = v->mean.find("idi");
                             return it == v->mean.end()
                                        ? std::numeric_limits<double>::infinity()
                                        : std::abs(it->second);
                         };
                         return key(a) < key(b);
                     });

    // Best (smallest) |gap to Retrain| per column among genuine methods.
    std::map<std::string, const MethodView*> best;
    for (const MethodView* v : ordered) {
        if (v->method == "retrain" || v->method == "original") continue;
        for (const auto& col : present) {
            const auto mine = v->mean.find(col.first);
            const auto base = retrain->mean.find(col.first);
            if (mine == v->mean.end() || base == retrain->mean.end()) continue;
            const double gap = std::abs(mine->second - base->second);
            const auto cur = best.find(col.first);
            if (cur == best.end()) {
                best[col.first] = v;
            } else {
                const double cur_gap = std::abs(cur->second->mean.at(col.first) -
                                                base->second);
                if (gap < cur_gap) best[col.first] = v;
            }
        }
    }

    auto fmt_cell = [](double mean, double sd, int prec) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(prec) << mean << "±" << sd;
        return s.str();
    };
    std::vector<std::vector<std::string>> table;
    std::vector<std::string> header = {"method"};
    for (const auto& col : present) {
        header.push_back(col.second);
        header.push_back("Δ" + col.second);
    }
    table.push_back(header);
    for (const MethodView* v : ordered) {
        std::vector<std::string> line = {v->method};
        for (const auto& col : present) {
            const auto mine = v->mean.find(col.first);
            if (mine == v->mean.end()) {
                line.push_back("-");
                line.push_back("-");
                continue;
            }
            const int prec = col.first == "idi" || col.first == "jsd_nats" ? 3 : 2;
            line.push_back(fmt_cell(mine->second, v->stddev.at(col.first), prec));
            const auto base = retrain->mean.find(col.first);
            if (base == retrain->mean.end()) {
                line.push_back("-");
                continue;
            }
            std::ostringstream gap;
            gap << std::fixed << std::setprecision(prec) << (mine->second - base->second);
            const auto star = best.find(col.first);
            if (star != best.end() && star->second == v) {
                line.push_back("**" + gap.str() + "**");
            } else {
                line.push_back(gap.str());
            }
        }
        table.push_back(std::move(line));
    }

    std::vector<std::size_t> width(table.front().size(), 0);
    for (const auto& line : table) {
        for (std::size_t c = 0; c < line.size(); ++c) {
            width[c] = std::max(width[c], line[c].size());
        }
    }
    os << "gap-to-Retrain comparison (sorted by |IDI|, best gap per metric in **bold**)\n";
    for (const auto& line : table) {
        for (std::size_t c = 0; c < line.size(); ++c) {
            os << std::left << std::setw(static_cast<int>(width[c]) + 2) << line[c];
        }
        os << "\n";
    }

    // Flat per-(model, layer) series for external plotting: estimates averaged
    // across seeds, spread measured across seeds.
    std::map<std::string, std::map<std::size_t, std::vector<double>>> series;
    std::map<std::string, std::pair<std::string, double>> kind_of;
    for (const auto& row : j.at("rows")) {
        if (!row.contains("curve")) continue;
        const std::string method = row.at("method").get<std::string>();
        const auto& c = row.at("curve");
        kind_of[method] = {c.at("label_kind").get<std::string>(), c.at("H_Y").get<double>()};
        const auto layers = c.at("layers").get<std::vector<std::size_t>>();
        const auto estimates = c.at("estimates").get<std::vector<double>>();
        for (std::size_t i = 0; i < layers.size(); ++i) {
            series[method][layers[i]].push_back(estimates[i]);
        }
    }
    if (!series.empty()) {
        std::ostringstream csv;
        csv << "model,layer,estimate_nats,stddev,label_kind,H_Y\n" << std::setprecision(17);
        for (const auto& [method, layers] : series) {
            for (const auto& [layer, values] : layers) {
                double mean = 0.0;
                for (double v : values) mean += v;
                mean /= static_cast<double>(values.size());
                double ss = 0.0;
                for (double v : values) ss += (v - mean) * (v - mean);
                const double sd = values.size() > 1
                                      ? std::sqrt(ss / static_cast<double>(values.size() - 1))
                                      : 0.0;
                csv << method << ',' << layer << ',' << mean << ',' << sd << ','
                    << kind_of[method].first << ',' << kind_of[method].second << '\n';
            }
        }
        detail::write_text_file(out / "mi_curve_series.csv", csv.str());
    }
}

}  // namespace mulab
