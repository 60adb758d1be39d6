#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mulab/dataset.hpp"
#include "mulab/metrics.hpp"
#include "mulab/mi.hpp"
#include "mulab/sha256.hpp"
#include "mulab/split.hpp"
#include "mulab/unlearn.hpp"

namespace mulab {

// Raised for anything the user can fix in the config file or on the command
// line; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Config text parser: a small key = value / [table] format.
//
// Supported: [dotted.table] headers, bare keys, strings with basic escapes,
// booleans, integers, floats, and single-line arrays of those scalars.
// Comments start at an unquoted '#'.  The result is a JSON tree, which also
// serves as the canonical form: its sorted-key serialization is digested, so
// comments, spacing, and key order never change a config's identity.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline bool bare_key_ok(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
    }
    return true;
}

[[noreturn]] inline void parse_fail(std::size_t line, const std::string& what) {
    throw ConfigError("config parse error at line " + std::to_string(line) + ": " + what);
}

inline std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

inline std::string parse_string_value(const std::string& s, std::size_t line) {
    if (s.size() < 2 || s.back() != '"') parse_fail(line, "unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        char c = s[i];
        if (c == '\\') {
            if (i + 2 >= s.size()) parse_fail(line, "dangling escape in string");
            char e = s[++i];
            switch (e) {
                case '"': out.push_back('"'); break;
                case '\\': out.push_back('\\'); break;
                case 'n': out.push_back('\n'); break;
                case 't': out.push_back('\t'); break;
                default: parse_fail(line, std::string("unsupported escape '\\") + e + "'");
            }
        } else if (c == '"') {
            parse_fail(line, "unexpected '\"' inside string");
        } else {
            out.push_back(c);
        }
    }
    return out;
}

inline nlohmann::json parse_scalar(const std::string& raw, std::size_t line) {
    const std::string s = trim(raw);
    if (s.empty()) parse_fail(line, "empty value");
    if (s.front() == '"') return parse_string_value(s, line);
    if (s == "true") return true;
    if (s == "false") return false;
    bool integral = true;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (i == 0 && (c == '+' || c == '-')) continue;
        if (!std::isdigit(static_cast<unsigned char>(c))) integral = false;
    }
    if (integral && s != "+" && s != "-") {
        try {
            return static_cast<std::int64_t>(std::stoll(s));
        } catch (const std::exception&) {
            parse_fail(line, "integer out of range: " + s);
        }
    }
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(s, &used);
    } catch (const std::exception&) {
        parse_fail(line, "not a value: " + s);
    }
    if (used != s.size()) parse_fail(line, "not a value: " + s);
    return d;
}

inline nlohmann::json parse_value(const std::string& raw, std::size_t line) {
    const std::string s = trim(raw);
    if (s.empty()) parse_fail(line, "missing value");
    if (s.front() != '[') return parse_scalar(s, line);
    if (s.back() != ']') parse_fail(line, "unterminated array");
    nlohmann::json arr = nlohmann::json::array();
    const std::string inner = trim(s.substr(1, s.size() - 2));
    if (inner.empty()) return arr;
    std::size_t start = 0;
    bool quoted = false;
    for (std::size_t i = 0; i <= inner.size(); ++i) {
        if (i < inner.size() && inner[i] == '"' && (i == 0 || inner[i - 1] != '\\')) {
            quoted = !quoted;
        }
        if (i < inner.size() && inner[i] == '[' && !quoted) {
            parse_fail(line, "nested arrays are not supported");
        }
        if (i == inner.size() || (inner[i] == ',' && !quoted)) {
            arr.push_back(parse_scalar(inner.substr(start, i - start), line));
            start = i + 1;
        }
    }
    return arr;
}

}  // namespace detail

inline nlohmann::json parse_config_text(const std::string& text) {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    std::string table_name = "(top level)";
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = detail::trim(detail::strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') detail::parse_fail(line_no, "unterminated table header");
            const std::string path = detail::trim(line.substr(1, line.size() - 2));
            if (path.empty()) detail::parse_fail(line_no, "empty table header");
            table = &root;
            std::size_t start = 0;
            while (start <= path.size()) {
                const std::size_t dot = path.find('.', start);
                const std::string part =
                    path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
                if (!detail::bare_key_ok(part)) {
                    detail::parse_fail(line_no, "bad table name '" + part + "'");
                }
                if (table->contains(part) && !(*table)[part].is_object()) {
                    detail::parse_fail(line_no, "'" + part + "' already holds a value");
                }
                table = &(*table)[part];
                if (table->is_null()) *table = nlohmann::json::object();
                if (dot == std::string::npos) break;
                start = dot + 1;
            }
            table_name = path;
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) detail::parse_fail(line_no, "expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        if (!detail::bare_key_ok(key)) detail::parse_fail(line_no, "bad key '" + key + "'");
        if (table->contains(key)) {
            detail::parse_fail(line_no, "duplicate key '" + key + "' in [" + table_name + "]");
        }
        (*table)[key] = detail::parse_value(line.substr(eq + 1), line_no);
    }
    return root;
}

inline nlohmann::json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

// Digest of the canonical (sorted-key, comment-free) form.
inline std::string config_digest(const nlohmann::json& j) { return sha256_hex(j.dump()); }

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct MethodSpec {
    std::string name;
    nlohmann::json params;  // validated table, defaults applied at dispatch
};

struct MetricToggles {
    bool accuracy = true;
    bool mia = true;
    bool jsd = true;
    bool idi = true;
    bool probe = false;  // class-wise splits only
    MiaFeature mia_feature = MiaFeature::entropy;
    double probe_fraction = 0.02;
    std::size_t probe_epochs = 10;
    double probe_lr = 0.05;
};

struct ExperimentConfig {
    std::string run_id = "run";
    // dataset
    SynthKind kind = SynthKind::blobs;
    int classes = 10;
    int per_class = 500;
    int dims = 16;
    double noise = 0.5;
    std::uint64_t data_seed = 0;
    // split
    ForgetMode mode = ForgetMode::classwise;
    std::vector<int> forget_classes = {4};
    std::size_t forget_per_class = 50;
    std::uint64_t split_seed = 0;
    // model
    std::vector<std::size_t> widths = {64, 64, 32};
    // training
    std::size_t pretrain_epochs = 20;
    std::size_t pretrain_batch = 64;
    double pretrain_lr = 0.1;
    double pretrain_momentum = 0.9;
    double pretrain_l2 = 5e-4;
    RetrainOptions retrain;
    // work
    std::vector<MethodSpec> methods;
    MetricToggles metrics;
    MiConfig mi;
    std::vector<std::size_t> mi_layers;  // empty = the last-two-blocks default
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::string out_dir;  // default results/<run_id>
};

namespace detail {

// Collects every problem before failing, so one error message names all
// offending keys at once.
struct Issues {
    std::vector<std::string> items;

    void add(const std::string& s) { items.push_back(s); }

    void raise_if_any() const {
        if (items.empty()) return;
        std::string msg = "config rejected (" + std::to_string(items.size()) + " problem" +
                          (items.size() == 1 ? "" : "s") + "): ";
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (i) msg += "; ";
            msg += items[i];
        }
        throw ConfigError(msg);
    }
};

// Typed reads from one table; tracks consumed keys so leftovers can be
// reported as unknown.
class TableReader {
public:
    TableReader(const nlohmann::json& table, std::string prefix, Issues& issues)
        : table_(table), prefix_(std::move(prefix)), issues_(issues) {}

    bool has(const std::string& key) const { return table_.contains(key); }

    template <typename T>
    T get(const std::string& key, T fallback, const char* type_name) {
        consumed_.insert(key);
        if (!table_.contains(key)) return fallback;
        const nlohmann::json& v = table_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (v.is_boolean()) return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (v.is_string()) return v.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (v.is_number()) return v.get<double>();
        } else {
            if (v.is_number_integer()) return v.get<T>();
        }
        issues_.add(path(key) + ": expected " + type_name);
        return fallback;
    }

    double number(const std::string& key, double fallback) {
        return get<double>(key, fallback, "a number");
    }
    std::int64_t integer(const std::string& key, std::int64_t fallback) {
        return get<std::int64_t>(key, fallback, "an integer");
    }
    bool boolean(const std::string& key, bool fallback) {
        return get<bool>(key, fallback, "a boolean");
    }
    std::string text(const std::string& key, const std::string& fallback) {
        return get<std::string>(key, fallback, "a string");
    }

    std::vector<std::int64_t> int_list(const std::string& key) {
        consumed_.insert(key);
        std::vector<std::int64_t> out;
        if (!table_.contains(key)) return out;
        const nlohmann::json& v = table_.at(key);
        if (!v.is_array()) {
            issues_.add(path(key) + ": expected an array of integers");
            return out;
        }
        for (const auto& e : v) {
            if (!e.is_number_integer()) {
                issues_.add(path(key) + ": expected an array of integers");
                return {};
            }
            out.push_back(e.get<std::int64_t>());
        }
        return out;
    }

    void allow(const std::string& key) { consumed_.insert(key); }

    void finish() {
        for (auto it = table_.begin(); it != table_.end(); ++it) {
            if (!consumed_.count(it.key())) issues_.add("unknown key " + path(it.key()));
        }
    }

    std::string path(const std::string& key) const {
        return prefix_.empty() ? key : prefix_ + "." + key;
    }

private:
    const nlohmann::json& table_;
    std::string prefix_;
    Issues& issues_;
    std::set<std::string> consumed_;
};

inline const std::map<std::string, std::set<std::string>>& method_grammar() {
    static const std::map<std::string, std::set<std::string>> g = {
        {"ft", {"epochs", "learning_rate", "l1", "batch_size", "l2"}},
        {"rl", {"epochs", "learning_rate", "batch_size", "l2"}},
        {"neggrad", {"epochs", "learning_rate", "ascent_weight", "batch_size", "l2",
                     "loss_guard"}},
        {"euk", {"k", "epochs", "learning_rate", "batch_size", "l2"}},
        {"cfk", {"k", "epochs", "learning_rate", "batch_size", "l2"}},
        {"hd", {"epochs", "learning_rate", "batch_size", "ascent_weight", "l2"}},
        {"cola", {"collapse_epochs", "collapse_lr", "align_epochs", "align_lr", "temperature",
                  "batch_size", "l2"}},
        {"cola_plus", {"collapse_epochs", "collapse_lr", "align_epochs", "align_lr",
                       "temperature", "batch_size", "l2"}},
    };
    return g;
}

}  // namespace detail

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a table");
    detail::Issues issues;
    ExperimentConfig cfg;

    detail::TableReader top(j, "", issues);
    cfg.run_id = top.text("run_id", cfg.run_id);
    if (!detail::bare_key_ok(cfg.run_id)) {
        issues.add("run_id: use letters, digits, '_' or '-'");
    }
    cfg.out_dir = top.text("out_dir", "");
    if (top.has("seeds")) {
        cfg.seeds.clear();
        for (std::int64_t s : top.int_list("seeds")) {
            if (s < 0) {
                issues.add("seeds: must be non-negative");
                break;
            }
            cfg.seeds.push_back(static_cast<std::uint64_t>(s));
        }
    } else {
        top.allow("seeds");
    }
    top.allow("dataset");
    top.allow("split");
    top.allow("model");
    top.allow("pretrain");
    top.allow("retrain");
    top.allow("methods");
    top.allow("metrics");
    top.allow("mi");
    // A typo'd table name ([data], [method]) must not silently yield a
    // default run; flag every root-level leftover like the sub-tables do.
    top.finish();

    if (j.contains("dataset")) {
        detail::TableReader r(j.at("dataset"), "dataset", issues);
        const std::string kind = r.text("kind", "blobs");
        try {
            cfg.kind = synth_kind_from_string(kind);
        } catch (const std::invalid_argument&) {
            issues.add("dataset.kind: unknown kind '" + kind + "'");
        }
        cfg.classes = static_cast<int>(r.integer("classes", cfg.classes));
        cfg.per_class = static_cast<int>(r.integer("per_class", cfg.per_class));
        cfg.dims = static_cast<int>(r.integer("dims", cfg.dims));
        cfg.noise = r.number("noise", cfg.noise);
        cfg.data_seed = static_cast<std::uint64_t>(r.integer("seed", 0));
        if (cfg.classes < 2) issues.add("dataset.classes: must be >= 2");
        if (cfg.per_class < 8) issues.add("dataset.per_class: must be >= 8");
        if (cfg.dims < 2) issues.add("dataset.dims: must be >= 2");
        if (cfg.noise < 0.0) issues.add("dataset.noise: must be >= 0");
        r.finish();
    }

    if (j.contains("split")) {
        detail::TableReader r(j.at("split"), "split", issues);
        const std::string mode = r.text("mode", "classwise");
        if (mode == "classwise") {
            cfg.mode = ForgetMode::classwise;
        } else if (mode == "random") {
            cfg.mode = ForgetMode::random;
        } else {
            issues.add("split.mode: expected 'classwise' or 'random'");
        }
        const auto classes = r.int_list("forget_classes");
        if (!classes.empty()) {
            cfg.forget_classes.clear();
            for (std::int64_t c : classes) {
                if (c < 0 || c >= cfg.classes) {
                    issues.add("split.forget_classes: class " + std::to_string(c) +
                               " out of range");
                } else {
                    cfg.forget_classes.push_back(static_cast<int>(c));
                }
            }
        }
        cfg.forget_per_class =
            static_cast<std::size_t>(r.integer("per_class", static_cast<std::int64_t>(
                                                                cfg.forget_per_class)));
        cfg.split_seed = static_cast<std::uint64_t>(r.integer("seed", 0));
        if (cfg.mode == ForgetMode::random && cfg.forget_per_class == 0) {
            issues.add("split.per_class: must be >= 1 in random mode");
        }
        r.finish();
    }

    if (j.contains("model")) {
        detail::TableReader r(j.at("model"), "model", issues);
        const auto widths = r.int_list("widths");
        if (!widths.empty()) {
            cfg.widths.clear();
            for (std::int64_t w : widths) {
                if (w < 1) {
                    issues.add("model.widths: widths must be positive");
                } else {
                    cfg.widths.push_back(static_cast<std::size_t>(w));
                }
            }
        }
        if (cfg.widths.size() < 2) issues.add("model.widths: need at least two blocks");
        r.finish();
    }

    if (j.contains("pretrain")) {
        detail::TableReader r(j.at("pretrain"), "pretrain", issues);
        cfg.pretrain_epochs = static_cast<std::size_t>(r.integer("epochs", 20));
        cfg.pretrain_batch = static_cast<std::size_t>(r.integer("batch_size", 64));
        cfg.pretrain_lr = r.number("learning_rate", 0.1);
        cfg.pretrain_momentum = r.number("momentum", 0.9);
        cfg.pretrain_l2 = r.number("l2", 5e-4);
        if (cfg.pretrain_epochs < 1) issues.add("pretrain.epochs: must be >= 1");
        if (!(cfg.pretrain_lr > 0.0)) issues.add("pretrain.learning_rate: must be positive");
        r.finish();
    }

    if (j.contains("retrain")) {
        detail::TableReader r(j.at("retrain"), "retrain", issues);
        cfg.retrain.epochs = static_cast<std::size_t>(r.integer("epochs", 20));
        cfg.retrain.batch_size = static_cast<std::size_t>(r.integer("batch_size", 64));
        cfg.retrain.learning_rate = r.number("learning_rate", 0.05);
        cfg.retrain.l2 = r.number("l2", 5e-4);
        if (cfg.retrain.epochs < 1) issues.add("retrain.epochs: must be >= 1");
        r.finish();
    }

    if (j.contains("methods")) {
        const nlohmann::json& m = j.at("methods");
        if (!m.is_object()) {
            issues.add("methods: expected method tables like [methods.ft]");
        } else {
            for (auto it = m.begin(); it != m.end(); ++it) {
                const auto& grammar = detail::method_grammar();
                const auto known = grammar.find(it.key());
                if (known == grammar.end()) {
                    issues.add("methods." + it.key() + ": unknown method");
                    continue;
                }
                if (!it.value().is_object()) {
                    issues.add("methods." + it.key() + ": expected a table");
                    continue;
                }
                for (auto p = it.value().begin(); p != it.value().end(); ++p) {
                    if (!known->second.count(p.key())) {
                        issues.add("unknown key methods." + it.key() + "." + p.key());
                    } else if (!p.value().is_number()) {
                        issues.add("methods." + it.key() + "." + p.key() +
                                   ": expected a number");
                    }
                }
                cfg.methods.push_back(MethodSpec{it.key(), it.value()});
            }
        }
    }

    if (j.contains("metrics")) {
        detail::TableReader r(j.at("metrics"), "metrics", issues);
        cfg.metrics.accuracy = r.boolean("accuracy", true);
        cfg.metrics.mia = r.boolean("mia", true);
        cfg.metrics.jsd = r.boolean("jsd", true);
        cfg.metrics.idi = r.boolean("idi", true);
        cfg.metrics.probe = r.boolean("probe", false);
        const std::string feature = r.text("mia_feature", "entropy");
        try {
            cfg.metrics.mia_feature = mia_feature_from_string(feature);
        } catch (const std::invalid_argument&) {
            issues.add("metrics.mia_feature: expected 'entropy' or 'confidence'");
        }
        cfg.metrics.probe_fraction = r.number("probe_fraction", 0.02);
        cfg.metrics.probe_epochs = static_cast<std::size_t>(r.integer("probe_epochs", 10));
        cfg.metrics.probe_lr = r.number("probe_lr", 0.05);
        if (cfg.metrics.probe && cfg.mode == ForgetMode::random) {
            issues.add("metrics.probe: only defined for class-wise splits");
        }
        r.finish();
    }

    if (j.contains("mi")) {
        detail::TableReader r(j.at("mi"), "mi", issues);
        cfg.mi.embedding_dim = static_cast<std::size_t>(
            r.integer("embedding_dim", static_cast<std::int64_t>(cfg.mi.embedding_dim)));
        cfg.mi.replications = static_cast<std::size_t>(
            r.integer("replications", static_cast<std::int64_t>(cfg.mi.replications)));
        cfg.mi.batch_k = static_cast<std::size_t>(
            r.integer("batch_k", static_cast<std::int64_t>(cfg.mi.batch_k)));
        cfg.mi.epochs = static_cast<std::size_t>(
            r.integer("epochs", static_cast<std::int64_t>(cfg.mi.epochs)));
        cfg.mi.tail_epochs = static_cast<std::size_t>(
            r.integer("tail_epochs", static_cast<std::int64_t>(cfg.mi.tail_epochs)));
        cfg.mi.eval_fraction = r.number("eval_fraction", cfg.mi.eval_fraction);
        cfg.mi.critic_lr = r.number("critic_lr", cfg.mi.critic_lr);
        cfg.mi.table_lr = r.number("table_lr", cfg.mi.table_lr);
        cfg.mi.forget_fraction = r.number("forget_fraction", cfg.mi.forget_fraction);
        cfg.mi.retain_fraction = r.number("retain_fraction", cfg.mi.retain_fraction);
        if (r.has("layers")) {
            const nlohmann::json& v = j.at("mi").at("layers");
            r.allow("layers");
            if (v.is_string()) {
                const std::string preset = v.get<std::string>();
                if (preset == "all") {
                    for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
                        cfg.mi_layers.push_back(l);
                    }
                } else if (preset != "last2") {
                    issues.add("mi.layers: expected 'last2', 'all', or a list");
                }
            } else if (v.is_array()) {
                for (const auto& e : v) {
                    if (!e.is_number_integer() || e.get<std::int64_t>() < 0) {
                        issues.add("mi.layers: expected non-negative layer indices");
                        cfg.mi_layers.clear();
                        break;
                    }
                    cfg.mi_layers.push_back(static_cast<std::size_t>(e.get<std::int64_t>()));
                }
            } else {
                issues.add("mi.layers: expected 'last2', 'all', or a list");
            }
        }
        try {
            cfg.mi.validate();
        } catch (const std::invalid_argument& e) {
            issues.add(std::string("mi: ") + e.what());
        }
        r.finish();
    }

    if (cfg.seeds.empty()) issues.add("seeds: list must be nonempty");
    if (cfg.mode == ForgetMode::classwise) {
        // Catches the built-in default list when the dataset has fewer classes.
        for (int c : cfg.forget_classes) {
            if (c < 0 || c >= cfg.classes) {
                issues.add("split.forget_classes: class " + std::to_string(c) +
                           " out of range for " + std::to_string(cfg.classes) + " classes");
            }
        }
    }
    for (std::size_t l : cfg.mi_layers) {
        if (l >= cfg.widths.size()) {
            issues.add("mi.layers: layer " + std::to_string(l) + " out of range for " +
                       std::to_string(cfg.widths.size()) + " blocks");
        }
    }
    if (cfg.out_dir.empty()) cfg.out_dir = "results/" + cfg.run_id;

    issues.raise_if_any();
    return cfg;
}

inline ExperimentConfig load_experiment(const std::string& path, std::string* digest_out = nullptr,
                                        nlohmann::json* json_out = nullptr) {
    const nlohmann::json j = load_config_file(path);
    if (digest_out) *digest_out = config_digest(j);
    if (json_out) *json_out = j;
    return experiment_from_json(j);
}

}  // namespace mulab
