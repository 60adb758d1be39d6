#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mulab/rng.hpp"
#include "mulab/tensor.hpp"

namespace mulab {

// Labeled dense dataset.  Features are [N x D]; labels are class ids.
struct Dataset {
    Tensor features;          // [N x D]
    std::vector<int> labels;  // length N, values in [0, num_classes)
    int num_classes = 0;
    std::string name;
    std::uint64_t seed = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.shape.size() == 2 ? features.shape[1] : 0; }

    void validate() const {
        if (features.shape.size() != 2 || features.shape[0] != labels.size()) {
            throw std::invalid_argument("Dataset '" + name + "': features/labels size mismatch");
        }
        if (num_classes < 2) {
            throw std::invalid_argument("Dataset '" + name + "': needs at least 2 classes");
        }
        std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
        for (int y : labels) {
            if (y < 0 || y >= num_classes) {
                throw std::invalid_argument("Dataset '" + name + "': label out of range");
            }
            ++counts[static_cast<std::size_t>(y)];
        }
        for (std::size_t c = 0; c < counts.size(); ++c) {
            if (counts[c] == 0) {
                throw std::invalid_argument("Dataset '" + name + "': class " + std::to_string(c) +
                                            " has no samples");
            }
        }
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
        for (int y : labels) ++counts[static_cast<std::size_t>(y)];
        return counts;
    }
};

// Copy the selected feature rows into a dense batch tensor.
inline Tensor gather_rows(const Tensor& features, const std::vector<std::size_t>& indices) {
    const std::size_t d = features.shape[1];
    Tensor out({indices.size(), d});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = features.data.data() + indices[i] * d;
        std::copy(src, src + d, out.data.data() + i * d);
    }
    return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels,
                                      const std::vector<std::size_t>& indices) {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

enum class SynthKind { blobs, rings, spiral };

inline SynthKind synth_kind_from_string(const std::string& s) {
    if (s == "blobs") return SynthKind::blobs;
    if (s == "rings") return SynthKind::rings;
    if (s == "spiral") return SynthKind::spiral;
    throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

// Configured blob center for one class: classes sit on a circle of fixed
// radius in the first two feature dimensions, remaining dimensions zero.
inline std::vector<double> blob_center(int cls, int classes, std::size_t dim) {
    constexpr double kRadius = 4.0;
    std::vector<double> c(dim, 0.0);
    const double a = 2.0 * 3.14159265358979323846 * static_cast<double>(cls) /
                     static_cast<double>(classes);
    c[0] = kRadius * std::cos(a);
    c[1] = kRadius * std::sin(a);
    return c;
}

namespace detail {

inline Dataset synth_block(SynthKind kind, int classes, int per_class, int dim, double noise,
                           std::uint64_t seed, std::uint64_t stream, const std::string& name) {
    const std::size_t n = static_cast<std::size_t>(classes) * static_cast<std::size_t>(per_class);
    const std::size_t d = static_cast<std::size_t>(dim);
    Dataset ds;
    ds.features = Tensor({n, d});
    ds.labels.resize(n);
    ds.num_classes = classes;
    ds.name = name;
    ds.seed = seed;
    std::size_t row = 0;
    for (int c = 0; c < classes; ++c) {
        Rng rng(derive_seed(seed, "synth", stream, (std::uint64_t(kind) << 32) | std::uint64_t(c)));
        for (int s = 0; s < per_class; ++s, ++row) {
            double* x = ds.features.data.data() + row * d;
            ds.labels[row] = c;
            switch (kind) {
                case SynthKind::blobs: {
                    const auto center = blob_center(c, classes, d);
                    for (std::size_t j = 0; j < d; ++j) x[j] = center[j] + noise * rng.normal();
                    break;
                }
                case SynthKind::rings: {
                    const double radius = 1.5 * static_cast<double>(c + 1);
                    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
                    x[0] = (radius + noise * rng.normal()) * std::cos(angle);
                    x[1] = (radius + noise * rng.normal()) * std::sin(angle);
                    for (std::size_t j = 2; j < d; ++j) x[j] = noise * rng.normal();
                    break;
                }
                case SynthKind::spiral: {
                    const double t = rng.uniform(0.15, 1.0);
                    const double angle = 3.0 * 3.14159265358979323846 * t +
                                         2.0 * 3.14159265358979323846 * static_cast<double>(c) /
                                             static_cast<double>(classes);
                    const double radius = 4.0 * t;
                    x[0] = radius * std::cos(angle) + noise * rng.normal();
                    x[1] = radius * std::sin(angle) + noise * rng.normal();
                    for (std::size_t j = 2; j < d; ++j) x[j] = noise * rng.normal();
                    break;
                }
            }
        }
    }
    ds.validate();
    return ds;
}

}  // namespace detail

struct SynthPair {
    Dataset train;
    Dataset test;  // per_class/5 samples per class, disjoint seed stream
};

// Deterministic synthetic dataset plus its paired held-out test set (5:1
// train:test).  Identical arguments always reproduce identical tensors.
inline SynthPair synthesize(SynthKind kind, int classes, int per_class, int dim, double noise,
                            std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("synthesize: classes must be >= 2");
    if (per_class < 8) throw std::invalid_argument("synthesize: per_class must be >= 8");
    if (dim < 2) throw std::invalid_argument("synthesize: dim must be >= 2");
    if (!(noise >= 0.0)) throw std::invalid_argument("synthesize: noise must be >= 0");
    SynthPair pair;
    pair.train = detail::synth_block(kind, classes, per_class, dim, noise, seed, 0, "train");
    pair.test = detail::synth_block(kind, classes, per_class / 5, dim, noise, seed, 1, "test");
    return pair;
}

// ---------------------------------------------------------------------------
// CSV ingestion: header `f0,...,f{D-1},label`, decimal floats, integer label.
// ---------------------------------------------------------------------------

inline Dataset load_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset_csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_dataset_csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.size() < 2 || header.back() != "label") {
        throw std::runtime_error("load_dataset_csv: header must be f0,...,f{D-1},label");
    }
    const std::size_t d = header.size() - 1;
    for (std::size_t j = 0; j < d; ++j) {
        if (header[j] != "f" + std::to_string(j)) {
            throw std::runtime_error("load_dataset_csv: unexpected header column '" + header[j] +
                                     "'");
        }
    }

    std::vector<double> values;
    std::vector<int> labels;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != d + 1) {
            throw std::runtime_error("load_dataset_csv: line " + std::to_string(lineno) +
                                     " has " + std::to_string(cells.size()) + " cells, expected " +
                                     std::to_string(d + 1));
        }
        try {
            for (std::size_t j = 0; j < d; ++j) values.push_back(std::stod(cells[j]));
            labels.push_back(std::stoi(cells[d]));
        } catch (const std::exception&) {
            throw std::runtime_error("load_dataset_csv: non-numeric cell on line " +
                                     std::to_string(lineno));
        }
    }
    if (labels.empty()) throw std::runtime_error("load_dataset_csv: no data rows");

    Dataset ds;
    ds.features = Tensor({labels.size(), d}, std::move(values));
    int max_label = 0;
    for (int y : labels) max_label = std::max(max_label, y);
    ds.labels = std::move(labels);
    ds.num_classes = max_label + 1;
    ds.name = path;
    ds.validate();
    return ds;
}

}  // namespace mulab
