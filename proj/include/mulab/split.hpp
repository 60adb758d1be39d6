#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mulab/dataset.hpp"
#include "mulab/rng.hpp"

namespace mulab {

enum class ForgetMode { classwise, random };

// Forget/retain partition of a training set, plus the paired test set.
struct SplitSpec {
    Dataset base;
    Dataset test;
    std::vector<std::size_t> forget_indices;  // sorted
    std::vector<std::size_t> retain_indices;  // sorted
    ForgetMode mode = ForgetMode::classwise;
    std::vector<int> forget_classes;     // classwise mode
    std::size_t per_class_count = 0;     // random mode

    void validate() const {
        if (forget_indices.empty()) throw std::invalid_argument("SplitSpec: empty forget set");
        if (retain_indices.empty()) throw std::invalid_argument("SplitSpec: empty retain set");
        if (forget_indices.size() + retain_indices.size() != base.size()) {
            throw std::invalid_argument("SplitSpec: forget/retain do not partition the dataset");
        }
        std::vector<bool> seen(base.size(), false);
        for (std::size_t i : forget_indices) seen[i] = true;
        for (std::size_t i : retain_indices) {
            if (seen[i]) throw std::invalid_argument("SplitSpec: overlapping forget/retain");
            seen[i] = true;
        }
    }
};

// Class-wise forgetting: the forget set is every sample of the given classes.
inline SplitSpec split_classwise(Dataset base, Dataset test, std::vector<int> forget_classes) {
    base.validate();
    if (forget_classes.empty()) {
        throw std::invalid_argument("split_classwise: forget_classes must be nonempty");
    }
    std::vector<bool> is_forget(static_cast<std::size_t>(base.num_classes), false);
    for (int c : forget_classes) {
        if (c < 0 || c >= base.num_classes) {
            throw std::invalid_argument("split_classwise: class " + std::to_string(c) +
                                        " out of range");
        }
        is_forget[static_cast<std::size_t>(c)] = true;
    }
    if (std::all_of(is_forget.begin(), is_forget.end(), [](bool b) { return b; })) {
        throw std::invalid_argument(
            "split_classwise: forgetting every class leaves nothing to retain");
    }
    SplitSpec s;
    s.mode = ForgetMode::classwise;
    s.forget_classes = std::move(forget_classes);
    std::sort(s.forget_classes.begin(), s.forget_classes.end());
    for (std::size_t i = 0; i < base.size(); ++i) {
        if (is_forget[static_cast<std::size_t>(base.labels[i])]) {
            s.forget_indices.push_back(i);
        } else {
            s.retain_indices.push_back(i);
        }
    }
    s.base = std::move(base);
    s.test = std::move(test);
    s.validate();
    return s;
}

// Random data forgetting: exactly per_class_count samples per class, chosen
// by a seeded shuffle within each class.
inline SplitSpec split_random(Dataset base, Dataset test, std::size_t per_class_count,
                              std::uint64_t seed) {
    base.validate();
    if (per_class_count == 0) {
        throw std::invalid_argument("split_random: per_class_count must be positive");
    }
    const auto counts = base.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (per_class_count >= counts[c]) {
            throw std::invalid_argument("split_random: per_class_count " +
                                        std::to_string(per_class_count) +
                                        " not below class " + std::to_string(c) + " size " +
                                        std::to_string(counts[c]));
        }
    }
    std::vector<std::vector<std::size_t>> by_class(counts.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        by_class[static_cast<std::size_t>(base.labels[i])].push_back(i);
    }
    SplitSpec s;
    s.mode = ForgetMode::random;
    s.per_class_count = per_class_count;
    std::vector<bool> forget(base.size(), false);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        Rng rng(derive_seed(seed, "split_random", c));
        rng.shuffle(by_class[c]);
        for (std::size_t k = 0; k < per_class_count; ++k) forget[by_class[c][k]] = true;
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
        (forget[i] ? s.forget_indices : s.retain_indices).push_back(i);
    }
    s.base = std::move(base);
    s.test = std::move(test);
    s.validate();
    return s;
}

// Seeded choice of ceil(fraction * n) indices without replacement.  When
// labels are supplied and stratified is true, the quota is applied per class
// so proportions are preserved within one sample.
inline std::vector<std::size_t> subsample(const std::vector<std::size_t>& indices, double fraction,
                                          std::uint64_t seed,
                                          const std::vector<int>* labels = nullptr,
                                          bool stratified = true) {
    if (indices.empty()) throw std::invalid_argument("subsample: empty input");
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw std::invalid_argument("subsample: fraction must be in (0, 1]");
    }
    if (fraction == 1.0) {
        std::vector<std::size_t> all = indices;
        std::sort(all.begin(), all.end());
        return all;
    }
    std::vector<std::size_t> out;
    if (labels != nullptr && stratified) {
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i : indices) by_class[(*labels)[i]].push_back(i);
        for (auto& [cls, members] : by_class) {
            const auto want = static_cast<std::size_t>(
                std::ceil(fraction * static_cast<double>(members.size())));
            Rng rng(derive_seed(seed, "subsample", static_cast<std::uint64_t>(cls)));
            rng.shuffle(members);
            for (std::size_t k = 0; k < want; ++k) out.push_back(members[k]);
        }
    } else {
        const auto want =
            static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(indices.size())));
        std::vector<std::size_t> pool = indices;
        Rng rng(derive_seed(seed, "subsample"));
        rng.shuffle(pool);
        out.assign(pool.begin(), pool.begin() + want);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// All indices of the dataset, sorted; handy base for subsample().
inline std::vector<std::size_t> all_indices(const Dataset& ds) {
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
}

// Indices of test samples whose label is in the given class set.
inline std::vector<std::size_t> indices_of_classes(const Dataset& ds,
                                                   const std::vector<int>& classes) {
    std::vector<bool> wanted(static_cast<std::size_t>(ds.num_classes), false);
    for (int c : classes) {
        if (c >= 0 && c < ds.num_classes) wanted[static_cast<std::size_t>(c)] = true;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (wanted[static_cast<std::size_t>(ds.labels[i])]) out.push_back(i);
    }
    return out;
}

}  // namespace mulab
