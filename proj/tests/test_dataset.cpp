#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "mulab/dataset.hpp"
#include "mulab/split.hpp"

using namespace mulab;

TEST_CASE("synthetic blobs", "[dataset]") {
    SECTION("zero noise collapses every class to its center") {
        auto pair = synthesize(SynthKind::blobs, 2, 8, 3, 0.0, 11);
        const auto& ds = pair.train;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto center = blob_center(ds.labels[i], ds.num_classes, ds.dim());
            for (std::size_t j = 0; j < ds.dim(); ++j) {
                CHECK(ds.features.at(i, j) == center[j]);
            }
        }
    }
    SECTION("sample means stay close to configured centers") {
        auto pair = synthesize(SynthKind::blobs, 10, 500, 16, 0.5, 7);
        const auto& ds = pair.train;
        for (int c = 0; c < 10; ++c) {
            std::vector<double> mean(ds.dim(), 0.0);
            std::size_t n = 0;
            for (std::size_t i = 0; i < ds.size(); ++i) {
                if (ds.labels[i] != c) continue;
                ++n;
                for (std::size_t j = 0; j < ds.dim(); ++j) mean[j] += ds.features.at(i, j);
            }
            const auto center = blob_center(c, 10, ds.dim());
            // 4-sigma bound on a 500-sample mean with per-dim noise 0.5
            const double bound = 4.0 * 0.5 / std::sqrt(static_cast<double>(n));
            for (std::size_t j = 0; j < ds.dim(); ++j) {
                CHECK(std::abs(mean[j] / static_cast<double>(n) - center[j]) < bound);
            }
        }
    }
    SECTION("same arguments give bit-identical tensors") {
        auto a = synthesize(SynthKind::blobs, 4, 16, 5, 0.3, 99);
        auto b = synthesize(SynthKind::blobs, 4, 16, 5, 0.3, 99);
        CHECK(a.train.features.data == b.train.features.data);
        CHECK(a.test.features.data == b.test.features.data);
        CHECK(a.train.labels == b.train.labels);
    }
    SECTION("test split is disjoint from train and 5x smaller") {
        auto pair = synthesize(SynthKind::blobs, 3, 40, 4, 0.2, 5);
        CHECK(pair.train.size() == 120);
        CHECK(pair.test.size() == 24);
        // different seed stream: no test row coincides with any train row
        for (std::size_t t = 0; t < pair.test.size(); ++t) {
            bool found = false;
            for (std::size_t i = 0; i < pair.train.size() && !found; ++i) {
                bool same = true;
                for (std::size_t j = 0; j < pair.train.dim(); ++j) {
                    if (pair.train.features.at(i, j) != pair.test.features.at(t, j)) {
                        same = false;
                        break;
                    }
                }
                found = same;
            }
            CHECK_FALSE(found);
        }
    }
    SECTION("argument validation") {
        CHECK_THROWS(synthesize(SynthKind::blobs, 1, 16, 4, 0.3, 1));
        CHECK_THROWS(synthesize(SynthKind::blobs, 3, 4, 4, 0.3, 1));
        CHECK_THROWS(synthesize(SynthKind::blobs, 3, 16, 1, 0.3, 1));
        CHECK_THROWS(synthesize(SynthKind::blobs, 3, 16, 4, -0.1, 1));
    }
    SECTION("rings and spiral generate valid datasets") {
        for (auto kind : {SynthKind::rings, SynthKind::spiral}) {
            auto pair = synthesize(kind, 3, 24, 4, 0.1, 13);
            CHECK_NOTHROW(pair.train.validate());
            CHECK(pair.train.size() == 72);
        }
    }
}

TEST_CASE("splits", "[dataset][split]") {
    auto pair = synthesize(SynthKind::blobs, 10, 50, 4, 0.4, 3);

    SECTION("classwise partitions by label") {
        auto s = split_classwise(pair.train, pair.test, {4});
        CHECK(s.forget_indices.size() == 50);
        CHECK(s.retain_indices.size() == 450);
        for (std::size_t i : s.forget_indices) CHECK(s.base.labels[i] == 4);
        for (std::size_t i : s.retain_indices) CHECK(s.base.labels[i] != 4);
        std::vector<std::size_t> joined = s.forget_indices;
        joined.insert(joined.end(), s.retain_indices.begin(), s.retain_indices.end());
        std::sort(joined.begin(), joined.end());
        CHECK(joined == all_indices(s.base));
    }
    SECTION("two-class forgetting") {
        auto s = split_classwise(pair.train, pair.test, {0, 1});
        CHECK(s.forget_indices.size() == 100);
    }
    SECTION("forgetting every class is rejected") {
        CHECK_THROWS(split_classwise(pair.train, pair.test, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
    }
    SECTION("random mode takes an exact per-class quota") {
        auto s = split_random(pair.train, pair.test, 5, 21);
        CHECK(s.forget_indices.size() == 50);
        std::vector<int> counts(10, 0);
        for (std::size_t i : s.forget_indices) ++counts[static_cast<std::size_t>(s.base.labels[i])];
        for (int c : counts) CHECK(c == 5);
        auto again = split_random(pair.train, pair.test, 5, 21);
        CHECK(s.forget_indices == again.forget_indices);
    }
    SECTION("random mode rejects bad quotas") {
        CHECK_THROWS(split_random(pair.train, pair.test, 0, 21));
        CHECK_THROWS(split_random(pair.train, pair.test, 50, 21));
    }
}

TEST_CASE("subsample", "[dataset][split]") {
    auto pair = synthesize(SynthKind::blobs, 10, 500, 4, 0.4, 3);
    auto idx = all_indices(pair.train);

    SECTION("fraction 1.0 returns the input") {
        CHECK(subsample(idx, 1.0, 9) == idx);
    }
    SECTION("two percent of 5000 is exactly 100") {
        auto out = subsample(idx, 0.02, 9, &pair.train.labels, false);
        CHECK(out.size() == 100);
    }
    SECTION("stratified keeps per-class shares") {
        auto out = subsample(idx, 0.10, 9, &pair.train.labels, true);
        CHECK(out.size() == 500);
        std::vector<int> counts(10, 0);
        for (std::size_t i : out) ++counts[static_cast<std::size_t>(pair.train.labels[i])];
        for (int c : counts) CHECK(c == 50);
    }
    SECTION("empty input is an error") {
        std::vector<std::size_t> none;
        CHECK_THROWS(subsample(none, 0.5, 1));
    }
    SECTION("deterministic") {
        CHECK(subsample(idx, 0.25, 4) == subsample(idx, 0.25, 4));
    }
}

TEST_CASE("csv ingestion", "[dataset]") {
    const std::string path = "test_dataset_tmp.csv";
    {
        std::ofstream out(path);
        out << "f0,f1,label\n";
        out << "0.5,-1.25,0\n";
        out << "1.5,2.0,1\n";
        out << "0.25,0.75,0\n";
    }
    SECTION("round trip") {
        auto ds = load_dataset_csv(path);
        CHECK(ds.size() == 3);
        CHECK(ds.dim() == 2);
        CHECK(ds.num_classes == 2);
        CHECK(ds.features.at(0, 1) == -1.25);
        CHECK(ds.labels == std::vector<int>{0, 1, 0});
    }
    SECTION("bad header is rejected") {
        {
            std::ofstream out(path);
            out << "x0,x1,label\n0,0,0\n0,0,1\n";
        }
        CHECK_THROWS_WITH(load_dataset_csv(path),
                          Catch::Matchers::ContainsSubstring("header"));
    }
    SECTION("ragged row is rejected") {
        {
            std::ofstream out(path);
            out << "f0,f1,label\n0.5,1\n";
        }
        CHECK_THROWS(load_dataset_csv(path));
    }
    SECTION("non-numeric cell is rejected") {
        {
            std::ofstream out(path);
            out << "f0,f1,label\nabc,1.0,0\n";
        }
        CHECK_THROWS_WITH(load_dataset_csv(path),
                          Catch::Matchers::ContainsSubstring("non-numeric"));
    }
    std::remove(path.c_str());
}
