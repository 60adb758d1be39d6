#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "mulab/graph.hpp"
#include "mulab/rng.hpp"

using namespace mulab;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Tensor random_tensor(Shape shape, Rng& rng, double scl = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : t.data) x = scl * rng.normal();
    return t;
}

// Two-block tanh MLP with a linear head, built directly on the graph.
struct MlpGraph {
    Graph g;
    std::map<std::string, Tensor> point;
};

MlpGraph make_mlp_graph(std::size_t batch, std::size_t dim, std::size_t h1, std::size_t h2,
                        std::size_t classes, std::uint64_t seed) {
    MlpGraph m;
    Rng rng(seed);
    auto x = m.g.input("x", {batch, dim});
    auto w1 = m.g.param("w1", {dim, h1});
    auto b1 = m.g.param("b1", {h1});
    auto w2 = m.g.param("w2", {h1, h2});
    auto b2 = m.g.param("b2", {h2});
    auto wh = m.g.param("wh", {h2, classes});
    auto bh = m.g.param("bh", {classes});
    auto z1 = m.g.tanh_act(m.g.add_bias(m.g.matmul(x, w1), b1));
    auto z2 = m.g.tanh_act(m.g.add_bias(m.g.matmul(z1, w2), b2));
    auto logits = m.g.add_bias(m.g.matmul(z2, wh), bh);
    std::vector<int> labels(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        labels[i] = static_cast<int>(rng.below(classes));
    }
    auto loss = m.g.cross_entropy(logits, labels);
    m.g.mark_output("loss", loss);
    m.g.set_objective(loss);

    m.point["x"] = random_tensor({batch, dim}, rng);
    m.point["w1"] = random_tensor({dim, h1}, rng, 0.5);
    m.point["b1"] = random_tensor({h1}, rng, 0.1);
    m.point["w2"] = random_tensor({h1, h2}, rng, 0.5);
    m.point["b2"] = random_tensor({h2}, rng, 0.1);
    m.point["wh"] = random_tensor({h2, classes}, rng, 0.5);
    m.point["bh"] = random_tensor({classes}, rng, 0.1);
    return m;
}

}  // namespace

TEST_CASE("cross entropy matches hand-computed values", "[graph][loss]") {
    SECTION("uniform logits give log C") {
        Graph g;
        auto z = g.param("z", {2, 4});
        g.set_objective(g.cross_entropy(z, {0, 3}));
        std::map<std::string, Tensor> point{{"z", Tensor({2, 4}, {1, 1, 1, 1, -2, -2, -2, -2})}};
        auto res = forward_backward(g, point);
        CHECK_THAT(res.objective, Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));
    }
    SECTION("three-way example") {
        Graph g;
        auto z = g.param("z", {1, 3});
        g.set_objective(g.cross_entropy(z, {2}));
        auto res = forward_backward(g, {{"z", Tensor({1, 3}, {1, 2, 3})}});
        CHECK_THAT(res.objective, Catch::Matchers::WithinAbs(0.40761, 1e-5));
    }
    SECTION("extreme logits do not overflow") {
        Graph g;
        auto z = g.param("z", {1, 2});
        g.set_objective(g.cross_entropy(z, {0}));
        auto res = forward_backward(g, {{"z", Tensor({1, 2}, {1e3, 0.0})}});
        CHECK(std::isfinite(res.objective));
        CHECK_THAT(res.objective, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
    SECTION("non-negative, log C only for constant rows") {
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            Rng rng(seed);
            Graph g;
            auto z = g.param("z", {5, 6});
            std::vector<int> labels{0, 1, 2, 3, 4};
            g.set_objective(g.cross_entropy(z, labels));
            auto t = random_tensor({5, 6}, rng, 2.0);
            auto res = forward_backward(g, {{"z", t}});
            CHECK(res.objective >= 0.0);
            CHECK(res.objective != Catch::Approx(std::log(6.0)).epsilon(1e-9));
        }
    }
}

TEST_CASE("kl divergence handles masked teachers", "[graph][loss]") {
    SECTION("identical rows give zero") {
        Graph g;
        auto t = g.input("t", {2, 3}, true);
        auto s = g.param("s", {2, 3});
        g.set_objective(g.kl_div(t, s));
        Tensor logits({2, 3}, {0.5, -1.0, 2.0, 3.0, 3.0, 3.0});
        auto res = forward_backward(g, {{"t", logits}, {"s", logits}});
        CHECK_THAT(res.objective, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
    SECTION("masked teacher against uniform student gives log 2") {
        Graph g;
        auto t = g.input("t", {1, 2}, true);
        auto s = g.param("s", {1, 2});
        g.set_objective(g.kl_div(t, s));
        auto res = forward_backward(g, {{"t", Tensor({1, 2}, {kNegInf, 0.0})},
                                        {"s", Tensor({1, 2}, {0.0, 0.0})}});
        CHECK_THAT(res.objective, Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
    }
    SECTION("fully masked teacher row is an error") {
        Graph g;
        auto t = g.input("t", {1, 2}, true);
        auto s = g.param("s", {1, 2});
        g.set_objective(g.kl_div(t, s));
        Evaluator ev(g);
        Tensor teacher({1, 2}, {kNegInf, kNegInf});
        Tensor student({1, 2}, {0.0, 0.0});
        ev.bind("t", &teacher);
        ev.bind("s", &student);
        CHECK_THROWS_WITH(ev.run_forward(), Catch::Matchers::ContainsSubstring("all -inf"));
    }
    SECTION("non-negative on random rows") {
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            Rng rng(seed);
            Graph g;
            auto t = g.input("t", {4, 5}, true);
            auto s = g.param("s", {4, 5});
            g.set_objective(g.kl_div(t, s));
            auto res = forward_backward(
                g, {{"t", random_tensor({4, 5}, rng, 2.0)}, {"s", random_tensor({4, 5}, rng, 2.0)}});
            CHECK(res.objective >= 0.0);
        }
    }
}

TEST_CASE("gradients agree with central differences", "[graph][gradcheck]") {
    SECTION("cross entropy through an mlp") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            auto m = make_mlp_graph(8, 6, 16, 12, 4, seed);
            CHECK(grad_check(m.g, m.point, 1e-5) <= 1e-4);
        }
    }
    SECTION("kl divergence with a masked teacher") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            Graph g;
            auto t = g.input("t", {4, 6}, true);
            auto s = g.param("s", {4, 6});
            g.set_objective(g.kl_div(t, s));
            Tensor teacher = random_tensor({4, 6}, rng, 1.5);
            for (std::size_t r = 0; r < 4; ++r) teacher.at(r, 2) = kNegInf;
            std::map<std::string, Tensor> point{{"t", teacher},
                                                {"s", random_tensor({4, 6}, rng, 1.5)}};
            CHECK(grad_check(g, point, 1e-5) <= 1e-4);
        }
    }
    SECTION("supervised contrastive loss") {
        for (std::size_t batch : {std::size_t(3), std::size_t(8)}) {
            for (double tau : {0.1, 1.0}) {
                for (std::uint64_t seed = 0; seed < 10; ++seed) {
                    Rng rng(derive_seed(seed, "supcon", batch, tau == 0.1 ? 0 : 1));
                    Graph g;
                    auto e = g.param("e", {batch, 5});
                    std::vector<int> labels(batch);
                    for (std::size_t i = 0; i < batch; ++i) {
                        labels[i] = static_cast<int>(rng.below(2));
                    }
                    g.set_objective(g.supcon_loss(e, labels, tau));
                    std::map<std::string, Tensor> point{{"e", random_tensor({batch, 5}, rng)}};
                    CHECK(grad_check(g, point, 1e-5) <= 1e-4);
                }
            }
        }
    }
    SECTION("infonce over paired embeddings") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            Graph g;
            auto u = g.param("u", {6, 4});
            auto v = g.param("v", {6, 4});
            g.set_objective(g.infonce(u, v));
            std::map<std::string, Tensor> point{{"u", random_tensor({6, 4}, rng)},
                                                {"v", random_tensor({6, 4}, rng)}};
            CHECK(grad_check(g, point, 1e-5) <= 1e-4);
        }
    }
    SECTION("infonce with a label table") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            Graph g;
            auto u = g.param("u", {7, 4});
            auto tab = g.param("tab", {3, 4});
            std::vector<int> labels(7);
            for (auto& y : labels) y = static_cast<int>(rng.below(3));
            g.set_objective(g.infonce_labels(u, tab, labels));
            std::map<std::string, Tensor> point{{"u", random_tensor({7, 4}, rng)},
                                                {"tab", random_tensor({3, 4}, rng)}};
            CHECK(grad_check(g, point, 1e-5) <= 1e-4);
        }
    }
    SECTION("non-finite loss at the evaluation point is an error") {
        Graph g;
        auto z = g.param("z", {1, 2});
        g.set_objective(g.cross_entropy(z, {0}));
        std::map<std::string, Tensor> point{
            {"z", Tensor({1, 2}, {std::numeric_limits<double>::quiet_NaN(), 0.0})}};
        CHECK_THROWS(grad_check(g, point, 1e-5));
    }
}

TEST_CASE("graph validation and determinism", "[graph]") {
    SECTION("matmul shape mismatch names the node") {
        Graph g;
        auto a = g.input("a", {2, 3});
        auto b = g.input("b", {4, 5});
        CHECK_THROWS_WITH(g.matmul(a, b), Catch::Matchers::ContainsSubstring("matmul") &&
                                              Catch::Matchers::ContainsSubstring("mismatch"));
    }
    SECTION("binding a wrong shape names the placeholder") {
        Graph g;
        g.input("x", {2, 2});
        Evaluator ev(g);
        Tensor wrong({3, 2});
        CHECK_THROWS_WITH(ev.bind("x", &wrong), Catch::Matchers::ContainsSubstring("'x'"));
    }
    SECTION("unbound placeholder is an error") {
        Graph g;
        auto x = g.input("x", {2, 2});
        g.set_objective(g.mean(x));
        Evaluator ev(g);
        CHECK_THROWS_WITH(ev.run_forward(), Catch::Matchers::ContainsSubstring("not bound"));
    }
    SECTION("objective must be scalar") {
        Graph g;
        auto x = g.input("x", {2, 2});
        CHECK_THROWS(g.set_objective(x));
    }
    SECTION("same seed twice gives bit-identical values and grads") {
        auto m1 = make_mlp_graph(8, 6, 16, 12, 4, 42);
        auto m2 = make_mlp_graph(8, 6, 16, 12, 4, 42);
        auto r1 = forward_backward(m1.g, m1.point);
        auto r2 = forward_backward(m2.g, m2.point);
        CHECK(r1.objective == r2.objective);
        for (const auto& [name, grad] : r1.grads) {
            REQUIRE(r2.grads.count(name) == 1);
            CHECK(grad == r2.grads.at(name));
        }
    }
    SECTION("rejects non-finite values outside masked logits") {
        Graph g;
        auto x = g.input("x", {1, 2});
        g.set_objective(g.mean(x));
        Evaluator ev(g);
        Tensor bad({1, 2}, {kNegInf, 0.0});
        ev.bind("x", &bad);
        CHECK_THROWS_WITH(ev.run_forward(), Catch::Matchers::ContainsSubstring("non-finite"));
    }
}
