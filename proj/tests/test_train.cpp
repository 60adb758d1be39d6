#include "catch2/catch_amalgamated.hpp"

#include <cmath>
#include <limits>

#include "mulab/network.hpp"
#include "mulab/split.hpp"
#include "mulab/train.hpp"

using namespace mulab;

namespace {

SynthPair two_blobs() { return synthesize(SynthKind::blobs, 2, 20, 4, 0.5, 11); }

Network small_net(std::uint64_t seed = 3) { return build_mlp(4, {16, 8}, 2, seed); }

void zero_params(Network& net) {
    for (auto& l : net.blocks) {
        l.w.data.assign(l.w.numel(), 0.0);
        l.b.data.assign(l.b.numel(), 0.0);
    }
    net.head.w.data.assign(net.head.w.numel(), 0.0);
    net.head.b.data.assign(net.head.b.numel(), 0.0);
}

std::size_t count_zero_params(const Network& net) {
    std::size_t zeros = 0;
    for (double v : parameter_vector(net)) {
        if (std::abs(v) < 1e-8) ++zeros;
    }
    return zeros;
}

}  // namespace

TEST_CASE("evaluate_accuracy follows the argmax contract") {
    SECTION("all-zero logits predict class zero; balanced ten-class set scores 0.1") {
        auto pair = synthesize(SynthKind::blobs, 10, 8, 6, 0.3, 5);
        Network net = build_mlp(6, {12, 8}, 10, 1);
        zero_params(net);
        CHECK(evaluate_accuracy(net, pair.train) == 0.1);
    }

    SECTION("hand-built four-sample view with three hits scores 0.75") {
        Dataset ds;
        ds.num_classes = 2;
        ds.features = Tensor::zeros({4, 2});
        ds.labels = {0, 0, 0, 1};
        Network net = build_mlp(2, {4, 4}, 2, 9);
        zero_params(net);  // predicts class 0 everywhere
        CHECK(evaluate_accuracy(net, ds, {0, 1, 2, 3}) == 0.75);
    }

    SECTION("ties resolve to the lowest class index") {
        Dataset ds;
        ds.num_classes = 3;
        ds.features = Tensor::zeros({1, 2});
        ds.labels = {1};
        Network net = build_mlp(2, {4, 4}, 3, 9);
        zero_params(net);
        net.head.b.data = {1.0, 5.0, 5.0};  // classes 1 and 2 tie; 1 wins
        CHECK(evaluate_accuracy(net, ds, {0}) == 1.0);
    }

    SECTION("accuracy is invariant to the order of the index view") {
        auto pair = two_blobs();
        Network net = small_net();
        auto idx = all_indices(pair.train);
        const double a = evaluate_accuracy(net, pair.train, idx);
        Rng rng(77);
        rng.shuffle(idx);
        CHECK(evaluate_accuracy(net, pair.train, idx) == a);
    }

    SECTION("empty view is rejected") {
        auto pair = two_blobs();
        CHECK_THROWS_AS(evaluate_accuracy(small_net(), pair.train, {}), std::invalid_argument);
    }
}

TEST_CASE("train_supervised fits separable blobs to full train accuracy") {
    auto pair = two_blobs();
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.1;
    cfg.shuffle_seed = 21;
    RunRecord rec = train_supervised(small_net(), pair.train, cfg);

    REQUIRE(rec.epoch_loss.size() == 20);
    REQUIRE(rec.epoch_accuracy.size() == 20);
    CHECK(rec.seconds > 0.0);
    CHECK(rec.epoch_loss.back() < rec.epoch_loss.front());
    CHECK(evaluate_accuracy(rec.network, pair.train) == 1.0);
    CHECK(evaluate_accuracy(rec.network, pair.test) == 1.0);
}

TEST_CASE("adaptive optimizer also fits the blobs") {
    auto pair = two_blobs();
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.01;
    cfg.optimizer = OptimizerKind::adaptive;
    cfg.shuffle_seed = 22;
    RunRecord rec = train_supervised(small_net(), pair.train, cfg);
    CHECK(evaluate_accuracy(rec.network, pair.train) == 1.0);
}

TEST_CASE("trainable scopes leave frozen layers bit-identical") {
    auto pair = two_blobs();
    Network net = small_net();
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.05;

    SECTION("head_only keeps the encoder digest") {
        const std::string enc_before = encoder_digest(net);
        const std::string head_before = digest_of_layers(net, net.depth(), net.total_layers());
        cfg.scope = TrainableScope::head_only;
        RunRecord rec = train_supervised(net, pair.train, cfg);
        CHECK(encoder_digest(rec.network) == enc_before);
        CHECK(digest_of_layers(rec.network, net.depth(), net.total_layers()) != head_before);
    }

    SECTION("encoder_only keeps the head digest") {
        const std::string head_before = digest_of_layers(net, net.depth(), net.total_layers());
        cfg.scope = TrainableScope::encoder_only;
        RunRecord rec = train_supervised(net, pair.train, cfg);
        CHECK(digest_of_layers(rec.network, net.depth(), net.total_layers()) == head_before);
        CHECK(encoder_digest(rec.network) != encoder_digest(net));
    }

    SECTION("last_k touches exactly the last k layers") {
        cfg.scope = TrainableScope::last_k;
        cfg.last_k = 2;
        RunRecord rec = train_supervised(net, pair.train, cfg);
        CHECK(digest_of_layers(rec.network, 0, 1) == digest_of_layers(net, 0, 1));
        CHECK(digest_of_layers(rec.network, 1, 3) != digest_of_layers(net, 1, 3));
    }

    SECTION("last_k out of range is rejected") {
        cfg.scope = TrainableScope::last_k;
        cfg.last_k = 4;  // net has 3 layers in total
        CHECK_THROWS_AS(train_supervised(net, pair.train, cfg), std::invalid_argument);
    }
}

TEST_CASE("l1 shrinkage produces strictly more exact zeros") {
    auto pair = two_blobs();
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.05;
    cfg.shuffle_seed = 8;
    RunRecord plain = train_supervised(small_net(), pair.train, cfg);
    cfg.l1 = 5e-3;
    RunRecord sparse = train_supervised(small_net(), pair.train, cfg);
    CHECK(count_zero_params(sparse.network) > count_zero_params(plain.network));
}

TEST_CASE("training invariants") {
    auto pair = two_blobs();

    SECTION("reruns are bit-identical") {
        TrainConfig cfg;
        cfg.epochs = 5;
        cfg.batch_size = 8;
        cfg.shuffle_seed = 40;
        RunRecord a = train_supervised(small_net(), pair.train, cfg);
        RunRecord b = train_supervised(small_net(), pair.train, cfg);
        CHECK(parameter_digest(a.network) == parameter_digest(b.network));
        CHECK(a.epoch_loss == b.epoch_loss);
        CHECK(a.epoch_accuracy == b.epoch_accuracy);
    }

    SECTION("vanishing learning rate moves parameters by less than 1e-9") {
        Network net = small_net();
        const std::vector<double> before = parameter_vector(net);
        TrainConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = 8;
        cfg.learning_rate = 1e-12;
        RunRecord rec = train_supervised(net, pair.train, cfg);
        const std::vector<double> after = parameter_vector(rec.network);
        double max_delta = 0.0;
        for (std::size_t i = 0; i < before.size(); ++i) {
            max_delta = std::max(max_delta, std::abs(after[i] - before[i]));
        }
        CHECK(max_delta < 1e-9);
    }

    SECTION("negative loss weight trains by ascent") {
        TrainConfig cfg;
        cfg.epochs = 5;
        cfg.batch_size = 8;
        cfg.learning_rate = 0.05;
        cfg.loss_weight = -1.0;
        RunRecord rec = train_supervised(small_net(), pair.train, cfg);
        CHECK(rec.epoch_loss.back() > rec.epoch_loss.front());
    }
}

TEST_CASE("labels_override replaces the dataset labels for the view") {
    auto pair = two_blobs();
    const auto idx = all_indices(pair.train);
    std::vector<int> flipped(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) flipped[i] = 1 - pair.train.labels[idx[i]];

    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.1;
    RunRecord rec = train_supervised(small_net(), pair.train, idx, &flipped, cfg);
    // the net now predicts the flipped labels, so true-label accuracy collapses
    CHECK(evaluate_accuracy(rec.network, pair.train) == 0.0);
    CHECK(rec.epoch_accuracy.back() == 1.0);  // measured against the override

    std::vector<int> wrong_len = {0, 1};
    CHECK_THROWS_AS(train_supervised(small_net(), pair.train, idx, &wrong_len, cfg),
                    std::invalid_argument);
}

TEST_CASE("non-finite values abort with step diagnostics") {
    auto pair = two_blobs();
    Network net = small_net();
    net.blocks[0].w.data[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    try {
        train_supervised(net, pair.train, cfg);
        FAIL("expected NumericalAbort");
    } catch (const NumericalAbort& e) {
        CHECK(e.epoch == 0);
        CHECK(e.step == 0);
        CHECK(e.last_state.has_value());
    }
}

TEST_CASE("config validation rejects bad settings") {
    auto pair = two_blobs();
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(train_supervised(small_net(), pair.train, cfg), std::invalid_argument);
    cfg.epochs = 1;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(train_supervised(small_net(), pair.train, cfg), std::invalid_argument);
    cfg.learning_rate = 0.1;
    cfg.l2 = -1.0;
    CHECK_THROWS_AS(train_supervised(small_net(), pair.train, cfg), std::invalid_argument);
    cfg.l2 = 0.0;
    CHECK_THROWS_AS(train_supervised(small_net(), pair.train, {}, nullptr, cfg),
                    std::invalid_argument);
}
