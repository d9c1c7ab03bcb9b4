#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <cstdio>
#include <string>

#include "pgnn/encoder.hpp"
#include "pgnn/serialize.hpp"
#include "pgnn/tensor.hpp"

using namespace pgnn;

namespace {

EncoderParams make_params(unsigned seed, EncoderConfig cfg = {}) {
    std::mt19937_64 rng(seed);
    return EncoderParams::init(cfg, rng);
}

} // namespace

TEST_CASE("embed output shape follows channels and pooling") {
    auto p = make_params(11);
    Tensor img = Tensor::zeros({3, 16, 16});
    Tensor f = embed(p, img);
    REQUIRE(f.shape() == Shape{16, 8, 8});

    EncoderConfig unpooled;
    unpooled.pool_window = 1;
    auto q = make_params(11, unpooled);
    REQUIRE(embed(q, img).shape() == Shape{16, 16, 16});
}

TEST_CASE("zero image propagates biases only") {
    auto p = make_params(3);
    Tensor img = Tensor::zeros({3, 16, 16});
    // Fresh params have zero biases, so every activation stays zero.
    Tensor f = embed(p, img);
    for (double v : f.data()) CHECK(v == 0.0);

    // A bias on the last conv layer sees an all-zero input, so the output
    // is the rectified bias, constant across each channel plane.
    auto& last = p.conv_biases.back().mutable_data();
    for (std::size_t c = 0; c < last.size(); ++c)
        last[c] = 0.25 * static_cast<double>(c) - 0.5;
    Tensor g = embed(p, img);
    const std::size_t hw = g.shape()[1] * g.shape()[2];
    for (std::size_t c = 0; c < g.shape()[0]; ++c) {
        const double expected = std::max(last[c], 0.0);
        for (std::size_t i = 0; i < hw; ++i)
            CHECK(g.data()[c * hw + i] == expected);
    }
}

TEST_CASE("embed validates input shape and size") {
    auto p = make_params(5);
    CHECK_THROWS_AS(embed(p, Tensor::zeros({1, 16, 16})), std::invalid_argument);
    CHECK_THROWS_AS(embed(p, Tensor::zeros({3, 16})), std::invalid_argument);
    CHECK_THROWS_AS(embed(p, Tensor::zeros({3, 7, 16})), std::invalid_argument);
}

TEST_CASE("embed gradient w.r.t. kernels passes finite differences") {
    EncoderConfig cfg;
    cfg.conv_channels = {2, 2};
    cfg.num_classes = 2;
    auto p = make_params(17, cfg);
    std::mt19937_64 rng(23);
    Tensor img = Tensor::uniform({3, 8, 8}, 0.0, 1.0, rng);

    Tensor loss = sum(embed(p, img));
    backward(loss);

    // finite_diff_grad perturbs the tensor's shared storage in place, so the
    // closure just re-runs the forward pass with the live parameters.
    Tensor k0 = p.conv_kernels[0];
    auto fd = finite_diff_grad(
        [&](const Tensor&) { return sum(embed(p, img)).item(); }, k0);
    REQUIRE(k0.has_grad());
    for (std::size_t i = 0; i < fd.size(); ++i) {
        const double got = k0.grad()[i];
        const double want = fd.data()[i];
        if (std::abs(want) >= 1e-3)
            CHECK(std::abs(got - want) / std::abs(want) <= 1e-4);
        else
            CHECK(std::abs(got - want) <= 1e-6);
    }
}

TEST_CASE("classify of zero features and zero weights gives 0.5 probability") {
    auto p = make_params(7);
    auto& w = p.classifier_weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    Tensor logits = classify(p, Tensor::zeros({16, 8, 8}));
    REQUIRE(logits.shape() == Shape{4});
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(logits.at(c) == 0.0);
        CHECK(sigmoid(logits).at(c) == doctest::Approx(0.5));
    }
}

TEST_CASE("single-channel constant feature yields the raw weight as logit") {
    EncoderConfig cfg;
    cfg.conv_channels = {1};
    cfg.num_classes = 1;
    auto p = make_params(9, cfg);
    p.classifier_weight = Tensor::from_data({1, 1, 1, 1}, {-0.37});
    Tensor logits = classify(p, Tensor::ones({1, 8, 8}));
    CHECK(logits.at(0) == doctest::Approx(-0.37).epsilon(1e-12));
}

TEST_CASE("per-class scores are independent sigmoids") {
    auto p = make_params(13);
    auto& w = p.classifier_weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    const double row[4] = {2.0, 1.5, -1.0, -2.0};
    for (std::size_t c = 0; c < 4; ++c) w[c * 16] = row[c]; // channel 0 only
    Tensor probs = sigmoid(classify(p, Tensor::ones({16, 8, 8})));
    CHECK(probs.at(0) > 0.5);
    CHECK(probs.at(1) > 0.5); // two classes above 0.5 at once
    CHECK(probs.at(2) < 0.5);
}

TEST_CASE("spatial mean of each class map equals the classify logit") {
    auto p = make_params(19);
    std::mt19937_64 rng(29);
    Tensor img = Tensor::uniform({3, 16, 16}, 0.0, 1.0, rng);
    Tensor f = embed(p, img);
    Tensor maps = cam(p, f);
    Tensor logits = classify(p, f);
    REQUIRE(maps.shape()[0] == 4);
    const std::size_t hw = maps.shape()[1] * maps.shape()[2];
    for (std::size_t c = 0; c < 4; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += maps.data()[c * hw + i];
        CHECK(std::abs(s / static_cast<double>(hw) - logits.at(c)) <= 1e-9);
    }
}

TEST_CASE("cam rejects mismatched feature channels") {
    auto p = make_params(21);
    CHECK_THROWS_AS(cam(p, Tensor::zeros({5, 8, 8})), std::invalid_argument);
}

TEST_CASE("unpooled embedding is translation-consistent in the interior") {
    EncoderConfig cfg;
    cfg.pool_window = 1;
    auto p = make_params(31, cfg);
    std::mt19937_64 rng(37);
    Tensor img = Tensor::uniform({3, 12, 12}, 0.0, 1.0, rng);

    // Shift the image right by one pixel, zero-filling the first column.
    std::vector<double> shifted(img.size(), 0.0);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 12; ++i)
            for (std::size_t j = 1; j < 12; ++j)
                shifted[(c * 12 + i) * 12 + j] = img.data()[(c * 12 + i) * 12 + j - 1];
    Tensor img2 = Tensor::from_data({3, 12, 12}, std::move(shifted));

    Tensor f1 = embed(p, img);
    Tensor f2 = embed(p, img2);
    // Three stacked 3x3 convs see a 3-pixel halo; stay clear of it.
    const std::size_t C = f1.shape()[0];
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 3; i < 9; ++i)
            for (std::size_t j = 4; j < 9; ++j)
                CHECK(f2.at(c, i, j) == f1.at(c, i, j - 1));
}

TEST_CASE("parameter init is seed-deterministic and checkpoints round trip") {
    auto a = make_params(41);
    auto b = make_params(41);
    auto na = a.named_parameters();
    auto nb = b.named_parameters();
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK(na[i].first == nb[i].first);
        CHECK(na[i].second.data() == nb[i].second.data());
    }

    Checkpoint ck;
    for (const auto& [name, t] : na) ck.add(name, t);
    const std::string path = "encoder_roundtrip.ckpt";
    ck.save(path);
    Checkpoint back = Checkpoint::load(path);
    std::remove(path.c_str());
    for (const auto& [name, t] : na)
        CHECK(back.get(name).data() == t.data());
}
