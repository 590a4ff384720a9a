#include "doctest.h"

#include <cmath>
#include <random>
#include <stdexcept>

#include "oracles.hpp"
#include "whittle/ops.hpp"
#include "whittle/tensor.hpp"

using namespace whittle::ndgrad;
using oracles::grad_check;
using oracles::random_vec;

namespace {

// Values bounded away from zero so finite differences never straddle the
// relu kink.
std::vector<float> random_vec_off_kink(size_t n, std::mt19937& rng) {
    std::uniform_real_distribution<float> mag(0.05f, 1.0f);
    std::bernoulli_distribution sign(0.5);
    std::vector<float> v(n);
    for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    return v;
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 against 3x3 kernel sums to 9") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor y = conv2d(x, w, 1, 0);
    CHECK(y.shape() == std::vector<int64_t>{1, 1, 1, 1});
    CHECK(y.at(0) == doctest::Approx(9.0f));
}

TEST_CASE("conv2d: zero kernel gives zero output") {
    std::mt19937 rng(7);
    Tensor x = Tensor::from({2, 3, 5, 5}, random_vec(2 * 3 * 5 * 5, rng));
    Tensor w = Tensor::zeros({4, 3, 3, 3});
    Tensor y = conv2d(x, w, 1, 1);
    for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("conv2d matches the nested-loop reference on random draws") {
    std::mt19937 rng(11);
    for (int draw = 0; draw < 50; ++draw) {
        std::uniform_int_distribution<int64_t> d_n(1, 2), d_c(1, 3), d_hw(3, 6);
        const int64_t N = d_n(rng), Cin = d_c(rng), Cout = d_c(rng);
        const int64_t H = d_hw(rng), W = d_hw(rng);
        const int64_t k = (rng() % 2) ? 3 : 1;
        const int stride = (rng() % 2) ? 2 : 1;
        const int padding = (rng() % 2) ? 1 : 0;
        if (k > H + 2 * padding || k > W + 2 * padding) continue;
        auto xv = random_vec(static_cast<size_t>(N * Cin * H * W), rng);
        auto wv = random_vec(static_cast<size_t>(Cout * Cin * k * k), rng);
        Tensor x = Tensor::from({N, Cin, H, W}, xv);
        Tensor w = Tensor::from({Cout, Cin, k, k}, wv);
        Tensor y = conv2d(x, w, stride, padding);
        auto ref = oracles::conv2d_loops(xv, N, Cin, H, W, wv, Cout, k, stride, padding);
        REQUIRE(y.data().size() == ref.size());
        for (size_t i = 0; i < ref.size(); ++i) {
            CHECK(y.at(static_cast<int64_t>(i)) == doctest::Approx(ref[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("conv2d rejects mismatched channels and bad geometry") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 3, 3, 3}), 1, 0), std::runtime_error);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 7, 7}), 1, 0), std::runtime_error);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), 0, 0), std::runtime_error);
}

TEST_CASE("batchnorm: constant channels normalize to zero in train mode") {
    Tensor x = Tensor::from({2, 2, 2, 2}, {3, 3, 3, 3, -1, -1, -1, -1,
                                           3, 3, 3, 3, -1, -1, -1, -1});
    Tensor gamma = Tensor::full({2}, 1.0f);
    Tensor beta = Tensor::zeros({2});
    Tensor rm = Tensor::zeros({2});
    Tensor rv = Tensor::full({2}, 1.0f);
    Tensor y = batchnorm(x, gamma, beta, rm, rv, true);
    for (float v : y.data()) CHECK(std::abs(v) < 1e-2f);  // 0 / sqrt(eps) stays 0
}

TEST_CASE("batchnorm: zero gamma pins every output to beta") {
    std::mt19937 rng(3);
    Tensor x = Tensor::from({2, 3, 4, 4}, random_vec(2 * 3 * 4 * 4, rng));
    Tensor gamma = Tensor::zeros({3});
    Tensor beta = Tensor::from({3}, {0.5f, -1.0f, 2.0f});
    Tensor rm = Tensor::zeros({3});
    Tensor rv = Tensor::full({3}, 1.0f);
    Tensor y = batchnorm(x, gamma, beta, rm, rv, true);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t s = 0; s < 16; ++s)
                CHECK(y.at((n * 3 + c) * 16 + s) == doctest::Approx(beta.at(c)));
}

TEST_CASE("batchnorm: train-mode output has mean beta and std |gamma|") {
    std::mt19937 rng(5);
    Tensor x = Tensor::from({4, 2, 5, 5}, random_vec(4 * 2 * 5 * 5, rng, -2.0f, 2.0f));
    Tensor gamma = Tensor::from({2}, {1.5f, -0.7f});
    Tensor beta = Tensor::from({2}, {0.3f, -0.2f});
    Tensor rm = Tensor::zeros({2});
    Tensor rv = Tensor::full({2}, 1.0f);
    Tensor y = batchnorm(x, gamma, beta, rm, rv, true);
    const int64_t M = 4 * 25;
    for (int64_t c = 0; c < 2; ++c) {
        double m = 0.0, v = 0.0;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t s = 0; s < 25; ++s) m += y.at((n * 2 + c) * 25 + s);
        m /= M;
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t s = 0; s < 25; ++s) {
                const double d = y.at((n * 2 + c) * 25 + s) - m;
                v += d * d;
            }
        v /= M;
        CHECK(m == doctest::Approx(beta.at(c)).epsilon(1e-4));
        CHECK(std::sqrt(v) == doctest::Approx(std::abs(gamma.at(c))).epsilon(1e-4));
    }
}

TEST_CASE("batchnorm: eval mode reads running stats and train mode updates them") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor gamma = Tensor::full({1}, 1.0f);
    Tensor beta = Tensor::zeros({1});
    Tensor rm = Tensor::zeros({1});
    Tensor rv = Tensor::full({1}, 1.0f);
    batchnorm(x, gamma, beta, rm, rv, true, 0.1);
    // batch mean 2.5, biased var 1.25, unbiased 5/3
    CHECK(rm.at(0) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(rv.at(0) == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0).epsilon(1e-5));

    Tensor y = batchnorm(x, gamma, beta, rm, rv, false);
    const double inv = 1.0 / std::sqrt(rv.at(0) + 1e-5);
    CHECK(y.at(0) == doctest::Approx((1.0 - rm.at(0)) * inv).epsilon(1e-5));
}

TEST_CASE("relu clamps negatives and keeps positives") {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor y = relu(x);
    CHECK(y.at(0) == 0.0f);
    CHECK(y.at(1) == 0.0f);
    CHECK(y.at(2) == 2.0f);

    Tensor neg = Tensor::from({4}, {-5, -0.1f, -2, -9});
    Tensor clamped = relu(neg);
    for (float v : clamped.data()) CHECK(v == 0.0f);
}

TEST_CASE("relu gradient is 1 above zero and 0 at or below zero") {
    Tensor x = Tensor::from({3}, {3.0f, -3.0f, 0.0f}, true);
    backward(sum(relu(x)));
    CHECK(x.grad()[0] == 1.0f);
    CHECK(x.grad()[1] == 0.0f);
    CHECK(x.grad()[2] == 0.0f);
}

TEST_CASE("linear: identity weight and zero bias reproduce the input") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = Tensor::zeros({3});
    Tensor y = linear(x, w, b);
    for (size_t i = 0; i < 6; ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("linear: zero input broadcasts the bias") {
    Tensor x = Tensor::zeros({3, 4});
    Tensor w = Tensor::zeros({2, 4});
    Tensor b = Tensor::from({2}, {0.5f, -2.0f});
    Tensor y = linear(x, w, b);
    for (int64_t n = 0; n < 3; ++n) {
        CHECK(y.at(n * 2 + 0) == 0.5f);
        CHECK(y.at(n * 2 + 1) == -2.0f);
    }
}

TEST_CASE("linear matches the triple-loop reference") {
    std::mt19937 rng(13);
    auto xv = random_vec(2 * 3, rng);
    auto wv = random_vec(4 * 3, rng);
    auto bv = random_vec(4, rng);
    Tensor y = linear(Tensor::from({2, 3}, xv), Tensor::from({4, 3}, wv), Tensor::from({4}, bv));
    auto ref = oracles::matmul_loops(xv, 2, 3, wv, 4, bv);
    for (size_t i = 0; i < ref.size(); ++i) {
        CHECK(y.at(static_cast<int64_t>(i)) == doctest::Approx(ref[i]).epsilon(1e-6));
    }
}

TEST_CASE("softmax_cross_entropy: uniform logits over 10 classes give ln 10") {
    Tensor logits = Tensor::full({3, 10}, 0.42f);
    Tensor loss = softmax_cross_entropy(logits, {0, 5, 9});
    CHECK(loss.value() == doctest::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("softmax_cross_entropy: a huge true-class logit drives loss to 0") {
    Tensor logits = Tensor::zeros({1, 5});
    logits.data()[2] = 1e4f;
    Tensor loss = softmax_cross_entropy(logits, {2});
    CHECK(loss.value() == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("softmax_cross_entropy rejects out-of-range labels") {
    Tensor logits = Tensor::zeros({2, 4});
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 4}), std::runtime_error);
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {-1, 0}), std::runtime_error);
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {1}), std::runtime_error);
}

TEST_CASE("softmax_cross_entropy gradient matches finite differences") {
    std::mt19937 rng(17);
    Tensor logits = Tensor::from({4, 5}, random_vec(20, rng), true);
    std::vector<int> labels = {1, 0, 4, 2};
    auto res = grad_check([&] { return softmax_cross_entropy(logits, labels); }, {logits});
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("every primitive passes finite-difference gradient checks, 100 seeds") {
    double worst = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937 rng(1000 + seed);
        // elementwise arithmetic
        {
            Tensor a = Tensor::from({3, 4}, random_vec(12, rng), true);
            Tensor b = Tensor::from({3, 4}, random_vec(12, rng), true);
            auto res = grad_check(
                [&] { return mean(mul(add(a, b), sub(a, b))); }, {a, b});
            worst = std::max(worst, res.max_rel_err);
        }
        // relu (inputs bounded away from the kink)
        {
            Tensor x = Tensor::from({10}, random_vec_off_kink(10, rng), true);
            auto res = grad_check([&] { return mean(mul(relu(x), relu(x))); }, {x});
            worst = std::max(worst, res.max_rel_err);
        }
        // conv2d
        {
            Tensor x = Tensor::from({2, 2, 4, 4}, random_vec(64, rng), true);
            Tensor w = Tensor::from({3, 2, 3, 3}, random_vec(54, rng), true);
            auto res = grad_check([&] {
                Tensor y = conv2d(x, w, 1, 1);
                return mean(mul(y, y));
            }, {x, w});
            worst = std::max(worst, res.max_rel_err);
        }
        // batchnorm, train mode; the loss weights the output by a fixed random
        // tensor so the x gradient does not vanish by symmetry
        {
            Tensor x = Tensor::from({2, 3, 3, 3}, random_vec(54, rng), true);
            Tensor gamma = Tensor::from({3}, random_vec(3, rng, 0.5f, 1.5f), true);
            Tensor beta = Tensor::from({3}, random_vec(3, rng), true);
            Tensor r = Tensor::from({2, 3, 3, 3}, random_vec(54, rng));
            Tensor rm = Tensor::zeros({3});
            Tensor rv = Tensor::full({3}, 1.0f);
            auto res = grad_check([&] {
                Tensor y = batchnorm(x, gamma, beta, rm, rv, true);
                return mean(mul(y, r));
            }, {x, gamma, beta});
            worst = std::max(worst, res.max_rel_err);
        }
        // linear
        {
            Tensor x = Tensor::from({2, 3}, random_vec(6, rng), true);
            Tensor w = Tensor::from({4, 3}, random_vec(12, rng), true);
            Tensor b = Tensor::from({4}, random_vec(4, rng), true);
            auto res = grad_check([&] {
                Tensor y = linear(x, w, b);
                return mean(mul(y, y));
            }, {x, w, b});
            worst = std::max(worst, res.max_rel_err);
        }
        // scale_channels
        {
            Tensor x = Tensor::from({2, 3, 2, 2}, random_vec(24, rng), true);
            Tensor s = Tensor::from({3}, random_vec(3, rng), true);
            auto res = grad_check([&] {
                Tensor y = scale_channels(x, s);
                return mean(mul(y, y));
            }, {x, s});
            worst = std::max(worst, res.max_rel_err);
        }
        // global_avg_pool
        {
            Tensor x = Tensor::from({2, 3, 3, 3}, random_vec(54, rng), true);
            auto res = grad_check([&] {
                Tensor y = global_avg_pool(x);
                return mean(mul(y, y));
            }, {x});
            worst = std::max(worst, res.max_rel_err);
        }
        // softmax cross entropy
        {
            Tensor logits = Tensor::from({3, 4}, random_vec(12, rng), true);
            auto res = grad_check(
                [&] { return softmax_cross_entropy(logits, {0, 3, 1}); }, {logits});
            worst = std::max(worst, res.max_rel_err);
        }
        // map_unary with a smooth function
        {
            Tensor x = Tensor::from({8}, random_vec(8, rng), true);
            auto res = grad_check([&] {
                Tensor y = map_unary(
                    x, [](double v) { return std::tanh(v); },
                    [](double v) { const double t = std::tanh(v); return 1.0 - t * t; },
                    "tanh");
                return mean(mul(y, y));
            }, {x});
            worst = std::max(worst, res.max_rel_err);
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("composite conv->bn->relu->linear->CE gradients match finite differences") {
    std::mt19937 rng(23);
    Tensor x = Tensor::from({2, 1, 6, 6}, random_vec(72, rng));
    Tensor w1 = Tensor::from({4, 1, 3, 3}, random_vec(36, rng, -0.5f, 0.5f), true);
    Tensor gamma = Tensor::from({4}, random_vec(4, rng, 0.8f, 1.2f), true);
    Tensor beta = Tensor::from({4}, random_vec(4, rng, -0.1f, 0.1f), true);
    Tensor rm = Tensor::zeros({4});
    Tensor rv = Tensor::full({4}, 1.0f);
    Tensor w2 = Tensor::from({3, 4}, random_vec(12, rng, -0.5f, 0.5f), true);
    Tensor b2 = Tensor::from({3}, random_vec(3, rng, -0.1f, 0.1f), true);
    std::vector<int> labels = {0, 2};
    auto loss_fn = [&] {
        Tensor h = conv2d(x, w1, 2, 1);
        h = batchnorm(h, gamma, beta, rm, rv, true);
        h = relu(h);
        h = global_avg_pool(h);
        Tensor logits = linear(h, w2, b2);
        return softmax_cross_entropy(logits, labels);
    };
    auto res = grad_check(loss_fn, {w1, gamma, beta, w2, b2});
    CHECK(res.max_rel_err < 1e-3);
    CHECK(res.checked == 36 + 4 + 4 + 12 + 3);
}

TEST_CASE("identical seeds give bitwise-identical forward and backward results") {
    auto run = [] {
        std::mt19937 rng(99);
        Tensor x = Tensor::from({2, 2, 5, 5}, random_vec(100, rng));
        Tensor w = Tensor::from({3, 2, 3, 3}, random_vec(54, rng), true);
        Tensor y = conv2d(x, w, 1, 1);
        Tensor loss = mean(mul(y, y));
        backward(loss);
        std::vector<float> out = y.data();
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        out.push_back(static_cast<float>(loss.value()));
        return out;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("sum and mean reductions keep a 64-bit readout") {
    std::vector<float> vals(1000, 0.1f);
    Tensor x = Tensor::from({1000}, vals);
    double ref = 0.0;
    for (float v : vals) ref += v;
    CHECK(sum(x).value() == ref);
    CHECK(mean(x).value() == ref / 1000.0);
}

TEST_CASE("reshape views the same values and routes gradients back") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor y = reshape(x, {3, 2});
    CHECK(y.at(4) == 5.0f);
    CHECK_THROWS_AS(reshape(x, {4, 2}), std::runtime_error);
    backward(sum(mul(y, y)));
    for (size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0f * x.at(i)));
}

TEST_CASE("argmax_rows picks the first maximal logit") {
    Tensor t = Tensor::from({2, 3}, {1, 3, 3, -1, -5, -2});
    auto idx = argmax_rows(t);
    CHECK(idx[0] == 1);
    CHECK(idx[1] == 0);
}
