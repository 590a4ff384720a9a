#include "doctest.h"

#include <stdexcept>

#include "whittle/ops.hpp"
#include "whittle/tensor.hpp"

using namespace whittle::ndgrad;

TEST_CASE("tensor factories check shape/data consistency") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.at(5) == 0.0f);

    Tensor f = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(f.at(3) == 4.0f);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), std::runtime_error);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), std::runtime_error);
}

TEST_CASE("scalar tensors keep their exact double value") {
    Tensor s = Tensor::scalar(0.1234567890123456789);
    CHECK(s.value() == doctest::Approx(0.1234567890123456789).epsilon(1e-15));
    Tensor v = Tensor::from({3}, {1, 2, 3});
    CHECK_THROWS_AS(v.value(), std::runtime_error);
}

TEST_CASE("loss = sum(x) gives all-ones gradient") {
    Tensor x = Tensor::from({4}, {1, -2, 3, -4}, true);
    Tensor loss = sum(x);
    backward(loss);
    for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("loss = sum(x*x)/2 gives grad = x") {
    Tensor x = Tensor::from({5}, {0.5f, -1.5f, 2.0f, 0.0f, -3.0f}, true);
    Tensor loss = scalar_mul(sum(mul(x, x)), 0.5);
    backward(loss);
    for (size_t i = 0; i < x.data().size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(x.at(i)).epsilon(1e-6));
    }
}

TEST_CASE("backward rejects non-scalar losses and consumed tapes") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), std::runtime_error);

    Tensor loss = sum(y);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), std::runtime_error);
}

TEST_CASE("gradients accumulate exactly once per leaf on a diamond graph") {
    // loss = sum(x*x + x*x) -> dloss/dx = 4x
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    Tensor sq = mul(x, x);
    Tensor loss = sum(add(sq, sq));
    backward(loss);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(x.grad()[i] == doctest::Approx(4.0f * x.at(i)).epsilon(1e-6));
    }
}

TEST_CASE("NoGrad suppresses tape recording") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y;
    {
        NoGrad guard;
        y = sum(mul(x, x));
    }
    CHECK(!y.requires_grad());
    CHECK_THROWS_AS(backward(y), std::runtime_error);
}

TEST_CASE("non-finite primitive outputs are an error, not a NaN state") {
    Tensor x = Tensor::from({1}, {1e30f});
    CHECK_THROWS_AS(mul(x, x), std::runtime_error);
}
