#include <doctest.h>

#include <cmath>

#include "dvit/grad_check.hpp"
#include "dvit/ops.hpp"

using namespace dvit;

TEST_SUITE_BEGIN("grad_check");

namespace {

Tensor64 random64(Shape shape, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return Tensor64::randn(std::move(shape), rng, stddev);
}

/// Weighted sum turns any tensor-valued op into a scalar function with
/// non-degenerate output gradients.
Tensor64 weighted_sum(const Tensor64& y, std::uint64_t seed) {
    Rng rng(seed ^ 0xabcdef);
    Tensor64 w = Tensor64::randn(y.shape(), rng);
    return sum(mul(y, w));
}

}  // namespace

TEST_CASE("linear function has exactly zero finite-difference error") {
    auto f = [](const Tensor64& x) { return sum(x); };
    const auto result = grad_check(f, random64({4, 4}, 0));
    CHECK(result.passed);
    CHECK(result.max_rel_err == 0.0);
}

TEST_CASE("a deliberately wrong backward is caught") {
    auto f = [](const Tensor64& x) {
        // forward 2x, but backward claims d/dx = 5
        Tensor64 y = custom_unary<double>(
            x, [](double v) { return 2.0 * v; }, [](double, double) { return 5.0; });
        return sum(y);
    };
    CHECK_FALSE(grad_check(f, random64({3, 3}, 1)).passed);
}

TEST_CASE("per-op gradients match central differences over 10 seeds") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        {
            Tensor64 b = random64({4, 5}, seed + 100);
            auto f = [&](const Tensor64& a) { return sum(matmul(a, b)); };
            const auto r = grad_check(f, random64({3, 4}, seed));
            CHECK_MESSAGE(r.passed, "matmul wrt a: ", r.summary());
        }
        {
            Tensor64 a = random64({3, 4}, seed + 200);
            auto f = [&](const Tensor64& b) { return sum(matmul(a, b)); };
            const auto r = grad_check(f, random64({4, 5}, seed + 1));
            CHECK_MESSAGE(r.passed, "matmul wrt b: ", r.summary());
        }
        {
            auto f = [&](const Tensor64& x) { return weighted_sum(softmax(x, 1), seed); };
            const auto r = grad_check(f, random64({4, 6}, seed + 2));
            CHECK_MESSAGE(r.passed, "softmax: ", r.summary());
        }
        {
            Tensor64 gamma = random64({8}, seed + 300, 0.5);
            Tensor64 beta = random64({8}, seed + 301, 0.5);
            auto f = [&](const Tensor64& x) { return weighted_sum(layer_norm(x, gamma, beta), seed); };
            const auto r = grad_check(f, random64({4, 8}, seed + 3));
            CHECK_MESSAGE(r.passed, "layer_norm wrt x: ", r.summary());
        }
        {
            Tensor64 x = random64({4, 8}, seed + 400);
            Tensor64 beta = random64({8}, seed + 401, 0.5);
            auto f = [&](const Tensor64& gamma) { return weighted_sum(layer_norm(x, gamma, beta), seed); };
            const auto r = grad_check(f, random64({8}, seed + 4));
            CHECK_MESSAGE(r.passed, "layer_norm wrt gamma: ", r.summary());
        }
        {
            auto f = [&](const Tensor64& x) { return weighted_sum(gelu(x), seed); };
            const auto r = grad_check(f, random64({6, 6}, seed + 5));
            CHECK_MESSAGE(r.passed, "gelu: ", r.summary());
        }
        {
            auto f = [&](const Tensor64& x) { return weighted_sum(sigmoid(x), seed); };
            const auto r = grad_check(f, random64({6, 6}, seed + 6));
            CHECK_MESSAGE(r.passed, "sigmoid: ", r.summary());
        }
        {
            auto f = [&](const Tensor64& x) { return weighted_sum(l2_normalize(x), seed); };
            const auto r = grad_check(f, random64({5, 7}, seed + 7));
            CHECK_MESSAGE(r.passed, "l2_normalize: ", r.summary());
        }
        {
            const std::vector<std::int64_t> targets{0, 2, 1};
            auto f = [&](const Tensor64& logits) { return cross_entropy(logits, targets); };
            const auto r = grad_check(f, random64({3, 4}, seed + 8));
            CHECK_MESSAGE(r.passed, "cross_entropy: ", r.summary());
        }
        {
            Tensor64 w = random64({2, 3, 3, 3}, seed + 500, 0.3);
            Tensor64 bias = random64({3}, seed + 501, 0.3);
            auto f = [&](const Tensor64& x) {
                return weighted_sum(conv_transpose2d_s2(x, w, bias), seed);
            };
            const auto r = grad_check(f, random64({1, 2, 3, 3}, seed + 9));
            CHECK_MESSAGE(r.passed, "conv_transpose2d wrt x: ", r.summary());
        }
        {
            Tensor64 x = random64({1, 2, 3, 3}, seed + 600);
            Tensor64 bias = random64({3}, seed + 601, 0.3);
            auto f = [&](const Tensor64& w) {
                return weighted_sum(conv_transpose2d_s2(x, w, bias), seed);
            };
            const auto r = grad_check(f, random64({2, 3, 3, 3}, seed + 10, 0.3));
            CHECK_MESSAGE(r.passed, "conv_transpose2d wrt w: ", r.summary());
        }
        {
            auto f = [&](const Tensor64& x) { return weighted_sum(bilinear_upsample(x, 7, 9), seed); };
            const auto r = grad_check(f, random64({1, 2, 3, 4}, seed + 11));
            CHECK_MESSAGE(r.passed, "bilinear_upsample: ", r.summary());
        }
        {
            // composite through shape ops
            auto f = [&](const Tensor64& x) {
                Tensor64 t = transpose(reshape(x, {2, 3, 4}), 1, 2);
                Tensor64 parts = concat(slice(t, 1, 0, 2), slice(t, 1, 2, 2), 1);
                return weighted_sum(gelu(parts), seed);
            };
            const auto r = grad_check(f, random64({24}, seed + 12));
            CHECK_MESSAGE(r.passed, "shape composite: ", r.summary());
        }
    }
}

TEST_CASE("chained gelu after matmul matches finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Tensor64 w = random64({5, 4}, seed + 700);
        auto f = [&](const Tensor64& x) { return sum(gelu(matmul(x, w))); };
        const auto r = grad_check(f, random64({3, 5}, seed + 13));
        CHECK_MESSAGE(r.passed, r.summary());
    }
}

TEST_SUITE_END();
