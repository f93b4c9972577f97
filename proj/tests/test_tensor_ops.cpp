#include <doctest.h>

#include <cmath>

#include "dvit/grad_check.hpp"
#include "dvit/ops.hpp"
#include "test_util.hpp"

using namespace dvit;

TEST_SUITE_BEGIN("tensor_ops");

TEST_CASE("tensor invariants") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeMismatch);
    CHECK_THROWS_AS(t.item(), NotScalar);
    CHECK(Tensor::scalar(4.0f).item() == 4.0f);
}

TEST_CASE("matmul identity leaves operand unchanged") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = matmul(eye, x);
    CHECK(testutil::bitwise_equal(y, x));
}

TEST_CASE("matmul hand arithmetic") {
    Tensor a = Tensor::from_data({1, 2}, {1, 2});
    Tensor b = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(a, b).data()[0] == doctest::Approx(11).epsilon(0));
}

TEST_CASE("matmul rejects mismatched inner dims") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeMismatch);
}

TEST_CASE("matmul broadcasts a shared weight over the batch") {
    Rng rng(7);
    Tensor x = Tensor::randn({2, 3, 4}, rng);
    Tensor w = Tensor::randn({4, 5}, rng);
    Tensor y = matmul(x, w);
    REQUIRE(y.shape() == Shape{2, 3, 5});
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) {
                float acc = 0;
                for (int k = 0; k < 4; ++k)
                    acc += x.data()[(b * 3 + i) * 4 + k] * w.data()[k * 5 + j];
                CHECK(y.data()[(b * 3 + i) * 5 + j] == doctest::Approx(acc).epsilon(1e-6));
            }
}

TEST_CASE("softmax of a uniform slice is uniform") {
    Tensor x = Tensor::from_data({3}, {0.7f, 0.7f, 0.7f});
    for (float v : softmax(x, 0).data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-7));
}

TEST_CASE("softmax is shift invariant") {
    Rng rng(3);
    Tensor x = Tensor::randn({4, 5}, rng);
    Tensor shifted = add_scalar(x, 123.25f);
    Tensor a = softmax(x, 1);
    Tensor b = softmax(shifted, 1);
    for (std::size_t i = 0; i < a.data().size(); ++i)
        CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-6));
}

TEST_CASE("softmax closed form [0, ln 3]") {
    Tensor x = Tensor::from_data({2}, {0.0f, std::log(3.0f)});
    Tensor y = softmax(x, 0);
    CHECK(y.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one and lie in [0,1]") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor x = Tensor::randn({4, 7}, rng, 3.0f);
        Tensor y = softmax(x, 1);
        for (int r = 0; r < 4; ++r) {
            float total = 0;
            for (int c = 0; c < 7; ++c) {
                const float v = y.data()[r * 7 + c];
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
                total += v;
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("layer_norm collapses a constant vector to zero") {
    Tensor x = Tensor::filled({2, 4}, 3.5f);
    Tensor gamma = Tensor::ones({4});
    Tensor beta = Tensor::zeros({4});
    for (float v : layer_norm(x, gamma, beta).data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("layer_norm standardizes random rows") {
    Rng rng(11);
    Tensor x = Tensor::randn({3, 64}, rng, 2.0f);
    Tensor y = layer_norm(x, Tensor::ones({64}), Tensor::zeros({64}));
    for (int r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (int i = 0; i < 64; ++i) mean += y.data()[r * 64 + i];
        mean /= 64;
        for (int i = 0; i < 64; ++i) {
            const double c = y.data()[r * 64 + i] - mean;
            var += c * c;
        }
        var /= 64;
        CHECK(std::fabs(mean) < 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("gelu fixed points") {
    Tensor x = Tensor::from_data({3}, {0.0f, 10.0f, 1.0f});
    Tensor y = gelu(x);
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == doctest::Approx(10.0).epsilon(1e-6));
    CHECK(y.data()[2] == doctest::Approx(0.8413447461).epsilon(1e-5));  // Phi(1) * 1
}

TEST_CASE("l2_normalize hand case and fixed points") {
    Tensor x = Tensor::from_data({2}, {3, 4});
    Tensor y = l2_normalize(x);
    CHECK(y.data()[0] == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(0.8).epsilon(1e-6));

    Tensor unit = Tensor::from_data({2}, {1, 0});
    CHECK(testutil::bitwise_equal(l2_normalize(unit), unit));

    Tensor zero = Tensor::zeros({4});
    CHECK(testutil::bitwise_equal(l2_normalize(zero), zero));  // eps path
}

TEST_CASE("cross_entropy closed forms") {
    Tensor uniform = Tensor::zeros({1, 4});
    CHECK(cross_entropy(uniform, {2}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    Tensor confident = Tensor::from_data({1, 3}, {100.0f, 0.0f, 0.0f});
    CHECK(cross_entropy(confident, {0}).item() == doctest::Approx(0.0).epsilon(1e-6));

    Tensor two = Tensor::from_data({1, 2}, {0.0f, std::log(3.0f)});
    CHECK(cross_entropy(two, {0}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("cross_entropy validates targets and honors ignore_index") {
    Tensor logits = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(cross_entropy(logits, {0, 5}), InvalidTarget);
    // one position ignored: the mean covers only the other
    Tensor skewed = Tensor::from_data({2, 2}, {0, 0, 100, 0});
    const float loss = cross_entropy(skewed, {0, -100}, -100).item();
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("backward of sum gives ones") {
    Rng rng(1);
    Tensor x = Tensor::randn({3, 2}, rng, 1.0f, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum(x);
    tape.backward(loss);
    for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward of sum of squares") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("backward requires a scalar loss") {
    Tensor x = Tensor::ones({2}, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), NotScalar);
}

TEST_CASE("gradients accumulate across backward calls") {
    Tensor x = Tensor::ones({2}, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum(x);
    tape.backward(loss);
    tape.backward(loss);
    for (float g : x.grad()) CHECK(g == 2.0f);
}

TEST_CASE("a tensor feeding two consumers sums both contributions") {
    Tensor x = Tensor::from_data({2}, {0.5f, -1.25f}, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = add(sum(mul(x, x)), sum(x));  // d/dx = 2x + 1
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2 * 0.5 + 1).epsilon(1e-6));
    CHECK(x.grad()[1] == doctest::Approx(2 * -1.25 + 1).epsilon(1e-6));
}

TEST_CASE("shape ops round small cases") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(reshape(x, {3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeMismatch);

    Tensor t = transpose(x, 0, 1);
    REQUIRE(t.shape() == Shape{3, 2});
    CHECK(t.data() == std::vector<float>{1, 4, 2, 5, 3, 6});

    Tensor c = concat(x, x, 0);
    CHECK(c.shape() == Shape{4, 3});
    Tensor s = slice(c, 0, 2, 2);
    CHECK(testutil::bitwise_equal(s, x));
    CHECK_THROWS_AS(slice(x, 1, 2, 2), ShapeMismatch);
}

TEST_CASE("suffix broadcast add matches manual expansion") {
    Tensor x = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor bias = Tensor::from_data({2}, {10, 20});
    Tensor y = add(x, bias);
    CHECK(y.data() == std::vector<float>{11, 22, 13, 24, 15, 26, 17, 28});

    Tensor row = Tensor::from_data({1, 2, 2}, {1, 1, 2, 2});
    Tensor z = add(x, row);
    CHECK(z.data() == std::vector<float>{2, 3, 5, 6, 6, 7, 9, 10});
}

TEST_CASE("identical inputs give bitwise identical outputs") {
    Rng rng(5);
    Tensor x = Tensor::randn({4, 8}, rng);
    Tensor w = Tensor::randn({8, 8}, rng);
    Tensor a = gelu(matmul(x, w));
    Tensor b = gelu(matmul(x, w));
    CHECK(testutil::bitwise_equal(a, b));
}

TEST_SUITE_END();
