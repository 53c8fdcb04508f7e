#include "doctest.h"
#include "helpers.hpp"

#include "dualseg/gradcheck.hpp"
#include "dualseg/ops.hpp"

using namespace dualseg;

TEST_CASE("relative error floor") {
    CHECK(relative_error(1.0, 1.0) == 0.0);
    CHECK(relative_error(0.0, 0.0) == 0.0);
    CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
    CHECK(relative_error(1e-10, 0.0) == doctest::Approx(1e-2));
}

TEST_CASE("grad_check on sum of squares") {
    Rng rng(31);
    auto x = testing::random_tensor<double>({4, 3}, rng, -2, 2);
    auto r = grad_check([](const Tensor<double>& v) { return ops::sum(ops::mul(v, v)); }, x, 1e-5);
    CHECK(r.coordinates == 12);
    CHECK(r.max_rel_error < 1e-7);
}

TEST_CASE("grad_check through a softmax and matmul chain") {
    Rng rng(32);
    auto x = testing::random_tensor<double>({3, 4}, rng);
    auto b = testing::random_tensor<double>({4, 5}, rng);
    auto w = testing::random_tensor<double>({3, 5}, rng);
    auto r = grad_check(
        [&](const Tensor<double>& v) {
            return ops::sum(ops::mul(w, ops::softmax(ops::matmul(v, b), -1)));
        },
        x);
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("grad_check reports large error at a max-pool tie instead of hiding it") {
    Tensor<double> x({1, 1, 2, 2}, {5, 5, 1, 2});
    auto r = grad_check([](const Tensor<double>& v) { return ops::sum(ops::max_pool2d(v)); }, x);
    // Central differences straddle the tie: numeric 0.5 for both tied entries.
    CHECK(r.max_rel_error >= 0.5);
    CHECK_FALSE(r.passed(1e-5));
    CHECK(x[0] == 5.0);  // restored
}

TEST_CASE("grad_check needs a scalar function") {
    auto x = Tensor<double>::full({3}, 1.0);
    CHECK_THROWS_AS(grad_check([](const Tensor<double>& v) { return ops::scale(v, 2.0); }, x),
                    ContractError);
}
