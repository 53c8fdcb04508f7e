#pragma once

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "dualseg/rng.hpp"
#include "dualseg/tensor.hpp"

namespace testing {

template <typename T>
dualseg::Tensor<T> random_tensor(dualseg::Shape shape, dualseg::Rng& rng, double lo = -1.0,
                                 double hi = 1.0, bool requires_grad = false) {
    std::vector<T> v(static_cast<std::size_t>(dualseg::numel(shape)));
    for (auto& x : v) {
        x = static_cast<T>(rng.uniform(lo, hi));
    }
    return dualseg::Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

template <typename T>
bool bit_equal(std::span<const T> a, std::span<const T> b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

template <typename T>
double max_abs_diff(const dualseg::Tensor<T>& a, const dualseg::Tensor<T>& b) {
    return a.shape() == b.shape() ? max_abs_diff<T>(a.data(), b.data()) : INFINITY;
}

template <typename T>
bool bit_equal(const dualseg::Tensor<T>& a, const dualseg::Tensor<T>& b) {
    return a.shape() == b.shape() && bit_equal<T>(a.data(), b.data());
}

}  // namespace testing
