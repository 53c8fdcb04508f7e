#include "dualseg/parameters.hpp"

#include <cmath>

namespace dualseg {

template <typename T>
Tensor<T> kaiming_conv_weight(const Shape& shape, Rng& rng) {
    if (shape.size() != 4) {
        throw DimensionError("kaiming_conv_weight: expected [Co, Ci, kH, kW], got " + to_string(shape));
    }
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    const double stddev = std::sqrt(2.0 / fan_in);
    std::vector<T> values(static_cast<std::size_t>(numel(shape)));
    for (auto& v : values) {
        v = static_cast<T>(stddev * rng.normal());
    }
    return Tensor<T>(shape, std::move(values), true);
}

template Tensor<float> kaiming_conv_weight<float>(const Shape&, Rng&);
template Tensor<double> kaiming_conv_weight<double>(const Shape&, Rng&);

}  // namespace dualseg
