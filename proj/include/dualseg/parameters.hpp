#pragma once

#include <string>
#include <vector>

#include "dualseg/rng.hpp"
#include "dualseg/tensor.hpp"

namespace dualseg {

template <typename T>
struct NamedParameter {
    std::string name;
    Tensor<T>* tensor;
};

// Non-trainable state that is still part of a checkpoint (BN running stats).
template <typename T>
struct NamedBuffer {
    std::string name;
    std::vector<T>* values;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;
template <typename T>
using BufferList = std::vector<NamedBuffer<T>>;

// He/Kaiming normal: N(0, 2 / fan_in), fan_in = C_in * kH * kW.
template <typename T>
Tensor<T> kaiming_conv_weight(const Shape& shape, Rng& rng);

}  // namespace dualseg
