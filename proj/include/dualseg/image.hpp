#pragma once

#include <cstdint>
#include <vector>

namespace dualseg {

// Row-major single-channel H×W image.
template <typename T>
struct Plane {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<T> pixels;

    Plane() = default;
    Plane(std::int64_t h, std::int64_t w, T fill = T{})
        : height(h), width(w), pixels(static_cast<std::size_t>(h * w), fill) {}

    std::int64_t size() const { return height * width; }
    bool same_shape(const auto& other) const {
        return height == other.height && width == other.width;
    }
    T& at(std::int64_t y, std::int64_t x) { return pixels[static_cast<std::size_t>(y * width + x)]; }
    const T& at(std::int64_t y, std::int64_t x) const {
        return pixels[static_cast<std::size_t>(y * width + x)];
    }

    bool operator==(const Plane&) const = default;
};

// Probabilities in [0, 1].
using ProbabilityMap = Plane<float>;
// Strictly binary {0, 1}; vessel = 1.
using LabelMask = Plane<std::uint8_t>;
// Grayscale intensities in [0, 1].
using GrayImage = Plane<float>;

}  // namespace dualseg
