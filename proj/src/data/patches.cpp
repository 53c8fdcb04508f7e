#include "dualseg/data_io.hpp"
#include "dualseg/errors.hpp"

namespace dualseg::data {

namespace {

// Summed-area table with a zero first row and column.
std::vector<std::int64_t> integral(const LabelMask& m) {
    const auto w = m.width + 1;
    std::vector<std::int64_t> s(static_cast<std::size_t>((m.height + 1) * w), 0);
    for (std::int64_t y = 0; y < m.height; ++y) {
        for (std::int64_t x = 0; x < m.width; ++x) {
            s[static_cast<std::size_t>((y + 1) * w + x + 1)] =
                m.at(y, x) + s[static_cast<std::size_t>(y * w + x + 1)] +
                s[static_cast<std::size_t>((y + 1) * w + x)] - s[static_cast<std::size_t>(y * w + x)];
        }
    }
    return s;
}

template <typename T>
Plane<T> crop(const Plane<T>& p, Corner c, std::int64_t size) {
    Plane<T> out(size, size);
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) out.at(y, x) = p.at(c.y + y, c.x + x);
    }
    return out;
}

}  // namespace

std::vector<Corner> sample_corners(const Sample& s, std::int64_t size, std::int64_t count, Rng& rng) {
    if (size <= 0 || size % 16 != 0 || size > std::min(s.image.height, s.image.width)) {
        throw ParameterError("sample_patches: size " + std::to_string(size) +
                             " must be a multiple of 16 no larger than the image (" +
                             std::to_string(s.image.height) + "x" + std::to_string(s.image.width) + ")");
    }
    std::vector<std::int64_t> table;
    if (s.fov) table = integral(*s.fov);
    const auto w = s.image.width + 1;
    auto coverage = [&](Corner c) {
        auto at = [&](std::int64_t y, std::int64_t x) { return table[static_cast<std::size_t>(y * w + x)]; };
        const auto sum = at(c.y + size, c.x + size) - at(c.y, c.x + size) - at(c.y + size, c.x) + at(c.y, c.x);
        return static_cast<double>(sum) / static_cast<double>(size * size);
    };
    std::vector<Corner> out;
    for (std::int64_t i = 0; i < count; ++i) {
        Corner c;
        for (int attempt = 0; attempt <= max_patch_retries; ++attempt) {
            c.y = rng.uniform_int(0, s.image.height - size + 1);
            c.x = rng.uniform_int(0, s.image.width - size + 1);
            if (!s.fov || coverage(c) >= min_fov_coverage) break;
        }
        out.push_back(c);
    }
    return out;
}

Patch extract_patch(const Sample& s, Corner c, std::int64_t size) {
    Patch p;
    p.image = crop(s.image, c, size);
    p.label = crop(s.label, c, size);
    p.fov = s.fov ? crop(*s.fov, c, size) : LabelMask(size, size, 1);
    return p;
}

std::vector<Patch> sample_patches(const Sample& s, std::int64_t size, std::int64_t count, Rng& rng) {
    std::vector<Patch> out;
    for (const auto& c : sample_corners(s, size, count, rng)) out.push_back(extract_patch(s, c, size));
    return out;
}

Transform draw_transform(Rng& rng) {
    Transform t;
    t.hflip = rng.bernoulli(0.5);
    t.vflip = rng.bernoulli(0.5);
    t.quarter_turns = static_cast<int>(rng.uniform_int(0, 4));
    return t;
}

template <typename T>
Plane<T> apply_transform(const Plane<T>& p, const Transform& t) {
    if (p.height != p.width) throw DimensionError("augment: patches must be square");
    const std::int64_t n = p.height;
    Plane<T> a = p;
    if (t.hflip) {
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) a.at(y, x) = p.at(y, n - 1 - x);
    }
    Plane<T> b = a;
    if (t.vflip) {
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) b.at(y, x) = a.at(n - 1 - y, x);
    }
    for (int k = 0; k < ((t.quarter_turns % 4) + 4) % 4; ++k) {
        Plane<T> r(n, n);
        // counter-clockwise: the top-right corner moves to the top-left
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) r.at(y, x) = b.at(x, n - 1 - y);
        b = std::move(r);
    }
    return b;
}

template Plane<float> apply_transform(const Plane<float>&, const Transform&);
template Plane<std::uint8_t> apply_transform(const Plane<std::uint8_t>&, const Transform&);

void apply_transform(Patch& patch, const Transform& t) {
    patch.image = apply_transform(patch.image, t);
    patch.label = apply_transform(patch.label, t);
    patch.fov = apply_transform(patch.fov, t);
}

void augment(Patch& patch, Rng& rng) {
    apply_transform(patch, draw_transform(rng));
}

}  // namespace dualseg::data
