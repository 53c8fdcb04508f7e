#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "dualseg/data_io.hpp"
#include "dualseg/errors.hpp"

namespace dualseg::data {

namespace {

struct Point {
    double x, y;
};

class VesselCanvas {
public:
    VesselCanvas(std::int64_t size) : size_(size), mask_(size, size), width_(size, size) {}

    // Every pixel whose centre lies within w/2 of a point on the curve, plus
    // the pixel containing the point, so width-1 curves stay connected.
    void stamp(Point p, int w) {
        const double r = w / 2.0;
        const auto x0 = static_cast<std::int64_t>(std::floor(p.x - r)), x1 = static_cast<std::int64_t>(std::ceil(p.x + r));
        const auto y0 = static_cast<std::int64_t>(std::floor(p.y - r)), y1 = static_cast<std::int64_t>(std::ceil(p.y + r));
        for (std::int64_t y = y0; y <= y1; ++y) {
            for (std::int64_t x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - p.x, dy = y + 0.5 - p.y;
                const bool home = x == static_cast<std::int64_t>(std::floor(p.x)) &&
                                  y == static_cast<std::int64_t>(std::floor(p.y));
                if ((home || dx * dx + dy * dy <= r * r) && inside(x, y)) mark(x, y, w);
            }
        }
    }

    void quadratic(Point a, Point c, Point b, int w) {
        const double len = std::hypot(c.x - a.x, c.y - a.y) + std::hypot(b.x - c.x, b.y - c.y);
        const int steps = std::max(8, static_cast<int>(std::ceil(len * 4)));
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps, u = 1 - t;
            stamp({u * u * a.x + 2 * u * t * c.x + t * t * b.x, u * u * a.y + 2 * u * t * c.y + t * t * b.y}, w);
        }
    }

    const LabelMask& mask() const { return mask_; }
    const Plane<std::uint8_t>& widths() const { return width_; }

private:
    bool inside(std::int64_t x, std::int64_t y) const { return x >= 0 && y >= 0 && x < size_ && y < size_; }
    void mark(std::int64_t x, std::int64_t y, int w) {
        mask_.at(y, x) = 1;
        width_.at(y, x) = static_cast<std::uint8_t>(std::max<int>(width_.at(y, x), w));
    }

    std::int64_t size_;
    LabelMask mask_;
    Plane<std::uint8_t> width_;
};

constexpr int max_depth = 2;

void branch(VesselCanvas& canvas, Rng& rng, Point start, double heading, int width, int depth, double length) {
    const double turn = heading + rng.uniform(-0.5, 0.5);
    const Point end{start.x + length * std::cos(turn), start.y + length * std::sin(turn)};
    const double bend = rng.uniform(-0.25, 0.25) * length;
    const Point ctrl{(start.x + end.x) / 2 - bend * std::sin(turn), (start.y + end.y) / 2 + bend * std::cos(turn)};
    canvas.quadratic(start, ctrl, end, width);
    if (depth >= max_depth) return;
    for (int side : {-1, 1}) {
        const double angle = turn + side * rng.uniform(0.35, 0.8);
        branch(canvas, rng, end, angle, std::max(1, width - 1), depth + 1, length * rng.uniform(0.55, 0.75));
    }
}

}  // namespace

Sample synth_vessel_sample(std::int64_t index, std::int64_t size, std::uint64_t seed) {
    if (size < 32) throw ParameterError("synth_vessels: size must be >= 32");
    Rng rng = Rng(seed).split(static_cast<std::uint64_t>(index));
    const double s = static_cast<double>(size);
    const double cx = (s - 1) / 2, cy = (s - 1) / 2, radius = 0.47 * s;

    Sample out;
    out.id = "synth_" + [&] {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%04lld", static_cast<long long>(index));
        return std::string(buf);
    }();
    LabelMask fov(size, size);
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            fov.at(y, x) = std::hypot(x - cx, y - cy) <= radius ? 1 : 0;
        }
    }

    VesselCanvas canvas(size);
    const auto trees = rng.uniform_int(2, 5);
    for (std::int64_t t = 0; t < trees; ++t) {
        const double a = rng.uniform(0.0, 2 * std::numbers::pi);
        const double r = 0.8 * radius * std::sqrt(rng.uniform());
        const Point root{cx + r * std::cos(a), cy + r * std::sin(a)};
        const int width = static_cast<int>(rng.uniform_int(2, 4));
        branch(canvas, rng, root, rng.uniform(0.0, 2 * std::numbers::pi), width, 0, rng.uniform(0.25, 0.4) * s);
    }

    const double contrast = rng.uniform(0.18, 0.3);
    out.image = GrayImage(size, size);
    out.label = LabelMask(size, size);
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const double noise = 0.03 * rng.normal();
            if (!fov.at(y, x)) continue;
            const double d = std::hypot(x - cx, y - cy) / radius;
            double v = 0.62 - 0.22 * d * d + noise;
            if (canvas.mask().at(y, x)) {
                // thinner vessels are fainter
                v -= contrast * (0.6 + 0.2 * canvas.widths().at(y, x));
                out.label.at(y, x) = 1;
            }
            // Quantized so the 8-bit files reproduce the in-memory sample.
            out.image.at(y, x) = static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
        }
    }
    out.fov = std::move(fov);
    return out;
}

std::vector<Sample> synth_vessels(std::int64_t count, std::int64_t size, std::uint64_t seed) {
    if (count < 0) throw ParameterError("synth_vessels: count must be non-negative");
    std::vector<Sample> out;
    for (std::int64_t i = 0; i < count; ++i) out.push_back(synth_vessel_sample(i, size, seed));
    return out;
}

void write_synthetic(const std::string& dir, std::int64_t count, std::int64_t size, std::uint64_t seed) {
    namespace fs = std::filesystem;
    if (size < 32) throw ParameterError("synth: size must be >= 32");
    if (count < 0) throw ParameterError("synth: count must be non-negative");
    const fs::path root(dir);
    std::error_code ec;
    for (const char* sub : {"images", "labels", "fov"}) {
        fs::create_directories(root / sub, ec);
        if (ec) throw IoError("cannot create '" + (root / sub).string() + "': " + ec.message());
    }
    std::ofstream manifest(root / "manifest.txt", std::ios::binary | std::ios::trunc);
    if (!manifest) throw IoError("cannot write '" + (root / "manifest.txt").string() + "'");
    manifest << "dualseg-synthetic seed " << seed << " size " << size << " count " << count << "\n";
    for (std::int64_t i = 0; i < count; ++i) {
        const auto s = synth_vessel_sample(i, size, seed);
        const auto image = "images/" + s.id + ".pgm";
        const auto label = "labels/" + s.id + ".pgm";
        const auto fov = "fov/" + s.id + ".pgm";
        write_pgm((root / image).string(), quantize(s.image));
        write_pgm((root / label).string(), mask_to_gray(s.label));
        write_pgm((root / fov).string(), mask_to_gray(*s.fov));
        manifest << s.id << " " << image << " " << label << " " << fov << "\n";
    }
    if (!manifest) throw IoError("failed writing manifest in '" + dir + "'");
}

}  // namespace dualseg::data
