#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualseg/image.hpp"
#include "dualseg/rng.hpp"

namespace dualseg::data {

struct Sample {
    GrayImage image;
    LabelMask label;
    std::optional<LabelMask> fov;
    std::string id;
};

// Throws DatasetError unless shapes agree, masks are binary and intensities
// lie in [0, 1].
void validate(const Sample& sample);

// ------------------------------------------------------------------ codecs

// 8-bit interleaved RGB.
struct RgbImage {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> pixels;  // r, g, b per pixel
};

// Decoded raster before any interpretation: 1 or 3 channels, samples scaled
// to [0, 1] by the format's maximum value.
struct Raster {
    std::int64_t height = 0;
    std::int64_t width = 0;
    int channels = 1;
    std::vector<float> samples;
};

// PGM/PPM (binary or ASCII, optionally gzip-compressed by extension .gz) and
// GIF are decoded in-house; TIF, PNG and JPG through OpenCV.
Raster read_raster(const std::string& path);

// Grayscale intensities; color images contribute their green channel.
GrayImage read_gray(const std::string& path);
// Any nonzero sample (green channel for color) is foreground.
LabelMask read_mask(const std::string& path);

// Binary P5 / P6 writers.
void write_pgm(const std::string& path, const Plane<std::uint8_t>& image);
void write_ppm(const std::string& path, const RgbImage& image);

// Decoders on in-memory bytes, exposed for tests.
Raster decode_pnm(const std::string& bytes, const std::string& origin);
Raster decode_gif(const std::string& bytes, const std::string& origin);

// Round((v) * 255) with clamping to [0, 255].
Plane<std::uint8_t> quantize(const Plane<float>& image);
Plane<std::uint8_t> mask_to_gray(const LabelMask& mask);
// The input in color (gray replicated) with mask pixels blended toward red.
RgbImage overlay(const Raster& input, const LabelMask& mask);

// ---------------------------------------------------------------- datasets

struct DatasetSpec {
    std::string name;       // drive | stare | chasedb1 | synthetic | synth
    std::string root;       // directory (synth: unused)
    std::string split;      // train | test (drive, stare, chasedb1)
    std::string list_file;  // stare: ids for the split, one per line
    // synth: generated in memory.
    std::int64_t count = 0;
    std::int64_t size = 0;
    std::uint64_t seed = 0;
};

// Parses "drive:ROOT:SPLIT", "chasedb1:ROOT:SPLIT", "stare:ROOT:SPLIT:LIST",
// "synthetic:DIR" and "synth:COUNT:SIZE:SEED". ConfigError on bad syntax.
DatasetSpec parse_dataset_spec(const std::string& text);

// Loads every sample, ordered by file name, and checks the expected counts
// and native resolutions. DatasetError names the offending file.
std::vector<Sample> load_dataset(const DatasetSpec& spec);

// ------------------------------------------------------------ preprocessing

struct Padded {
    Sample sample;
    std::int64_t original_height = 0;
    std::int64_t original_width = 0;
};

// Zero-pads bottom and right up to the next multiple of `multiple`.
Padded pad_to_multiple(const Sample& sample, std::int64_t multiple = 16);

template <typename T>
Plane<T> pad_plane(const Plane<T>& p, std::int64_t height, std::int64_t width) {
    Plane<T> out(height, width);
    for (std::int64_t y = 0; y < p.height; ++y) {
        for (std::int64_t x = 0; x < p.width; ++x) out.at(y, x) = p.at(y, x);
    }
    return out;
}

// Top-left crop back to the original size.
template <typename T>
Plane<T> unpad(const Plane<T>& p, std::int64_t height, std::int64_t width) {
    Plane<T> out(height, width);
    for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x) out.at(y, x) = p.at(y, x);
    }
    return out;
}

// ---------------------------------------------------------------- patches

struct Patch {
    GrayImage image;
    LabelMask label;
    LabelMask fov;
};

struct Corner {
    std::int64_t y = 0;
    std::int64_t x = 0;
    bool operator==(const Corner&) const = default;
};

inline constexpr double min_fov_coverage = 0.01;
inline constexpr int max_patch_retries = 10;

// Uniform top-left corners; a corner whose window covers less than 1% of the
// fov is redrawn up to 10 times, then kept.
std::vector<Corner> sample_corners(const Sample& sample, std::int64_t size, std::int64_t count,
                                   Rng& rng);
Patch extract_patch(const Sample& sample, Corner corner, std::int64_t size);
std::vector<Patch> sample_patches(const Sample& sample, std::int64_t size, std::int64_t count,
                                  Rng& rng);

struct Transform {
    bool hflip = false;
    bool vflip = false;
    int quarter_turns = 0;  // counter-clockwise
    bool operator==(const Transform&) const = default;
};

// hflip, vflip: fair coins; quarter_turns uniform in {0, 1, 2, 3}.
Transform draw_transform(Rng& rng);

// Horizontal flip, then vertical flip, then rotation. Square planes only.
template <typename T>
Plane<T> apply_transform(const Plane<T>& p, const Transform& t);

void augment(Patch& patch, Rng& rng);
void apply_transform(Patch& patch, const Transform& t);

// -------------------------------------------------------------- synthetic

// Sample i depends only on (seed, i, size).
std::vector<Sample> synth_vessels(std::int64_t count, std::int64_t size, std::uint64_t seed);
Sample synth_vessel_sample(std::int64_t index, std::int64_t size, std::uint64_t seed);

// Writes images/, labels/, fov/ PGMs and manifest.txt under `dir`.
void write_synthetic(const std::string& dir, std::int64_t count, std::int64_t size,
                     std::uint64_t seed);

}  // namespace dualseg::data
