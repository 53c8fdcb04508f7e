#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <opencv2/imgcodecs.hpp>

#include "dualseg/data_io.hpp"
#include "dualseg/errors.hpp"

namespace dualseg::data {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    if (s.size() < suffix.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(), [](char a, char b) {
        return std::tolower(static_cast<unsigned char>(a)) == std::tolower(static_cast<unsigned char>(b));
    });
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string gunzip(const std::string& bytes, const std::string& origin) {
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw IoError(origin + ": zlib init failed");
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(bytes.data()));
    zs.avail_in = static_cast<uInt>(bytes.size());
    std::string out;
    char buf[1 << 16];
    int rc = Z_OK;
    while (rc == Z_OK) {
        zs.next_out = reinterpret_cast<Bytef*>(buf);
        zs.avail_out = sizeof buf;
        rc = inflate(&zs, Z_NO_FLUSH);
        out.append(buf, sizeof buf - zs.avail_out);
        if (rc == Z_BUF_ERROR && zs.avail_in == 0) break;
    }
    inflateEnd(&zs);
    if (rc != Z_STREAM_END) throw IoError(origin + ": corrupt gzip stream");
    return out;
}

// ------------------------------------------------------------------- PNM

class PnmReader {
public:
    PnmReader(const std::string& bytes, const std::string& origin) : b_(bytes), origin_(origin) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(origin_ + ": " + what);
    }

    std::int64_t header_int() {
        skip_space_and_comments();
        std::int64_t v = 0;
        bool any = false;
        while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
            v = v * 10 + (b_[pos_++] - '0');
            any = true;
            if (v > (std::int64_t{1} << 31)) fail("header value out of range");
        }
        if (!any) fail("malformed header");
        return v;
    }

    void skip_space_and_comments() {
        while (pos_ < b_.size()) {
            if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    // Exactly one whitespace byte separates the header from binary data.
    void end_header() {
        if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
            fail("malformed header");
        }
        ++pos_;
    }

    std::size_t pos_ = 0;
    const std::string& b_;

private:
    std::string origin_;
};

}  // namespace

Raster decode_pnm(const std::string& bytes, const std::string& origin) {
    PnmReader r(bytes, origin);
    if (bytes.size() < 2 || bytes[0] != 'P') r.fail("not a PNM file");
    const char kind = bytes[1];
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
        r.fail(std::string("unsupported PNM variant P") + kind);
    }
    r.pos_ = 2;
    Raster out;
    out.width = r.header_int();
    out.height = r.header_int();
    const std::int64_t maxval = r.header_int();
    if (out.width <= 0 || out.height <= 0) r.fail("empty image");
    if (maxval <= 0 || maxval > 65535) r.fail("maxval out of range");
    out.channels = (kind == '3' || kind == '6') ? 3 : 1;
    const std::size_t n = static_cast<std::size_t>(out.width * out.height * out.channels);
    out.samples.resize(n);
    const float denom = static_cast<float>(maxval);
    if (kind == '2' || kind == '3') {
        for (std::size_t i = 0; i < n; ++i) {
            const auto v = r.header_int();
            if (v > maxval) r.fail("sample exceeds maxval");
            out.samples[i] = static_cast<float>(v) / denom;
        }
        return out;
    }
    r.end_header();
    const std::size_t width = maxval > 255 ? 2 : 1;
    if (bytes.size() - r.pos_ < n * width) r.fail("truncated pixel data");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + r.pos_);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t v = width == 2 ? (p[2 * i] << 8) | p[2 * i + 1] : p[i];
        if (v > maxval) r.fail("sample exceeds maxval");
        out.samples[i] = static_cast<float>(v) / denom;
    }
    return out;
}

// -------------------------------------------------------------------- GIF

namespace {

class GifReader {
public:
    GifReader(const std::string& bytes, const std::string& origin) : b_(bytes), origin_(origin) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(origin_ + ": GIF: " + what);
    }
    std::uint8_t byte() {
        if (pos_ >= b_.size()) fail("unexpected end of data");
        return static_cast<std::uint8_t>(b_[pos_++]);
    }
    std::uint16_t u16() {
        const std::uint16_t lo = byte();
        return static_cast<std::uint16_t>(lo | (byte() << 8));
    }
    std::vector<std::uint8_t> color_table(int bits) {
        std::vector<std::uint8_t> t(static_cast<std::size_t>(3 << bits));
        for (auto& v : t) v = byte();
        return t;
    }
    // Concatenated data sub-blocks up to the zero terminator.
    std::string sub_blocks() {
        std::string out;
        for (std::uint8_t len = byte(); len != 0; len = byte()) {
            if (b_.size() - pos_ < len) fail("truncated sub-block");
            out.append(b_, pos_, len);
            pos_ += len;
        }
        return out;
    }

    std::size_t pos_ = 0;

private:
    const std::string& b_;
    std::string origin_;
};

std::vector<std::uint8_t> lzw_decode(const std::string& data, int min_code_size, std::size_t expected,
                                     const GifReader& reader) {
    if (min_code_size < 2 || min_code_size > 8) reader.fail("bad LZW code size");
    const int clear = 1 << min_code_size;
    const int eoi = clear + 1;
    std::vector<std::uint16_t> prefix(4096);
    std::vector<std::uint8_t> suffix(4096), first(4096);
    std::vector<std::uint16_t> length(4096);
    for (int i = 0; i < clear; ++i) {
        suffix[static_cast<std::size_t>(i)] = first[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i);
        length[static_cast<std::size_t>(i)] = 1;
    }
    int code_size = min_code_size + 1;
    int next = clear + 2;
    int prev = -1;
    std::vector<std::uint8_t> out;
    out.reserve(expected);
    std::uint32_t bits = 0;
    int nbits = 0;
    std::size_t pos = 0;
    auto emit = [&](int code) {
        const std::size_t start = out.size();
        out.resize(start + length[static_cast<std::size_t>(code)]);
        for (std::size_t k = out.size(); k-- > start;) {
            out[k] = suffix[static_cast<std::size_t>(code)];
            code = prefix[static_cast<std::size_t>(code)];
        }
    };
    while (out.size() < expected) {
        while (nbits < code_size) {
            if (pos >= data.size()) reader.fail("LZW stream ended early");
            bits |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[pos++])) << nbits;
            nbits += 8;
        }
        const int code = static_cast<int>(bits & ((1u << code_size) - 1));
        bits >>= code_size;
        nbits -= code_size;
        if (code == clear) {
            code_size = min_code_size + 1;
            next = clear + 2;
            prev = -1;
            continue;
        }
        if (code == eoi) break;
        if (prev < 0) {
            if (code >= clear) reader.fail("invalid first LZW code");
            emit(code);
            prev = code;
            continue;
        }
        std::uint8_t head;
        if (code < next) {
            head = first[static_cast<std::size_t>(code)];
        } else if (code == next) {
            head = first[static_cast<std::size_t>(prev)];
        } else {
            reader.fail("invalid LZW code");
        }
        if (next < 4096) {
            const auto n = static_cast<std::size_t>(next);
            prefix[n] = static_cast<std::uint16_t>(prev);
            suffix[n] = head;
            first[n] = first[static_cast<std::size_t>(prev)];
            length[n] = static_cast<std::uint16_t>(length[static_cast<std::size_t>(prev)] + 1);
            ++next;
            if (next == (1 << code_size) && code_size < 12) ++code_size;
        }
        // For code == next this emits the entry just added (the KwKwK case).
        emit(code);
        prev = code;
    }
    if (out.size() < expected) reader.fail("image data ended early");
    out.resize(expected);
    return out;
}

}  // namespace

Raster decode_gif(const std::string& bytes, const std::string& origin) {
    GifReader r(bytes, origin);
    if (bytes.size() < 13 || (bytes.compare(0, 6, "GIF87a") != 0 && bytes.compare(0, 6, "GIF89a") != 0)) {
        r.fail("bad signature");
    }
    r.pos_ = 6;
    const std::int64_t screen_w = r.u16();
    const std::int64_t screen_h = r.u16();
    const std::uint8_t flags = r.byte();
    r.byte();  // background index
    r.byte();  // aspect
    std::vector<std::uint8_t> global;
    if (flags & 0x80) global = r.color_table((flags & 7) + 1);

    for (;;) {
        const std::uint8_t tag = r.byte();
        if (tag == 0x3B) r.fail("no image in file");
        if (tag == 0x21) {
            r.byte();
            r.sub_blocks();
            continue;
        }
        if (tag != 0x2C) r.fail("unknown block");
        const std::int64_t left = r.u16(), top = r.u16(), w = r.u16(), h = r.u16();
        const std::uint8_t img_flags = r.byte();
        auto table = (img_flags & 0x80) ? r.color_table((img_flags & 7) + 1) : global;
        if (table.empty()) r.fail("no color table");
        const bool interlaced = img_flags & 0x40;
        const int min_code = r.byte();
        const auto data = r.sub_blocks();
        const auto indices = lzw_decode(data, min_code, static_cast<std::size_t>(w * h), r);

        Raster out;
        out.width = std::max(screen_w, left + w);
        out.height = std::max(screen_h, top + h);
        out.channels = 3;
        out.samples.assign(static_cast<std::size_t>(out.width * out.height * 3), 0.0f);
        std::vector<std::int64_t> rows;
        if (interlaced) {
            for (auto [start, step] : {std::pair{0, 8}, {4, 8}, {2, 4}, {1, 2}}) {
                for (std::int64_t y = start; y < h; y += step) rows.push_back(y);
            }
        } else {
            for (std::int64_t y = 0; y < h; ++y) rows.push_back(y);
        }
        for (std::int64_t i = 0; i < h; ++i) {
            const std::int64_t y = rows[static_cast<std::size_t>(i)] + top;
            for (std::int64_t x = 0; x < w; ++x) {
                const std::size_t idx = indices[static_cast<std::size_t>(i * w + x)];
                if (3 * idx + 2 >= table.size()) r.fail("color index out of range");
                float* px = out.samples.data() + 3 * (y * out.width + x + left);
                for (int c = 0; c < 3; ++c) px[c] = table[3 * idx + static_cast<std::size_t>(c)] / 255.0f;
            }
        }
        return out;
    }
}

// ---------------------------------------------------------------- OpenCV

namespace {

Raster read_with_opencv(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
    if (m.empty()) throw IoError("cannot decode image '" + path + "'");
    // Divide in float so every decoder maps k to the same value k / maxval.
    float denom = 1.0f;
    switch (m.depth()) {
        case CV_8U: denom = 255.0f; break;
        case CV_16U: denom = 65535.0f; break;
        case CV_32F: break;
        default: throw IoError("'" + path + "': unsupported sample type");
    }
    cv::Mat f;
    m.convertTo(f, CV_32F);
    Raster out;
    out.height = f.rows;
    out.width = f.cols;
    const int cn = f.channels();
    if (cn != 1 && cn != 3 && cn != 4) throw IoError("'" + path + "': unsupported channel count");
    out.channels = cn == 1 ? 1 : 3;
    out.samples.resize(static_cast<std::size_t>(out.height * out.width * out.channels));
    for (int y = 0; y < f.rows; ++y) {
        const float* row = f.ptr<float>(y);
        for (int x = 0; x < f.cols; ++x) {
            float* dst = out.samples.data() + (static_cast<std::size_t>(y) * static_cast<std::size_t>(f.cols) + static_cast<std::size_t>(x)) * static_cast<std::size_t>(out.channels);
            if (cn == 1) {
                dst[0] = row[x] / denom;
            } else {
                // BGR(A) -> RGB
                dst[0] = row[x * cn + 2] / denom;
                dst[1] = row[x * cn + 1] / denom;
                dst[2] = row[x * cn + 0] / denom;
            }
        }
    }
    return out;
}

}  // namespace

Raster read_raster(const std::string& path) {
    std::string name = path;
    const bool gz = ends_with(name, ".gz");
    if (gz) name = name.substr(0, name.size() - 3);
    if (ends_with(name, ".pgm") || ends_with(name, ".ppm") || ends_with(name, ".pnm")) {
        auto bytes = read_bytes(path);
        return decode_pnm(gz ? gunzip(bytes, path) : bytes, path);
    }
    if (ends_with(name, ".gif")) {
        auto bytes = read_bytes(path);
        return decode_gif(gz ? gunzip(bytes, path) : bytes, path);
    }
    if (gz) throw IoError("'" + path + "': gzip is supported for PNM and GIF only");
    return read_with_opencv(path);
}

GrayImage read_gray(const std::string& path) {
    const auto r = read_raster(path);
    GrayImage out(r.height, r.width);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        out.pixels[i] = r.channels == 1 ? r.samples[i] : r.samples[3 * i + 1];
    }
    return out;
}

LabelMask read_mask(const std::string& path) {
    const auto r = read_raster(path);
    LabelMask out(r.height, r.width);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        const float v = r.channels == 1 ? r.samples[i] : r.samples[3 * i + 1];
        out.pixels[i] = v > 0.0f ? 1 : 0;
    }
    return out;
}

namespace {

void write_bytes(const std::string& path, const std::string& header, const std::uint8_t* data,
                 std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << header;
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace

void write_pgm(const std::string& path, const Plane<std::uint8_t>& image) {
    write_bytes(path, "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n",
                image.pixels.data(), image.pixels.size());
}

void write_ppm(const std::string& path, const RgbImage& image) {
    write_bytes(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n",
                image.pixels.data(), image.pixels.size());
}

Plane<std::uint8_t> quantize(const Plane<float>& image) {
    Plane<std::uint8_t> out(image.height, image.width);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

Plane<std::uint8_t> mask_to_gray(const LabelMask& mask) {
    Plane<std::uint8_t> out(mask.height, mask.width);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = mask.pixels[i] ? 255 : 0;
    return out;
}

RgbImage overlay(const Raster& input, const LabelMask& mask) {
    if (input.height != mask.height || input.width != mask.width) {
        throw DimensionError("overlay: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                             " does not match image " + std::to_string(input.height) + "x" +
                             std::to_string(input.width));
    }
    RgbImage out;
    out.height = input.height;
    out.width = input.width;
    out.pixels.resize(static_cast<std::size_t>(input.height * input.width * 3));
    const auto ch = static_cast<std::size_t>(input.channels);
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            float v = input.samples[i * ch + (ch == 3 ? c : 0)];
            // vessels: 60% toward pure red
            if (mask.pixels[i]) v = 0.4f * v + (c == 0 ? 0.6f : 0.0f);
            out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
    }
    return out;
}

}  // namespace dualseg::data
