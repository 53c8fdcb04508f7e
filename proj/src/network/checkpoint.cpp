#include "dualseg/checkpoint.hpp"

#include <zlib.h>

#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace dualseg::checkpoint {

namespace {

constexpr std::size_t max_header_bytes = 1 << 20;

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string format_shape(const Shape& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(shape[i]);
    }
    return s;
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

float get_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

std::uint32_t crc_of(const char* data, std::size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    while (size > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
        data += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

struct Entry {
    std::string kind;
    std::string name;
    Shape shape;
    std::size_t offset = 0;
};

class HeaderParser {
public:
    HeaderParser(const std::string& origin) : origin_(origin) {}

    [[noreturn]] void corrupt(const std::string& what) const {
        throw CorruptCheckpointError(origin_ + ": corrupt checkpoint: " + what);
    }

    std::int64_t to_int(const std::string& s, const char* field) const {
        std::int64_t v = 0;
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
            corrupt(std::string("bad integer for ") + field + ": '" + s + "'");
        }
        return v;
    }

    double to_double(const std::string& s, const char* field) const {
        double v = 0;
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
            corrupt(std::string("bad number for ") + field + ": '" + s + "'");
        }
        return v;
    }

    Shape to_shape(const std::string& s) const {
        Shape shape;
        std::stringstream ss(s);
        std::string part;
        while (std::getline(ss, part, ',')) {
            const auto d = to_int(part, "shape");
            if (d <= 0) corrupt("non-positive dimension in shape '" + s + "'");
            shape.push_back(d);
        }
        if (shape.empty()) corrupt("empty shape");
        return shape;
    }

private:
    std::string origin_;
};

std::vector<std::string> split_words(const std::string& line) {
    std::istringstream in(line);
    return {std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()};
}

}  // namespace

std::string serialize(network::Model<float>& model) {
    const auto& c = model.config();
    std::string header;
    header += std::string(magic) + "\n";
    header += "version " + std::to_string(format_version) + "\n";
    header += "config in_channels " + std::to_string(c.in_channels) + " base_channels " +
              std::to_string(c.base_channels) + " levels " + std::to_string(c.levels) +
              " dropout " + format_double(c.dropout) + " reduction " + std::to_string(c.reduction) +
              " input_size " + std::to_string(c.input_size) + " attention " +
              (c.attention ? "1" : "0") + "\n";
    header += "init_seed " + std::to_string(model.init_seed()) + "\n";

    std::string payload;
    for (const auto& p : model.parameters()) {
        header += "param " + p.name + " f32 " + format_shape(p.tensor->shape()) + " " +
                  std::to_string(payload.size()) + "\n";
        for (float v : p.tensor->data()) put_f32(payload, v);
    }
    for (const auto& b : model.buffers()) {
        header += "buffer " + b.name + " f32 " + std::to_string(b.values->size()) + " " +
                  std::to_string(payload.size()) + "\n";
        for (float v : *b.values) put_f32(payload, v);
    }
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08x", crc_of(payload.data(), payload.size()));
    header += "payload " + std::to_string(payload.size()) + " crc32 " + crc + "\n";
    header += "end\n";
    return header + payload;
}

network::Model<float> deserialize(const std::string& bytes, const std::string& origin) {
    HeaderParser parse(origin);
    const auto end_pos = bytes.find("\nend\n");
    if (end_pos == std::string::npos || end_pos > max_header_bytes) {
        parse.corrupt("header terminator not found");
    }
    const std::size_t payload_start = end_pos + 5;
    std::vector<std::string> lines;
    {
        std::stringstream ss(bytes.substr(0, end_pos));
        std::string line;
        while (std::getline(ss, line)) lines.push_back(line);
    }
    if (lines.empty() || lines[0] != magic) {
        parse.corrupt("missing '" + std::string(magic) + "' magic line");
    }
    if (lines.size() < 5) parse.corrupt("header too short");

    auto version = split_words(lines[1]);
    if (version.size() != 2 || version[0] != "version") parse.corrupt("malformed version line");
    const auto v = parse.to_int(version[1], "version");
    if (v != format_version) {
        throw UnsupportedVersionError(origin + ": checkpoint version " + std::to_string(v) +
                                      " is not supported (this build reads version " +
                                      std::to_string(format_version) + ")");
    }

    auto words = split_words(lines[2]);
    if (words.empty() || words[0] != "config" || words.size() % 2 != 1) {
        parse.corrupt("malformed config line");
    }
    std::map<std::string, std::string> kv;
    for (std::size_t i = 1; i + 1 < words.size(); i += 2) kv[words[i]] = words[i + 1];
    auto field = [&](const char* key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) parse.corrupt(std::string("config is missing '") + key + "'");
        return it->second;
    };
    network::NetConfig config;
    config.in_channels = parse.to_int(field("in_channels"), "in_channels");
    config.base_channels = parse.to_int(field("base_channels"), "base_channels");
    config.levels = parse.to_int(field("levels"), "levels");
    config.dropout = parse.to_double(field("dropout"), "dropout");
    config.reduction = parse.to_int(field("reduction"), "reduction");
    config.input_size = parse.to_int(field("input_size"), "input_size");
    config.attention = parse.to_int(field("attention"), "attention") != 0;
    if (kv.size() != 7) parse.corrupt("config has unknown keys");
    try {
        config.validate();
    } catch (const ParameterError& e) {
        parse.corrupt(e.what());
    }

    auto seed_words = split_words(lines[3]);
    if (seed_words.size() != 2 || seed_words[0] != "init_seed") parse.corrupt("malformed init_seed line");
    std::uint64_t seed = 0;
    {
        const auto& s = seed_words[1];
        auto res = std::from_chars(s.data(), s.data() + s.size(), seed);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) parse.corrupt("bad init_seed");
    }

    std::vector<Entry> entries;
    std::size_t payload_size = 0;
    std::string crc_text;
    bool have_payload = false;
    for (std::size_t i = 4; i < lines.size(); ++i) {
        auto w = split_words(lines[i]);
        if (w.size() == 4 && w[0] == "payload" && w[2] == "crc32" && i + 1 == lines.size()) {
            payload_size = static_cast<std::size_t>(parse.to_int(w[1], "payload"));
            crc_text = w[3];
            have_payload = true;
        } else if (w.size() == 5 && (w[0] == "param" || w[0] == "buffer")) {
            if (w[2] != "f32") parse.corrupt("unsupported dtype '" + w[2] + "' for " + w[1]);
            entries.push_back({w[0], w[1], parse.to_shape(w[3]),
                               static_cast<std::size_t>(parse.to_int(w[4], "offset"))});
        } else {
            parse.corrupt("unexpected header line " + std::to_string(i + 1) + ": '" + lines[i] + "'");
        }
    }
    if (!have_payload) parse.corrupt("missing payload line");

    const std::size_t available = bytes.size() - payload_start;
    if (available < payload_size) {
        parse.corrupt("payload truncated (" + std::to_string(available) + " of " +
                      std::to_string(payload_size) + " bytes)");
    }
    if (available > payload_size) parse.corrupt("trailing bytes after payload");
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08x", crc_of(bytes.data() + payload_start, payload_size));
    if (crc_text != crc) parse.corrupt("payload checksum mismatch");

    auto model = network::Model<float>::build(config, seed);
    auto params = model.parameters();
    auto buffers = model.buffers();
    if (entries.size() != params.size() + buffers.size()) {
        throw CheckpointShapeError(origin + ": checkpoint lists " + std::to_string(entries.size()) +
                                   " tensors, architecture expects " +
                                   std::to_string(params.size() + buffers.size()));
    }
    const auto* data = reinterpret_cast<const unsigned char*>(bytes.data() + payload_start);
    std::size_t expected_offset = 0;
    auto read_into = [&](const Entry& e, const std::string& name, const Shape& shape,
                         const char* kind, std::span<float> dst) {
        if (e.kind != kind || e.name != name) {
            throw CheckpointShapeError(origin + ": expected " + kind + " '" + name + "', found " +
                                       e.kind + " '" + e.name + "'");
        }
        if (e.shape != shape) {
            throw CheckpointShapeError(origin + ": tensor '" + name + "' has shape " +
                                       to_string(e.shape) + ", architecture expects " +
                                       to_string(shape));
        }
        if (e.offset != expected_offset || e.offset + 4 * dst.size() > payload_size) {
            parse.corrupt("bad offset for '" + name + "'");
        }
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = get_f32(data + e.offset + 4 * k);
        expected_offset += 4 * dst.size();
    };
    std::size_t idx = 0;
    for (auto& p : params) {
        read_into(entries[idx++], p.name, p.tensor->shape(), "param", p.tensor->mutable_data());
    }
    for (auto& b : buffers) {
        read_into(entries[idx++], b.name, {static_cast<std::int64_t>(b.values->size())}, "buffer",
                  *b.values);
    }
    if (expected_offset != payload_size) parse.corrupt("payload size disagrees with tensor table");
    return model;
}

void save(network::Model<float>& model, const std::string& path) {
    const auto bytes = serialize(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

network::Model<float> load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes, path);
}

}  // namespace dualseg::checkpoint
