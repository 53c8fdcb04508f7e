#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualseg/data_io.hpp"
#include "dualseg/errors.hpp"

namespace fs = std::filesystem;

namespace dualseg::data {

void validate(const Sample& s) {
    const auto where = "sample '" + s.id + "': ";
    if (!s.image.same_shape(s.label)) throw DatasetError(where + "image and label sizes differ");
    if (s.fov && !s.image.same_shape(*s.fov)) throw DatasetError(where + "image and fov sizes differ");
    for (float v : s.image.pixels) {
        if (!(v >= 0.0f && v <= 1.0f)) throw DatasetError(where + "intensity outside [0, 1]");
    }
    auto binary = [](const LabelMask& m) {
        return std::all_of(m.pixels.begin(), m.pixels.end(), [](auto v) { return v <= 1; });
    };
    if (!binary(s.label) || (s.fov && !binary(*s.fov))) throw DatasetError(where + "mask is not binary");
}

namespace {

struct Layout {
    std::int64_t count;  // 0: taken from the list file
    std::int64_t height;
    std::int64_t width;
};

std::vector<std::string> split_colon(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string p;
    while (std::getline(ss, p, ':')) parts.push_back(p);
    if (!text.empty() && text.back() == ':') parts.emplace_back();
    return parts;
}

std::int64_t parse_int(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const auto v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("dataset spec: " + what + " must be an integer, got '" + s + "'");
    }
}

std::string require_file(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw DatasetError("missing file '" + p.string() + "'");
    return p.string();
}

// First existing candidate, else an error naming the first.
std::string first_existing(const std::vector<fs::path>& candidates) {
    for (const auto& c : candidates) {
        if (fs::is_regular_file(c)) return c.string();
    }
    throw DatasetError("missing file '" + candidates.front().string() + "'");
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& prefix, const std::string& suffix) {
    if (!fs::is_directory(dir)) throw DatasetError("missing directory '" + dir.string() + "'");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && name.size() >= prefix.size() + suffix.size() &&
            name.compare(0, prefix.size(), prefix) == 0 &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

template <typename F>
auto wrap_io(const std::string& path, F&& f) {
    try {
        return f(path);
    } catch (const IoError& e) {
        throw DatasetError(std::string("unreadable file: ") + e.what());
    }
}

Sample load_sample(const std::string& id, const std::string& image, const std::string& label,
                   const std::string& fov, const Layout& layout) {
    Sample s;
    s.id = id;
    s.image = wrap_io(image, read_gray);
    s.label = wrap_io(label, read_mask);
    if (!fov.empty()) s.fov = wrap_io(fov, read_mask);
    if (layout.height && (s.image.height != layout.height || s.image.width != layout.width)) {
        throw DatasetError("'" + image + "' is " + std::to_string(s.image.height) + "x" +
                           std::to_string(s.image.width) + ", expected " + std::to_string(layout.height) +
                           "x" + std::to_string(layout.width));
    }
    if (!s.label.same_shape(s.image)) {
        throw DatasetError("'" + label + "' size does not match '" + image + "'");
    }
    if (s.fov && !s.fov->same_shape(s.image)) {
        throw DatasetError("'" + fov + "' size does not match '" + image + "'");
    }
    return s;
}

void check_count(std::size_t found, std::int64_t expected, const std::string& where) {
    if (static_cast<std::int64_t>(found) != expected) {
        throw DatasetError(where + ": found " + std::to_string(found) + " images, expected " +
                           std::to_string(expected));
    }
}

void require_split(const DatasetSpec& spec) {
    if (spec.split != "train" && spec.split != "test") {
        throw ConfigError("dataset spec: split must be 'train' or 'test', got '" + spec.split + "'");
    }
}

// DRIVE: {training,test}/images/NN_<split>.tif, 1st_manual/NN_manual1.gif,
// mask/NN_<split>_mask.gif. 20 images per split, 584 rows x 565 columns.
std::vector<Sample> load_drive(const DatasetSpec& spec) {
    require_split(spec);
    const Layout layout{20, 584, 565};
    const fs::path dir = fs::path(spec.root) / (spec.split == "train" ? "training" : "test");
    auto images = list_files(dir / "images", "", ".tif");
    check_count(images.size(), layout.count, (dir / "images").string());
    std::vector<Sample> out;
    for (const auto& img : images) {
        const auto stem = img.stem().string();
        const auto number = stem.substr(0, stem.find('_'));
        const auto label = require_file(dir / "1st_manual" / (number + "_manual1.gif"));
        const auto fov = require_file(dir / "mask" / (stem + "_mask.gif"));
        out.push_back(load_sample(stem, img.string(), label, fov, layout));
    }
    return out;
}

// CHASE_DB1: flat Image_NNX.jpg with Image_NNX_1stHO.png. The 28 images are
// split 20 / 8 in file-name order. 960 rows x 999 columns.
std::vector<Sample> load_chasedb1(const DatasetSpec& spec) {
    require_split(spec);
    const Layout layout{28, 960, 999};
    auto images = list_files(spec.root, "Image_", ".jpg");
    check_count(images.size(), layout.count, spec.root);
    const std::size_t begin = spec.split == "train" ? 0 : 20;
    const std::size_t end = spec.split == "train" ? 20 : 28;
    std::vector<Sample> out;
    for (std::size_t i = begin; i < end; ++i) {
        const auto stem = images[i].stem().string();
        const auto label = require_file(fs::path(spec.root) / (stem + "_1stHO.png"));
        out.push_back(load_sample(stem, images[i].string(), label, "", layout));
    }
    return out;
}

// STARE: stare-images/imNNNN.ppm[.gz], labels-ah/imNNNN.ah.ppm[.gz]; the ids
// of the split come from a list file. 605 rows x 700 columns.
std::vector<Sample> load_stare(const DatasetSpec& spec) {
    require_split(spec);
    if (spec.list_file.empty()) throw ConfigError("dataset spec: stare needs a list file");
    std::ifstream in(spec.list_file);
    if (!in) throw DatasetError("missing list file '" + spec.list_file + "'");
    std::vector<std::string> ids;
    for (std::string line; std::getline(in, line);) {
        std::istringstream words(line);
        std::string id;
        if (words >> id && id[0] != '#') ids.push_back(id);
    }
    if (ids.empty()) throw DatasetError("list file '" + spec.list_file + "' names no images");
    std::sort(ids.begin(), ids.end());
    const Layout layout{0, 605, 700};
    const fs::path root(spec.root);
    std::vector<Sample> out;
    for (const auto& id : ids) {
        const auto image = first_existing({root / "stare-images" / (id + ".ppm"),
                                           root / "stare-images" / (id + ".ppm.gz")});
        const auto label = first_existing({root / "labels-ah" / (id + ".ah.ppm"),
                                           root / "labels-ah" / (id + ".ah.ppm.gz")});
        out.push_back(load_sample(id, image, label, "", layout));
    }
    return out;
}

// Directory written by write_synthetic.
std::vector<Sample> load_synthetic(const DatasetSpec& spec) {
    const fs::path root(spec.root);
    const auto manifest = require_file(root / "manifest.txt");
    std::ifstream in(manifest);
    std::string header;
    std::getline(in, header);
    std::istringstream h(header);
    std::string magic, k1, k2, k3;
    std::uint64_t seed = 0;
    std::int64_t size = 0, count = 0;
    if (!(h >> magic >> k1 >> seed >> k2 >> size >> k3 >> count) || magic != "dualseg-synthetic" ||
        k1 != "seed" || k2 != "size" || k3 != "count") {
        throw DatasetError("'" + manifest + "': malformed header");
    }
    std::vector<Sample> out;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        std::istringstream w(line);
        std::string id, image, label, fov;
        if (!(w >> id >> image >> label >> fov)) throw DatasetError("'" + manifest + "': malformed line '" + line + "'");
        out.push_back(load_sample(id, require_file(root / image), require_file(root / label),
                                  require_file(root / fov), Layout{0, size, size}));
    }
    check_count(out.size(), count, manifest);
    return out;
}

}  // namespace

DatasetSpec parse_dataset_spec(const std::string& text) {
    const auto parts = split_colon(text);
    DatasetSpec spec;
    if (parts.empty()) throw ConfigError("dataset spec is empty");
    spec.name = parts[0];
    auto arity = [&](std::size_t lo, std::size_t hi, const char* form) {
        if (parts.size() < lo || parts.size() > hi) {
            throw ConfigError("dataset spec '" + text + "': expected " + form);
        }
    };
    if (spec.name == "drive" || spec.name == "chasedb1") {
        arity(3, 3, "NAME:ROOT:SPLIT");
        spec.root = parts[1];
        spec.split = parts[2];
    } else if (spec.name == "stare") {
        arity(4, 4, "stare:ROOT:SPLIT:LISTFILE");
        spec.root = parts[1];
        spec.split = parts[2];
        spec.list_file = parts[3];
    } else if (spec.name == "synthetic") {
        arity(2, 2, "synthetic:DIR");
        spec.root = parts[1];
    } else if (spec.name == "synth") {
        arity(4, 4, "synth:COUNT:SIZE:SEED");
        spec.count = parse_int(parts[1], "count");
        spec.size = parse_int(parts[2], "size");
        spec.seed = static_cast<std::uint64_t>(parse_int(parts[3], "seed"));
        if (spec.count < 0 || spec.size < 32) throw ConfigError("dataset spec '" + text + "': count >= 0 and size >= 32 required");
    } else {
        throw ConfigError("dataset spec: unknown dataset '" + spec.name +
                          "' (expected drive, stare, chasedb1, synthetic or synth)");
    }
    if (spec.root.empty() && spec.name != "synth") throw ConfigError("dataset spec '" + text + "': empty root");
    return spec;
}

std::vector<Sample> load_dataset(const DatasetSpec& spec) {
    std::vector<Sample> out;
    if (spec.name == "drive") out = load_drive(spec);
    else if (spec.name == "chasedb1") out = load_chasedb1(spec);
    else if (spec.name == "stare") out = load_stare(spec);
    else if (spec.name == "synthetic") out = load_synthetic(spec);
    else if (spec.name == "synth") out = synth_vessels(spec.count, spec.size, spec.seed);
    else throw ConfigError("unknown dataset '" + spec.name + "'");
    for (const auto& s : out) validate(s);
    return out;
}

Padded pad_to_multiple(const Sample& s, std::int64_t multiple) {
    if (multiple <= 0) throw ParameterError("pad_to_multiple: multiple must be positive");
    Padded p;
    p.original_height = s.image.height;
    p.original_width = s.image.width;
    const auto h = (s.image.height + multiple - 1) / multiple * multiple;
    const auto w = (s.image.width + multiple - 1) / multiple * multiple;
    p.sample.id = s.id;
    p.sample.image = pad_plane(s.image, h, w);
    p.sample.label = pad_plane(s.label, h, w);
    if (s.fov) p.sample.fov = pad_plane(*s.fov, h, w);
    return p;
}

}  // namespace dualseg::data
