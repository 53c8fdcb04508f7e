#include "doctest.h"

#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <set>

#include "dualseg/data_io.hpp"
#include "dualseg/errors.hpp"

using namespace dualseg;
using namespace dualseg::data;
namespace fs = std::filesystem;

namespace {

const fs::path fixtures = DUALSEG_TEST_DATA;

int pattern(int x, int y) { return ((x * 7 + y * 13) ^ (x * y)) % 5; }
const int palette[5][3] = {{0, 0, 0}, {255, 255, 255}, {200, 30, 10}, {10, 180, 60}, {90, 90, 250}};

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / ("dualseg_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_pattern_gif(const std::string& name, int w, int h) {
    const auto r = read_raster((fixtures / name).string());
    REQUIRE(r.width == w);
    REQUIRE(r.height == h);
    REQUIRE(r.channels == 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const float expected = palette[pattern(x, y)][c] / 255.0f;
                REQUIRE(r.samples[static_cast<std::size_t>((y * w + x) * 3 + c)] == expected);
            }
        }
    }
}

}  // namespace

TEST_CASE("gif decoding matches the encoder's pattern") {
    check_pattern_gif("small.gif", 7, 5);
    check_pattern_gif("pattern.gif", 97, 61);
    check_pattern_gif("interlaced.gif", 33, 29);
}

TEST_CASE("gif mask fixture decodes to a disk") {
    const auto m = read_mask((fixtures / "drive_mask.gif").string());
    CHECK(m.height == 584);
    CHECK(m.width == 565);
    CHECK(m.at(292, 282) == 1);
    CHECK(m.at(0, 0) == 0);
}

TEST_CASE("damaged gif is an io error") {
    auto bytes = read_file(fixtures / "pattern.gif");
    CHECK_THROWS_AS(decode_gif(bytes.substr(0, bytes.size() / 2), "half"), IoError);
    CHECK_THROWS_AS(decode_gif("GIF89a", "short"), IoError);
    CHECK_THROWS_AS(decode_gif("NOTAGIF......", "bad"), IoError);
}

TEST_CASE("pnm round trip and variants") {
    TempDir dir("pnm");
    Plane<std::uint8_t> img(3, 5);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 17);
    const auto path = (dir.path / "a.pgm").string();
    write_pgm(path, img);
    CHECK(read_file(path).substr(0, 11) == "P5\n5 3\n255\n");
    const auto back = quantize(read_gray(path));
    CHECK(back == img);

    const auto ascii = decode_pnm("P2\n# comment\n2 1\n4\n0 4\n", "ascii");
    CHECK(ascii.samples == std::vector<float>{0.0f, 1.0f});
    const std::string wide = std::string("P5 1 1 65535\n") + char(0x80) + char(0x00);
    CHECK(decode_pnm(wide, "wide").samples[0] == doctest::Approx(32768.0 / 65535.0));
    CHECK_THROWS_AS(decode_pnm("P5\n4 4\n255\nabc", "short"), IoError);
    CHECK_THROWS_AS(decode_pnm("P7\n", "pam"), IoError);
}

TEST_CASE("gzipped ppm, tif and png agree on the same pixels") {
    const auto ppm = read_raster((fixtures / "rgb.ppm.gz").string());
    const auto tif = read_raster((fixtures / "rgb.tif").string());
    const auto png = read_raster((fixtures / "rgb.png").string());
    REQUIRE(ppm.channels == 3);
    CHECK(ppm.samples == tif.samples);
    CHECK(ppm.samples == png.samples);
    // green channel: (y*5 + x) % 256
    const auto g = read_gray((fixtures / "rgb.tif").string());
    CHECK(g.at(2, 3) == 13.0f / 255.0f);
    const auto gray = read_gray((fixtures / "gray.png").string());
    CHECK(gray.at(4, 6) == static_cast<float>((6 * 11 + 4 * 17) % 256) / 255.0f);
    CHECK_THROWS_AS(read_raster((fixtures / "missing.png").string()), IoError);
}

TEST_CASE("dataset spec syntax") {
    auto d = parse_dataset_spec("drive:/data/DRIVE:train");
    CHECK(d.name == "drive");
    CHECK(d.root == "/data/DRIVE");
    CHECK(d.split == "train");
    auto s = parse_dataset_spec("synth:10:64:3");
    CHECK(s.count == 10);
    CHECK(s.size == 64);
    CHECK(s.seed == 3);
    CHECK(parse_dataset_spec("stare:/x:test:/x/test.txt").list_file == "/x/test.txt");
    CHECK_THROWS_AS(parse_dataset_spec("drive:/x"), ConfigError);
    CHECK_THROWS_AS(parse_dataset_spec("imagenet:/x:train"), ConfigError);
    CHECK_THROWS_AS(parse_dataset_spec("synth:ten:64:3"), ConfigError);
    CHECK_THROWS_AS(load_dataset(parse_dataset_spec("drive:/x:validation")), ConfigError);
}

TEST_CASE("drive layout") {
    TempDir dir("drive");
    const auto split = dir.path / "training";
    for (const char* sub : {"images", "1st_manual", "mask"}) fs::create_directories(split / sub);
    cv::Mat img(584, 565, CV_8UC3, cv::Scalar(10, 128, 250));
    for (int n = 21; n <= 40; ++n) {
        const auto num = std::to_string(n);
        cv::imwrite((split / "images" / (num + "_training.tif")).string(), img);
        fs::copy_file(fixtures / "drive_mask.gif", split / "1st_manual" / (num + "_manual1.gif"));
        fs::copy_file(fixtures / "drive_mask.gif", split / "mask" / (num + "_training_mask.gif"));
    }
    auto samples = load_dataset(parse_dataset_spec("drive:" + dir.path.string() + ":train"));
    REQUIRE(samples.size() == 20);
    CHECK(samples.front().id == "21_training");
    CHECK(samples.back().id == "40_training");
    CHECK(samples[0].image.height == 584);
    CHECK(samples[0].image.width == 565);
    CHECK(samples[0].image.at(10, 10) == 128.0f / 255.0f);  // green channel
    CHECK(samples[0].fov.has_value());

    fs::remove(split / "1st_manual" / "25_manual1.gif");
    CHECK_THROWS_WITH_AS(load_dataset(parse_dataset_spec("drive:" + dir.path.string() + ":train")),
                         doctest::Contains("25_manual1.gif"), DatasetError);
    fs::remove(split / "images" / "25_training.tif");
    CHECK_THROWS_WITH_AS(load_dataset(parse_dataset_spec("drive:" + dir.path.string() + ":train")),
                         doctest::Contains("expected 20"), DatasetError);
}

TEST_CASE("chasedb1 layout splits 20/8") {
    TempDir dir("chase");
    cv::Mat img(960, 999, CV_8UC3, cv::Scalar(0, 100, 0));
    cv::Mat label(960, 999, CV_8UC1, cv::Scalar(0));
    label.at<std::uint8_t>(5, 7) = 255;
    for (int n = 1; n <= 14; ++n) {
        for (const char* eye : {"L", "R"}) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "Image_%02d%s", n, eye);
            cv::imwrite((dir.path / (std::string(stem) + ".jpg")).string(), img);
            cv::imwrite((dir.path / (std::string(stem) + "_1stHO.png")).string(), label);
        }
    }
    auto train = load_dataset(parse_dataset_spec("chasedb1:" + dir.path.string() + ":train"));
    auto test = load_dataset(parse_dataset_spec("chasedb1:" + dir.path.string() + ":test"));
    CHECK(train.size() == 20);
    CHECK(test.size() == 8);
    CHECK(test.front().id == "Image_11L");
    CHECK(train[0].image.width == 999);
    CHECK(train[0].label.at(5, 7) == 1);
    CHECK_FALSE(train[0].fov.has_value());
}

TEST_CASE("stare layout reads gzipped ppm from a list file") {
    TempDir dir("stare");
    fs::create_directories(dir.path / "stare-images");
    fs::create_directories(dir.path / "labels-ah");
    RgbImage img{605, 700, std::vector<std::uint8_t>(605 * 700 * 3, 60)};
    for (const char* id : {"im0001", "im0002"}) {
        const auto plain = (dir.path / "stare-images" / (std::string(id) + ".ppm")).string();
        write_ppm(plain, img);
        // gzip the label with zlib directly
        const auto bytes = read_file(plain);
        gzFile gz = gzopen((dir.path / "labels-ah" / (std::string(id) + ".ah.ppm.gz")).string().c_str(), "wb");
        gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(gz);
    }
    std::ofstream(dir.path / "train.txt") << "# ids\nim0002\nim0001\n";
    auto samples = load_dataset(parse_dataset_spec("stare:" + dir.path.string() + ":train:" +
                                                   (dir.path / "train.txt").string()));
    REQUIRE(samples.size() == 2);
    CHECK(samples[0].id == "im0001");
    CHECK(samples[0].label.at(0, 0) == 1);
    std::ofstream(dir.path / "bad.txt") << "im0003\n";
    CHECK_THROWS_WITH_AS(load_dataset(parse_dataset_spec("stare:" + dir.path.string() + ":train:" +
                                                         (dir.path / "bad.txt").string())),
                         doctest::Contains("im0003.ppm"), DatasetError);
}

TEST_CASE("padding to multiples of 16") {
    Sample s;
    s.id = "drive";
    s.image = GrayImage(584, 565, 0.5f);
    s.label = LabelMask(584, 565, 1);
    s.fov = LabelMask(584, 565, 1);
    auto p = pad_to_multiple(s);
    CHECK(p.sample.image.height == 592);
    CHECK(p.sample.image.width == 576);
    CHECK(p.sample.image.at(590, 570) == 0.0f);
    CHECK(p.sample.fov->at(590, 570) == 0);
    CHECK(unpad(p.sample.image, p.original_height, p.original_width) == s.image);
    CHECK(unpad(p.sample.label, p.original_height, p.original_width) == s.label);

    Sample aligned = s;
    aligned.image = GrayImage(64, 64, 0.1f);
    aligned.label = LabelMask(64, 64);
    aligned.fov.reset();
    auto q = pad_to_multiple(aligned);
    CHECK(q.sample.image == aligned.image);
}

TEST_CASE("patch corners are deterministic and in bounds") {
    auto s = synth_vessel_sample(0, 64, 5);
    Rng a(9), b(9);
    CHECK(sample_corners(s, 32, 8, a) == sample_corners(s, 32, 8, b));
    Rng rng(1);
    std::set<std::pair<std::int64_t, std::int64_t>> seen;
    for (const auto& c : sample_corners(s, 32, 1000, rng)) {
        REQUIRE(c.y >= 0);
        REQUIRE(c.x >= 0);
        REQUIRE(c.y + 32 <= 64);
        REQUIRE(c.x + 32 <= 64);
        seen.insert({c.y, c.x});
    }
    CHECK(seen.size() > 500);
    auto full = sample_patches(s, 64, 1, rng);
    CHECK(full[0].image == s.image);
    CHECK(full[0].label == s.label);
    CHECK_THROWS_AS(sample_corners(s, 40, 1, rng), ParameterError);
    CHECK_THROWS_AS(sample_corners(s, 80, 1, rng), ParameterError);
}

TEST_CASE("patches avoid windows outside the fov") {
    Sample s;
    s.id = "corner";
    s.image = GrayImage(64, 64);
    s.label = LabelMask(64, 64);
    s.fov = LabelMask(64, 64);
    // fov only in the bottom-right 16x16 block
    for (int y = 48; y < 64; ++y)
        for (int x = 48; x < 64; ++x) s.fov->at(y, x) = 1;
    Rng rng(3);
    int covered = 0;
    for (const auto& c : sample_corners(s, 16, 200, rng)) covered += (c.y > 32 && c.x > 32);
    // A single draw qualifies about 10% of the time; eleven draws push that near 70%.
    CHECK(covered > 110);
}

TEST_CASE("augmentation transforms") {
    Patch p;
    p.image = GrayImage(4, 4);
    p.label = LabelMask(4, 4);
    p.fov = LabelMask(4, 4, 1);
    p.image.at(0, 1) = 1.0f;
    p.label.at(0, 1) = 1;

    auto h = p;
    apply_transform(h, Transform{true, false, 0});
    CHECK(h.image.at(0, 2) == 1.0f);
    CHECK(h.label.at(0, 2) == 1);
    apply_transform(h, Transform{true, false, 0});
    CHECK(h.image == p.image);

    auto v = p;
    apply_transform(v, Transform{false, true, 0});
    CHECK(v.label.at(3, 1) == 1);
    CHECK(v.image.at(3, 1) == 1.0f);

    auto r = p;
    apply_transform(r, Transform{false, false, 1});
    CHECK(r.label.at(2, 0) == 1);  // (y, x) = (0, 1) turns to (n-1-x, y)
    apply_transform(r, Transform{false, false, 3});
    CHECK(r.label == p.label);

    auto id = p;
    apply_transform(id, Transform{});
    CHECK(id.image == p.image);

    Rng rng(4);
    std::set<std::tuple<bool, bool, int>> kinds;
    for (int i = 0; i < 200; ++i) {
        auto t = draw_transform(rng);
        kinds.insert({t.hflip, t.vflip, t.quarter_turns});
        auto q = p;
        apply_transform(q, t);
        // image and label move together
        for (std::size_t k = 0; k < 16; ++k) REQUIRE((q.image.pixels[k] == 1.0f) == (q.label.pixels[k] == 1));
    }
    CHECK(kinds.size() == 16);
}

TEST_CASE("synthetic generator") {
    auto a = synth_vessels(3, 64, 11);
    auto b = synth_vessels(3, 64, 11);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a[i].image == b[i].image);
        CHECK(a[i].label == b[i].label);
        validate(a[i]);
    }
    CHECK(a[0].image != synth_vessels(1, 64, 12)[0].image);
    CHECK(a[0].id == "synth_0000");
    CHECK_THROWS_AS(synth_vessels(1, 16, 1), ParameterError);

    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto s = synth_vessel_sample(0, 64, seed);
        double vessels = 0, fov = 0;
        for (std::size_t i = 0; i < s.label.pixels.size(); ++i) {
            vessels += s.label.pixels[i];
            fov += s.fov->pixels[i];
            // label lies inside the fov and vessels are darker than the local background
            REQUIRE(s.label.pixels[i] <= s.fov->pixels[i]);
        }
        const double fraction = vessels / fov;
        INFO("seed " << seed);
        REQUIRE(fraction >= 0.02);
        REQUIRE(fraction <= 0.20);
    }
}

TEST_CASE("synthetic directory round trip") {
    TempDir one("synth_one"), two("synth_two");
    write_synthetic(one.path.string(), 4, 64, 1);
    write_synthetic(two.path.string(), 4, 64, 1);
    for (const auto& e : fs::recursive_directory_iterator(one.path)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), one.path);
        CHECK(read_file(e.path()) == read_file(two.path / rel));
    }
    std::ifstream manifest(one.path / "manifest.txt");
    int lines = 0;
    for (std::string l; std::getline(manifest, l);) ++lines;
    CHECK(lines == 5);

    auto loaded = load_dataset(parse_dataset_spec("synthetic:" + one.path.string()));
    auto memory = synth_vessels(4, 64, 1);
    REQUIRE(loaded.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(loaded[i].id == memory[i].id);
        CHECK(loaded[i].image == memory[i].image);
        CHECK(loaded[i].label == memory[i].label);
        CHECK(*loaded[i].fov == *memory[i].fov);
    }

    TempDir empty("synth_empty");
    write_synthetic(empty.path.string(), 0, 64, 1);
    CHECK(read_file(empty.path / "manifest.txt") == "dualseg-synthetic seed 1 size 64 count 0\n");
    CHECK(load_dataset(parse_dataset_spec("synthetic:" + empty.path.string())).empty());
}
