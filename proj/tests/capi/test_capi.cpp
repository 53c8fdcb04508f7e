#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dualseg/dualseg.h"

namespace fs = std::filesystem;

extern "C" int dseg_header_is_c(void);

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const char* leaf) const { return (path / leaf).string(); }
};

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

dseg_config* tiny_config(const TempDir& dir) {
    dseg_config* c = nullptr;
    REQUIRE(dseg_config_new(&c) == DSEG_OK);
    const std::pair<const char*, std::string> fields[] = {
        {"train_dataset", "synth:3:32:5"}, {"test_dataset", "synth:2:32:6"},  {"steps", "4"},
        {"batch_size", "2"},               {"patch_size", "32"},              {"eval_every", "2"},
        {"base_channels", "4"},            {"levels", "2"},                   {"reduction", "2"},
        {"checkpoint", dir / "best.ckpt"}, {"log", dir / "train.log"},
    };
    for (const auto& [k, v] : fields) REQUIRE(dseg_config_set(c, k, v.c_str()) == DSEG_OK);
    return c;
}

}  // namespace

TEST_CASE("header compiles as C") { CHECK(dseg_header_is_c() == 0); }

TEST_CASE("status names and errors") {
    CHECK(std::string(dseg_status_name(DSEG_OK)) == "ok");
    CHECK(std::string(dseg_status_name(DSEG_ERR_CORRUPT_CHECKPOINT)) == "corrupt checkpoint");
    CHECK(std::string(dseg_version()) == "1.0.0");
    dseg_model* m = nullptr;
    CHECK(dseg_model_load("/nonexistent/model.ckpt", &m) == DSEG_ERR_IO);
    CHECK(m == nullptr);
    CHECK(std::string(dseg_last_error()).find("/nonexistent/model.ckpt") != std::string::npos);
    CHECK(dseg_model_load(nullptr, &m) == DSEG_ERR_INVALID_ARGUMENT);
    CHECK(dseg_image_load("/nonexistent.png", nullptr) == DSEG_ERR_INVALID_ARGUMENT);
    // freeing null handles is a no-op
    dseg_model_free(nullptr);
    dseg_config_free(nullptr);
    dseg_image_free(nullptr);
    dseg_report_free(nullptr);
    dseg_free(nullptr);
}

TEST_CASE("config keys and errors") {
    REQUIRE(dseg_config_key_count() > 10);
    for (size_t i = 0; i < dseg_config_key_count(); ++i) {
        CHECK(dseg_config_key_name(i) != nullptr);
        CHECK(std::string(dseg_config_key_help(i)).size() > 0);
    }
    CHECK(dseg_config_key_name(dseg_config_key_count()) == nullptr);
    dseg_config* c = nullptr;
    REQUIRE(dseg_config_new(&c) == DSEG_OK);
    CHECK(dseg_config_set(c, "stepz", "3") == DSEG_ERR_CONFIG);
    CHECK(std::string(dseg_last_error()).find("stepz") != std::string::npos);
    CHECK(dseg_config_set(c, "steps", "0") == DSEG_OK);
    CHECK(dseg_config_set(c, "train_dataset", "synth:1:32:1") == DSEG_OK);
    CHECK(dseg_config_validate(c) == DSEG_ERR_CONFIG);
    CHECK(std::string(dseg_last_error()).find("'steps'") != std::string::npos);
    dseg_config_free(c);
}

TEST_CASE("synth, train, load, predict, evaluate") {
    TempDir dir("dualseg_capi");
    REQUIRE(dseg_synth_write((dir / "synth").c_str(), 2, 32, 3) == DSEG_OK);
    CHECK(fs::exists(dir / "synth/manifest.txt"));

    dseg_config* c = tiny_config(dir);
    dseg_train_summary s{};
    REQUIRE(dseg_train(c, &s) == DSEG_OK);
    CHECK(s.steps == 4);
    CHECK(std::isfinite(s.final_loss));
    CHECK(s.has_best == 1);

    dseg_model* m = nullptr;
    REQUIRE(dseg_model_load((dir / "best.ckpt").c_str(), &m) == DSEG_OK);
    int64_t count = 0;
    CHECK(dseg_model_parameter_count(m, &count) == DSEG_OK);
    CHECK(count > 0);
    REQUIRE(dseg_model_save(m, (dir / "copy.ckpt").c_str()) == DSEG_OK);
    CHECK(slurp(dir / "copy.ckpt") == slurp(dir / "best.ckpt"));

    dseg_report* r = nullptr;
    REQUIRE(dseg_evaluate(m, "synth:2:32:6", &r) == DSEG_OK);
    dseg_metrics mean{};
    CHECK(dseg_report_mean(r, &mean) == DSEG_OK);
    CHECK(mean.f1 == doctest::Approx(s.best.f1).epsilon(1e-12));
    CHECK(dseg_report_rows(r) == 2);
    REQUIRE(dseg_report_write(r, (dir / "report.txt").c_str()) == DSEG_OK);
    CHECK(slurp(dir / "report.txt") == dseg_report_table(r));
    CHECK(slurp(dir / "report.txt.kv") == dseg_report_keyvalue(r));
    dseg_report_free(r);

    dseg_image* img = nullptr;
    REQUIRE(dseg_image_load((dir / "synth/images/synth_0000.pgm").c_str(), &img) == DSEG_OK);
    int64_t h = 0, w = 0;
    int ch = 0;
    dseg_image_size(img, &h, &w, &ch);
    CHECK(h == 32);
    CHECK(w == 32);
    CHECK(ch == 1);
    std::vector<float> p(static_cast<size_t>(h * w));
    REQUIRE(dseg_predict(m, img, p.data()) == DSEG_OK);
    for (float v : p) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(dseg_write_probability_pgm((dir / "p.pgm").c_str(), p.data(), h, w) == DSEG_OK);
    CHECK(dseg_write_mask_pgm((dir / "m.pgm").c_str(), p.data(), h, w, 0.5) == DSEG_OK);
    CHECK(dseg_write_overlay_ppm((dir / "o.ppm").c_str(), img, p.data(), 0.5) == DSEG_OK);
    CHECK(dseg_write_raw_f32((dir / "p.f32").c_str(), p.data(), h * w) == DSEG_OK);
    CHECK(fs::file_size(dir / "p.f32") == static_cast<uintmax_t>(4 * h * w));
    CHECK(dseg_write_mask_pgm((dir / "m.pgm").c_str(), p.data(), h, w, 1.5) == DSEG_ERR_PARAMETER);
    dseg_image_free(img);
    dseg_model_free(m);
    dseg_config_free(c);
}

TEST_CASE("ground-truth evaluation and corrupt checkpoints") {
    dseg_report* r = nullptr;
    REQUIRE(dseg_evaluate(nullptr, "synth:3:32:9", &r) == DSEG_OK);
    CHECK(std::string(dseg_report_keyvalue(r)) == "ACC 1.000000\nSE 1.000000\nSP 1.000000\nF1 1.000000\nAUC 1.000000\n");
    dseg_report_free(r);
    CHECK(dseg_evaluate(nullptr, "synth:0:32:9", &r) == DSEG_ERR_CONTRACT);

    TempDir dir("dualseg_capi_corrupt");
    {
        std::ofstream(dir / "bad.ckpt") << "not a checkpoint\n";
    }
    dseg_model* m = nullptr;
    CHECK(dseg_model_load((dir / "bad.ckpt").c_str(), &m) == DSEG_ERR_CORRUPT_CHECKPOINT);
}

TEST_CASE("gradient check through the C interface") {
    int passed = 0;
    char* table = nullptr;
    REQUIRE(dseg_gradcheck("model", 1, &passed, &table) == DSEG_OK);
    CHECK(passed == 1);
    CHECK(std::string(table).find("model") != std::string::npos);
    dseg_free(table);
    CHECK(dseg_gradcheck("everything", 1, &passed, nullptr) == DSEG_ERR_CONFIG);
}
