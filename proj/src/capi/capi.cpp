#include "dualseg/dualseg.h"

#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <string>

#include "dualseg/checkpoint.hpp"
#include "dualseg/data_io.hpp"
#include "dualseg/errors.hpp"
#include "dualseg/gradsuite.hpp"
#include "dualseg/metrics.hpp"
#include "dualseg/report.hpp"
#include "dualseg/training.hpp"

using namespace dualseg;

struct dseg_config {
    training::TrainConfig value;
};

struct dseg_model {
    network::Model<float> value;
};

struct dseg_image {
    data::Raster value;
};

struct dseg_report {
    metrics::Report value;
    std::string table;
    std::string keyvalue;
};

namespace {

thread_local std::string last_error;

dseg_status code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return DSEG_ERR_DIMENSION;
        case ErrorKind::parameter: return DSEG_ERR_PARAMETER;
        case ErrorKind::contract: return DSEG_ERR_CONTRACT;
        case ErrorKind::resource: return DSEG_ERR_RESOURCE;
        case ErrorKind::numeric: return DSEG_ERR_NUMERIC;
        case ErrorKind::io: return DSEG_ERR_IO;
        case ErrorKind::corrupt_checkpoint: return DSEG_ERR_CORRUPT_CHECKPOINT;
        case ErrorKind::checkpoint_shape: return DSEG_ERR_CHECKPOINT_SHAPE;
        case ErrorKind::unsupported_version: return DSEG_ERR_UNSUPPORTED_VERSION;
        case ErrorKind::config: return DSEG_ERR_CONFIG;
        case ErrorKind::dataset: return DSEG_ERR_DATASET;
    }
    return DSEG_ERR_INTERNAL;
}

dseg_status fail(dseg_status status, std::string message) {
    last_error = std::move(message);
    return status;
}

// Runs `body`, translating exceptions into status codes.
template <typename F>
dseg_status guarded(F&& body) {
    try {
        body();
        return DSEG_OK;
    } catch (const Error& e) {
        return fail(code_for(e.kind()), e.what());
    } catch (const std::bad_alloc&) {
        return fail(DSEG_ERR_RESOURCE, "out of memory");
    } catch (const std::exception& e) {
        return fail(DSEG_ERR_INTERNAL, e.what());
    }
}

#define DSEG_REQUIRE(ptr)                                                                  \
    do {                                                                                   \
        if ((ptr) == nullptr) return fail(DSEG_ERR_INVALID_ARGUMENT, #ptr " must not be null"); \
    } while (0)

ProbabilityMap to_map(const float* p, std::int64_t height, std::int64_t width) {
    if (height <= 0 || width <= 0) {
        throw DimensionError("image size must be positive, got " + std::to_string(height) + "x" +
                             std::to_string(width));
    }
    ProbabilityMap m(height, width);
    std::memcpy(m.pixels.data(), p, m.pixels.size() * sizeof(float));
    return m;
}

GrayImage gray_of(const data::Raster& r) {
    GrayImage g(r.height, r.width);
    const auto ch = static_cast<std::size_t>(r.channels);
    const std::size_t offset = ch == 3 ? 1 : 0;
    for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = r.samples[i * ch + offset];
    return g;
}

}  // namespace

extern "C" {

const char* dseg_version(void) { return "1.0.0"; }

const char* dseg_status_name(dseg_status status) {
    switch (status) {
        case DSEG_OK: return "ok";
        case DSEG_ERR_DIMENSION: return "dimension";
        case DSEG_ERR_PARAMETER: return "parameter";
        case DSEG_ERR_CONTRACT: return "contract";
        case DSEG_ERR_RESOURCE: return "resource";
        case DSEG_ERR_NUMERIC: return "numeric";
        case DSEG_ERR_IO: return "io";
        case DSEG_ERR_CORRUPT_CHECKPOINT: return "corrupt checkpoint";
        case DSEG_ERR_CHECKPOINT_SHAPE: return "checkpoint shape";
        case DSEG_ERR_UNSUPPORTED_VERSION: return "unsupported version";
        case DSEG_ERR_CONFIG: return "config";
        case DSEG_ERR_DATASET: return "dataset";
        case DSEG_ERR_INVALID_ARGUMENT: return "invalid argument";
        case DSEG_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* dseg_last_error(void) { return last_error.c_str(); }

void dseg_free(char* text) { std::free(text); }

dseg_status dseg_synth_write(const char* dir, int64_t count, int64_t size, uint64_t seed) {
    DSEG_REQUIRE(dir);
    return guarded([&] { data::write_synthetic(dir, count, size, seed); });
}

// ------------------------------------------------------------------ config

dseg_status dseg_config_new(dseg_config** out) {
    DSEG_REQUIRE(out);
    return guarded([&] { *out = new dseg_config{}; });
}

dseg_status dseg_config_load(const char* path, dseg_config** out) {
    DSEG_REQUIRE(path);
    DSEG_REQUIRE(out);
    return guarded([&] { *out = new dseg_config{training::load_config(path)}; });
}

dseg_status dseg_config_set(dseg_config* config, const char* key, const char* value) {
    DSEG_REQUIRE(config);
    DSEG_REQUIRE(key);
    DSEG_REQUIRE(value);
    return guarded([&] { training::set_field(config->value, key, value); });
}

dseg_status dseg_config_validate(const dseg_config* config) {
    DSEG_REQUIRE(config);
    return guarded([&] { config->value.validate(); });
}

void dseg_config_free(dseg_config* config) { delete config; }

size_t dseg_config_key_count(void) { return training::config_keys().size(); }

const char* dseg_config_key_name(size_t index) {
    const auto& keys = training::config_keys();
    return index < keys.size() ? keys[index].first.c_str() : nullptr;
}

const char* dseg_config_key_help(size_t index) {
    const auto& keys = training::config_keys();
    return index < keys.size() ? keys[index].second.c_str() : nullptr;
}

dseg_status dseg_train(const dseg_config* config, dseg_train_summary* summary) {
    DSEG_REQUIRE(config);
    return guarded([&] {
        const auto result = training::train(config->value);
        if (summary == nullptr) return;
        *summary = dseg_train_summary{};
        summary->steps = result.log.losses.empty() ? 0 : result.log.losses.back().first;
        summary->final_loss = result.log.losses.empty() ? 0.0 : result.log.losses.back().second;
        if (result.best) {
            const auto& m = result.best->mean;
            summary->has_best = 1;
            summary->best_step = result.best->step;
            summary->best = {m.acc, m.se, m.sp, m.f1, m.auc};
        }
    });
}

// ------------------------------------------------------------------- model

dseg_status dseg_model_build(const dseg_config* config, uint64_t seed, dseg_model** out) {
    DSEG_REQUIRE(config);
    DSEG_REQUIRE(out);
    return guarded([&] {
        config->value.validate();
        auto net = config->value.net;
        net.input_size = config->value.patch_size;
        *out = new dseg_model{network::Model<float>::build(net, seed)};
    });
}

dseg_status dseg_model_load(const char* path, dseg_model** out) {
    DSEG_REQUIRE(path);
    DSEG_REQUIRE(out);
    return guarded([&] { *out = new dseg_model{checkpoint::load(path)}; });
}

dseg_status dseg_model_save(const dseg_model* model, const char* path) {
    DSEG_REQUIRE(model);
    DSEG_REQUIRE(path);
    // saving reads the tensors only
    return guarded([&] { checkpoint::save(const_cast<dseg_model*>(model)->value, path); });
}

dseg_status dseg_model_parameter_count(const dseg_model* model, int64_t* count) {
    DSEG_REQUIRE(model);
    DSEG_REQUIRE(count);
    *count = model->value.parameter_count();
    return DSEG_OK;
}

void dseg_model_free(dseg_model* model) { delete model; }

// ------------------------------------------------------------------- image

dseg_status dseg_image_load(const char* path, dseg_image** out) {
    DSEG_REQUIRE(path);
    DSEG_REQUIRE(out);
    return guarded([&] { *out = new dseg_image{data::read_raster(path)}; });
}

dseg_status dseg_image_size(const dseg_image* image, int64_t* height, int64_t* width, int* channels) {
    DSEG_REQUIRE(image);
    if (height) *height = image->value.height;
    if (width) *width = image->value.width;
    if (channels) *channels = image->value.channels;
    return DSEG_OK;
}

void dseg_image_free(dseg_image* image) { delete image; }

dseg_status dseg_predict(const dseg_model* model, const dseg_image* image, float* probabilities) {
    DSEG_REQUIRE(model);
    DSEG_REQUIRE(image);
    DSEG_REQUIRE(probabilities);
    return guarded([&] {
        const auto p = training::predict(model->value, gray_of(image->value));
        std::memcpy(probabilities, p.pixels.data(), p.pixels.size() * sizeof(float));
    });
}

dseg_status dseg_write_probability_pgm(const char* path, const float* probabilities, int64_t height,
                                       int64_t width) {
    DSEG_REQUIRE(path);
    DSEG_REQUIRE(probabilities);
    return guarded([&] { data::write_pgm(path, data::quantize(to_map(probabilities, height, width))); });
}

dseg_status dseg_write_mask_pgm(const char* path, const float* probabilities, int64_t height, int64_t width,
                                double threshold) {
    DSEG_REQUIRE(path);
    DSEG_REQUIRE(probabilities);
    return guarded([&] {
        data::write_pgm(path, data::mask_to_gray(metrics::binarize(to_map(probabilities, height, width), threshold)));
    });
}

dseg_status dseg_write_overlay_ppm(const char* path, const dseg_image* image, const float* probabilities,
                                   double threshold) {
    DSEG_REQUIRE(path);
    DSEG_REQUIRE(image);
    DSEG_REQUIRE(probabilities);
    return guarded([&] {
        const auto& r = image->value;
        const auto mask = metrics::binarize(to_map(probabilities, r.height, r.width), threshold);
        data::write_ppm(path, data::overlay(r, mask));
    });
}

dseg_status dseg_write_raw_f32(const char* path, const float* probabilities, int64_t count) {
    DSEG_REQUIRE(path);
    DSEG_REQUIRE(probabilities);
    static_assert(std::endian::native == std::endian::little, "raw dumps assume a little-endian host");
    return guarded([&] {
        if (count < 0) throw ParameterError("raw dump: negative count");
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(std::string("cannot open '") + path + "' for writing");
        out.write(reinterpret_cast<const char*>(probabilities), static_cast<std::streamsize>(count * 4));
        if (!out) throw IoError(std::string("failed writing '") + path + "'");
    });
}

// -------------------------------------------------------------- evaluation

dseg_status dseg_evaluate(const dseg_model* model, const char* dataset_spec, dseg_report** out) {
    DSEG_REQUIRE(dataset_spec);
    DSEG_REQUIRE(out);
    return guarded([&] {
        const auto samples = data::load_dataset(data::parse_dataset_spec(dataset_spec));
        auto report = std::make_unique<dseg_report>();
        if (model) {
            report->value = training::evaluate(model->value, samples);
        } else {
            report->value = training::evaluate(
                [](const data::Sample& s) {
                    ProbabilityMap p(s.label.height, s.label.width);
                    for (std::size_t i = 0; i < p.pixels.size(); ++i) p.pixels[i] = s.label.pixels[i];
                    return p;
                },
                samples);
        }
        report->table = metrics::format_table(report->value);
        report->keyvalue = metrics::format_keyvalue(report->value);
        *out = report.release();
    });
}

dseg_status dseg_report_mean(const dseg_report* report, dseg_metrics* mean) {
    DSEG_REQUIRE(report);
    DSEG_REQUIRE(mean);
    const auto& m = report->value.mean;
    *mean = {m.acc, m.se, m.sp, m.f1, m.auc};
    return DSEG_OK;
}

size_t dseg_report_rows(const dseg_report* report) { return report ? report->value.rows.size() : 0; }

const char* dseg_report_table(const dseg_report* report) { return report ? report->table.c_str() : ""; }

const char* dseg_report_keyvalue(const dseg_report* report) { return report ? report->keyvalue.c_str() : ""; }

dseg_status dseg_report_write(const dseg_report* report, const char* path) {
    DSEG_REQUIRE(report);
    DSEG_REQUIRE(path);
    return guarded([&] { metrics::write_report(report->value, path); });
}

void dseg_report_free(dseg_report* report) { delete report; }

// ---------------------------------------------------------------- gradient

dseg_status dseg_gradcheck(const char* scope, uint64_t seed, int* all_passed, char** table) {
    DSEG_REQUIRE(scope);
    return guarded([&] {
        const auto entries = gradsuite::run(gradsuite::parse_scope(scope), seed);
        if (all_passed) *all_passed = gradsuite::all_passed(entries) ? 1 : 0;
        if (table) {
            const auto text = gradsuite::format(entries);
            char* copy = static_cast<char*>(std::malloc(text.size() + 1));
            if (copy == nullptr) throw std::bad_alloc();
            std::memcpy(copy, text.c_str(), text.size() + 1);
            *table = copy;
        }
    });
}

}  // extern "C"
