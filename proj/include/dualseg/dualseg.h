#ifndef DUALSEG_H
#define DUALSEG_H

#include <stddef.h>
#include <stdint.h>

/*
 * C interface to the segmentation library. Objects are opaque handles
 * created and freed by the library. Every fallible call returns a status;
 * on failure dseg_last_error() holds a message for the calling thread until
 * its next failing call.
 */

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define DSEG_API __attribute__((visibility("default")))
#else
#define DSEG_API
#endif

typedef enum dseg_status {
    DSEG_OK = 0,
    DSEG_ERR_DIMENSION = 1,
    DSEG_ERR_PARAMETER = 2,
    DSEG_ERR_CONTRACT = 3,
    DSEG_ERR_RESOURCE = 4,
    DSEG_ERR_NUMERIC = 5,
    DSEG_ERR_IO = 6,
    DSEG_ERR_CORRUPT_CHECKPOINT = 7,
    DSEG_ERR_CHECKPOINT_SHAPE = 8,
    DSEG_ERR_UNSUPPORTED_VERSION = 9,
    DSEG_ERR_CONFIG = 10,
    DSEG_ERR_DATASET = 11,
    DSEG_ERR_INVALID_ARGUMENT = 12, /* null handle or pointer */
    DSEG_ERR_INTERNAL = 13
} dseg_status;

typedef struct dseg_config dseg_config;
typedef struct dseg_model dseg_model;
typedef struct dseg_image dseg_image;
typedef struct dseg_report dseg_report;

typedef struct dseg_metrics {
    double acc;
    double se;
    double sp;
    double f1;
    double auc;
} dseg_metrics;

DSEG_API const char* dseg_version(void);
DSEG_API const char* dseg_status_name(dseg_status status);
DSEG_API const char* dseg_last_error(void);
/* Frees strings the library hands over (gradcheck tables). */
DSEG_API void dseg_free(char* text);

/* Synthetic dataset: images/, labels/, fov/ PGMs and manifest.txt. */
DSEG_API dseg_status dseg_synth_write(const char* dir, int64_t count, int64_t size, uint64_t seed);

/* Training configuration: defaults, then "key = value" text, then overrides. */
DSEG_API dseg_status dseg_config_new(dseg_config** out);
DSEG_API dseg_status dseg_config_load(const char* path, dseg_config** out);
DSEG_API dseg_status dseg_config_set(dseg_config* config, const char* key, const char* value);
DSEG_API dseg_status dseg_config_validate(const dseg_config* config);
DSEG_API void dseg_config_free(dseg_config* config);
DSEG_API size_t dseg_config_key_count(void);
/* NULL past the end. */
DSEG_API const char* dseg_config_key_name(size_t index);
DSEG_API const char* dseg_config_key_help(size_t index);

typedef struct dseg_train_summary {
    int64_t steps;
    double final_loss;
    int has_best; /* 0 when no evaluation ran */
    int64_t best_step;
    dseg_metrics best;
} dseg_train_summary;

/* Writes the log and checkpoint named in the config. DSEG_ERR_NUMERIC on a
 * non-finite loss or gradient. */
DSEG_API dseg_status dseg_train(const dseg_config* config, dseg_train_summary* summary);

/* Untrained network with the config's architecture. */
DSEG_API dseg_status dseg_model_build(const dseg_config* config, uint64_t seed, dseg_model** out);
DSEG_API dseg_status dseg_model_load(const char* path, dseg_model** out);
DSEG_API dseg_status dseg_model_save(const dseg_model* model, const char* path);
DSEG_API dseg_status dseg_model_parameter_count(const dseg_model* model, int64_t* count);
DSEG_API void dseg_model_free(dseg_model* model);

/* Decoded image, samples in [0, 1], 1 or 3 channels. */
DSEG_API dseg_status dseg_image_load(const char* path, dseg_image** out);
DSEG_API dseg_status dseg_image_size(const dseg_image* image, int64_t* height, int64_t* width, int* channels);
DSEG_API void dseg_image_free(dseg_image* image);

/* Vessel probabilities for the image (green channel of color input);
 * `probabilities` holds height * width floats, row-major. */
DSEG_API dseg_status dseg_predict(const dseg_model* model, const dseg_image* image, float* probabilities);

/* 8-bit PGM of round(255 p). */
DSEG_API dseg_status dseg_write_probability_pgm(const char* path, const float* probabilities, int64_t height,
                                                int64_t width);
/* PGM with 255 where p > threshold, else 0. threshold in (0, 1). */
DSEG_API dseg_status dseg_write_mask_pgm(const char* path, const float* probabilities, int64_t height,
                                         int64_t width, double threshold);
/* PPM of the image with p > threshold pixels tinted red. */
DSEG_API dseg_status dseg_write_overlay_ppm(const char* path, const dseg_image* image, const float* probabilities,
                                            double threshold);
/* Little-endian float32, row-major, no header. */
DSEG_API dseg_status dseg_write_raw_f32(const char* path, const float* probabilities, int64_t count);

/* Metrics per image inside the fov plus the mean row. A NULL model scores
 * the ground truth itself. */
DSEG_API dseg_status dseg_evaluate(const dseg_model* model, const char* dataset_spec, dseg_report** out);
DSEG_API dseg_status dseg_report_mean(const dseg_report* report, dseg_metrics* mean);
DSEG_API size_t dseg_report_rows(const dseg_report* report);
/* Owned by the report. */
DSEG_API const char* dseg_report_table(const dseg_report* report);
DSEG_API const char* dseg_report_keyvalue(const dseg_report* report);
/* Table to `path`, key-value means to `path`.kv */
DSEG_API dseg_status dseg_report_write(const dseg_report* report, const char* path);
DSEG_API void dseg_report_free(dseg_report* report);

/* scope: "ops", "attention" or "model". `table` receives the printed
 * result table (free with dseg_free); may be NULL. */
DSEG_API dseg_status dseg_gradcheck(const char* scope, uint64_t seed, int* all_passed, char** table);

#ifdef __cplusplus
}
#endif

#endif
