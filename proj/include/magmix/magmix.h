#ifndef MAGMIX_MAGMIX_H
#define MAGMIX_MAGMIX_H

/*
 * C interface to the magmix library.
 *
 * Every fallible call returns an mmx_status; on failure a description is
 * available from mmx_last_error() on the same thread. Strings handed out
 * through char** parameters are owned by the caller and must be released with
 * mmx_string_free(). Handles are opaque and released with their _free call.
 * Requests and responses are JSON text.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MMX_API __declspec(dllexport)
#else
#define MMX_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mmx_status {
  MMX_OK = 0,
  MMX_ERR_INTERNAL = 1,
  MMX_ERR_INVALID = 2, /* bad arguments, configuration or shapes */
  MMX_ERR_IO = 3,      /* unreadable or unwritable files */
  MMX_ERR_NUMERIC = 4  /* non-finite values during training */
} mmx_status;

typedef struct mmx_dataset mmx_dataset;
typedef struct mmx_model mmx_model;

MMX_API const char* mmx_version(void);
MMX_API const char* mmx_last_error(void);
MMX_API void mmx_string_free(char* s);

/* Intra-op threads for the linear-algebra backend (>= 1). */
MMX_API mmx_status mmx_set_threads(int n);
/* 0 debug, 1 info, 2 warnings, 3 errors, 4 silent. Logs go to stderr. */
MMX_API mmx_status mmx_set_log_level(int level);

/* Versioned table of every default the pipeline uses. */
MMX_API mmx_status mmx_defaults_json(char** out_json);

/* ---- datasets ---- */

MMX_API mmx_status mmx_dataset_generate(uint64_t seed, int per_class, int size, double imbalance, mmx_dataset** out);
/* root/<MAG>/<class>/<image>.png */
MMX_API mmx_status mmx_dataset_load(const char* root, mmx_dataset** out);
/* manifest_extra_json may be NULL; its keys are merged into manifest.json. */
MMX_API mmx_status mmx_dataset_save(const mmx_dataset* ds, const char* root, const char* manifest_extra_json);
MMX_API size_t mmx_dataset_size(const mmx_dataset* ds);
MMX_API mmx_status mmx_dataset_fingerprint(const mmx_dataset* ds, char** out);
MMX_API void mmx_dataset_free(mmx_dataset* ds);

/* ---- training and protocol ---- */

/*
 * Best-of-k training on one magnification, tested on all four.
 * Request keys: arch, train_mag, runs, seed, split_seed, results_dir,
 * deterministic, resume, model (overrides), train (overrides).
 */
/* Validates a train/matrix request without touching any data. */
MMX_API mmx_status mmx_check_request(const char* request_json);

MMX_API mmx_status mmx_train(const mmx_dataset* ds, const char* request_json, char** out_json);

/*
 * Full 4x4 cross-magnification matrix for one architecture ("oracle" is a
 * label-reading stub). Same request keys as mmx_train plus jobs. When some
 * rows fail the partial matrix is still written and returned in *out_json,
 * and the status reflects the first failure.
 */
MMX_API mmx_status mmx_matrix(const mmx_dataset* ds, const char* request_json, char** out_json);

/* Reads results_dir/<arch>/matrix.json files and writes report.{csv,md,svg}
 * into out_dir. format: "csv", "md", "svg" or "all". */
MMX_API mmx_status mmx_report(const char* results_dir, const char* out_dir, const char* format, char** out_json);

/* Parameter count, activation elements and mult-adds for a model config. */
MMX_API mmx_status mmx_profile(const char* model_config_json, char** out_json);

/* ---- models ---- */

MMX_API mmx_status mmx_model_load(const char* checkpoint_path, mmx_model** out);
MMX_API mmx_status mmx_model_config_json(const mmx_model* m, char** out_json);
/*
 * Top-1 accuracy on part of a dataset. Request keys: mag (label or null for
 * all), split ("train", "val", "test" or "all"), split_seed, batch_size.
 */
MMX_API mmx_status mmx_model_evaluate(mmx_model* m, const mmx_dataset* ds, const char* request_json, char** out_json);
/* images: n x c x h x w floats in [0, 1]; out_classes: n ints. */
MMX_API mmx_status mmx_model_predict(mmx_model* m, const float* images, size_t n, int c, int h, int w, int* out_classes);
MMX_API void mmx_model_free(mmx_model* m);

#ifdef __cplusplus
}
#endif

#endif
