#ifndef DEMA_DEMA_H
#define DEMA_DEMA_H

/* C interface to the dual-path delay-aware forecasting library.
 *
 * Every function returns a dema_status. On failure a description is available
 * from dema_last_error() on the calling thread until the next call. Series are
 * passed row-major by variate: value (n, t) lives at index n * length + t. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DEMA_API __declspec(dllexport)
#elif defined(DEMA_BUILDING_LIBRARY)
#define DEMA_API __attribute__((visibility("default")))
#else
#define DEMA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dema_status {
  DEMA_OK = 0,
  DEMA_ERR_DIMENSION = 1,
  DEMA_ERR_CONFIG = 2,
  DEMA_ERR_FORMAT = 3,
  DEMA_ERR_NUMERIC = 4,
  DEMA_ERR_CONTRACT = 5,
  DEMA_ERR_IO = 6,
  DEMA_ERR_EMPTY_INPUT = 7,
  DEMA_ERR_ARGUMENT = 8,
  DEMA_ERR_INTERNAL = 9
} dema_status;

typedef enum dema_task {
  DEMA_TASK_FORECAST = 0,
  DEMA_TASK_IMPUTE = 1,
  DEMA_TASK_ANOMALY = 2,
  DEMA_TASK_CLASSIFY = 3
} dema_task;

typedef struct dema_config dema_config;
typedef struct dema_model dema_model;

DEMA_API const char* dema_last_error(void);
DEMA_API const char* dema_status_name(dema_status status);
/* Strings returned through char** out-parameters are released with this. */
DEMA_API void dema_string_free(char* text);

/* ---- configuration (flat key = value) ---- */
DEMA_API dema_status dema_config_new(dema_config** out);
DEMA_API dema_status dema_config_load(const char* path, dema_config** out);
DEMA_API dema_status dema_config_set(dema_config* config, const char* key, const char* value);
/* Full configuration as "key = value" lines. */
DEMA_API dema_status dema_config_dump(const dema_config* config, char** text);
DEMA_API void dema_config_free(dema_config* config);

/* ---- training and checkpoints ---- */
/* Trains on a CSV file, writes the best-validation checkpoint to
 * checkpoint_path and, when log_path is non-null, a CSV of per-epoch losses.
 * metrics_json (nullable) receives the test metrics. A diverged run still
 * writes the last good checkpoint and returns DEMA_ERR_NUMERIC. */
DEMA_API dema_status dema_train(const dema_config* config, const char* csv_path,
                                const char* checkpoint_path, const char* log_path,
                                char** metrics_json);
DEMA_API dema_status dema_model_load(const char* checkpoint_path, dema_model** out);
DEMA_API void dema_model_free(dema_model* model);
DEMA_API dema_status dema_model_info(const dema_model* model, dema_task* task, size_t* n_vars,
                                     size_t* lookback, size_t* output_len);
/* Test-split metrics of a checkpoint on a CSV file, as JSON. */
DEMA_API dema_status dema_evaluate(const dema_model* model, const char* csv_path, char** metrics_json);
/* Task-specific predictions for a CSV file, as CSV text. For imputation, empty
 * or NaN cells are the points to fill. */
DEMA_API dema_status dema_predict(const dema_model* model, const char* csv_path, char** csv_text);
/* Raw forward pass on one window (n_vars x lookback, data units). `observed`
 * may be null; out receives n_vars x output_len values (or n_classes
 * probabilities for classification). */
DEMA_API dema_status dema_forward(const dema_model* model, const double* window,
                                  const double* observed, double* out, size_t out_len);

/* ---- analysis ---- */
/* Spectral split of one window. cross_time and cross_variate receive
 * n_vars * length values; selected (capacity length / 2 + 1) receives the kept
 * frequency indices and n_selected their count. */
DEMA_API dema_status dema_decompose(const double* window, size_t n_vars, size_t length,
                                    double theta, double* cross_time, double* cross_variate,
                                    size_t* selected, size_t* n_selected);
/* Pairwise lag priors, each output n_vars * n_vars, row = first variate.
 * max_lag 0 selects length / 4. */
DEMA_API dema_status dema_delay_priors(const double* window, size_t n_vars, size_t length,
                                       size_t max_lag, size_t patch_len, int* tau, double* rho,
                                       int* token_shift);

/* File forms: read a CSV (timestamp column first) as one window.
 * dema_decompose_file writes cross_time.csv, cross_var.csv and selected.json
 * into out_dir. dema_priors_file writes tau.csv, rho.csv and token_shift.csv
 * into out_dir and/or returns the same matrices as JSON; either may be null. */
DEMA_API dema_status dema_decompose_file(const char* csv_path, double theta, const char* out_dir);
DEMA_API dema_status dema_priors_file(const char* csv_path, size_t max_lag, size_t patch_len,
                                      const char* out_dir, char** json);

/* ---- benchmark ---- */
/* Median forward time (ms) and peak bytes per lookback length. */
DEMA_API dema_status dema_bench(const dema_config* config, const size_t* lengths, size_t count,
                                size_t repeats, double* ms, size_t* bytes);

#ifdef __cplusplus
}
#endif

#endif
