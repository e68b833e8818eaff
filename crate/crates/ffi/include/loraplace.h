/* C interface to the loraplace serving twin and placement predictor.
 *
 * Fallible calls return an lp_status; lp_last_error() then describes the
 * failure (thread-local, valid until the next call on the same thread).
 * Handles are opaque and released with their _free function; strings
 * returned by the library are released with lp_string_free().
 */
#ifndef LORAPLACE_H
#define LORAPLACE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define LP_FEATURE_COUNT 16

typedef enum lp_status {
  LP_OK = 0,
  LP_NULL_ARGUMENT = 1,
  LP_INVALID_UTF8 = 2,
  LP_VALIDATION = 3,
  LP_CONFIG = 4,
  LP_DOMAIN = 5,
  LP_FIT = 6,
  LP_SIMULATION = 7,
  LP_INVARIANT = 8,
  LP_TRAINING = 9,
  LP_IO = 10,
  LP_JSON = 11,
  LP_CSV = 12,
  LP_PANIC = 13
} lp_status;

typedef enum lp_mode {
  LP_MODE_FULL = 0,
  LP_MODE_MEAN = 1
} lp_mode;

typedef struct lp_metrics {
  double throughput_tok_s;
  double itl_mean_s;
  double itl_p50_s;
  double itl_p99_s;
  double ttft_mean_s;
  double ttft_p50_s;
  double ttft_p99_s;
  double ideal_throughput_tok_s;
  bool starved;
  bool degenerate;
  uint64_t finished_count;
  uint64_t rejected_count;
} lp_metrics;

typedef struct lp_placement {
  double max_throughput_tok_s;
  uint64_t n_star;
  uint64_t g_star;
} lp_placement;

typedef struct lp_result lp_result;
typedef struct lp_model lp_model;

const char *lp_last_error(void);
const char *lp_version(void);
size_t lp_feature_count(void);
/* Static string, or NULL when i >= LP_FEATURE_COUNT. */
const char *lp_feature_name(size_t i);

/* config_json may be NULL for the built-in preset. */
lp_status lp_simulate(const char *workload_json, const char *config_json, lp_mode mode, lp_result **out);
lp_status lp_result_metrics(const lp_result *result, lp_metrics *out);
lp_status lp_result_to_json(const lp_result *result, char **out);
void lp_result_free(lp_result *result);

/* config_json and options_json may be NULL for the preset and default options. */
lp_status lp_sweep(const char *condition_json, const char *config_json, const char *options_json, char **out_json);

lp_status lp_model_load(const char *path, lp_model **out);
lp_status lp_model_from_json(const char *json, lp_model **out);
lp_status lp_model_predict(const lp_model *model, const double *features, size_t n_features, lp_placement *out);
/* out must hold LP_FEATURE_COUNT doubles. */
lp_status lp_encode_condition(const char *condition_json, double *out);
void lp_model_free(lp_model *model);

lp_status lp_smape(const double *predicted, const double *actual, size_t n, double *out);

void lp_string_free(char *s);

#ifdef __cplusplus
}
#endif

#endif /* LORAPLACE_H */
