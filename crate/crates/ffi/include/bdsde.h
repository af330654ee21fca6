#ifndef BDSDE_H
#define BDSDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum BdsdeStatus {
  BDSDE_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or an index out of range.
   */
  BDSDE_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Schema or validation failure (CLI exit code 2).
   */
  BDSDE_STATUS_CONFIG = 2,
  /**
   * Numerical failure (CLI exit code 3).
   */
  BDSDE_STATUS_NUMERICAL = 3,
  /**
   * I/O failure (CLI exit code 4).
   */
  BDSDE_STATUS_IO = 4,
  /**
   * A panic was caught at the boundary.
   */
  BDSDE_STATUS_INTERNAL = 5,
} BdsdeStatus;

/**
 * Parsed experiment configuration.
 */
typedef struct BdsdeConfig BdsdeConfig;

/**
 * One sampled backward-noise path.
 */
typedef struct BdsdeNoise BdsdeNoise;

/**
 * Outcome of a completed experiment run.
 */
typedef struct BdsdeRun BdsdeRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bdsde_version(void);

/**
 * Message of the last failed call on this thread, or null. Borrowed until the next call.
 */
const char *bdsde_last_error_message(void);

/**
 * JSON record `{kind, exit_code, message}` of the last failed call, or null.
 */
const char *bdsde_last_error_json(void);

/**
 * Release a string returned as owned by this library. Null is ignored.
 */
void bdsde_string_free(char *s);

/**
 * Parse a TOML experiment configuration.
 */
enum BdsdeStatus bdsde_config_from_toml(const char *toml, struct BdsdeConfig **out);

/**
 * Override the master seed.
 */
enum BdsdeStatus bdsde_config_set_seed(struct BdsdeConfig *config, uint64_t seed);

/**
 * Override the output directory.
 */
enum BdsdeStatus bdsde_config_set_output_dir(struct BdsdeConfig *config, const char *dir);

/**
 * Experiment name of a configuration, borrowed from the handle.
 */
const char *bdsde_config_experiment(const struct BdsdeConfig *config);

void bdsde_config_free(struct BdsdeConfig *config);

/**
 * Run the configured experiment, writing its outputs to disk.
 */
enum BdsdeStatus bdsde_run(const struct BdsdeConfig *config, struct BdsdeRun **out);

/**
 * Output directory of a run, borrowed from the handle.
 */
const char *bdsde_run_output_dir(const struct BdsdeRun *run);

/**
 * Number of files written by a run.
 */
size_t bdsde_run_file_count(const struct BdsdeRun *run);

/**
 * Name of file `index` relative to the output directory, borrowed from the handle; null
 * when out of range.
 */
const char *bdsde_run_file_name(const struct BdsdeRun *run, size_t index);

/**
 * Named scalar result of a run (for instance `max_relative`).
 */
enum BdsdeStatus bdsde_run_result(const struct BdsdeRun *run, const char *key, double *value);

/**
 * Named boolean flag of a run (for instance `cauchy`).
 */
enum BdsdeStatus bdsde_run_flag(const struct BdsdeRun *run, const char *key, bool *value);

void bdsde_run_free(struct BdsdeRun *run);

/**
 * Built-in preset table as an owned string; release with [`bdsde_string_free`].
 */
enum BdsdeStatus bdsde_preset_table(char **out);

/**
 * Sample the first `n` components of a Q-Wiener path with eigenvalues `lambdas[0..n)` on
 * a uniform grid of `steps` steps over `[t_start, t_end]`.
 */
enum BdsdeStatus bdsde_noise_sample(const double *lambdas,
                                    size_t n,
                                    double t_start,
                                    double t_end,
                                    size_t steps,
                                    uint64_t seed,
                                    struct BdsdeNoise **out);

/**
 * Value `B_j(t_k)` of a sampled path.
 */
enum BdsdeStatus bdsde_noise_value(const struct BdsdeNoise *noise,
                                   size_t k,
                                   size_t j,
                                   double *value);

/**
 * Backward Itô sum over steps `[k0, k1)`. `values` holds one row per grid point and one
 * column per component.
 */
enum BdsdeStatus bdsde_backward_integral(const struct BdsdeNoise *noise,
                                         const double *values,
                                         size_t len,
                                         size_t k0,
                                         size_t k1,
                                         double *result);

/**
 * The same integral computed through the time reversal at `t_prime` (already negated).
 */
enum BdsdeStatus bdsde_reflected_forward_integral(const struct BdsdeNoise *noise,
                                                  const double *values,
                                                  size_t len,
                                                  size_t k0,
                                                  size_t k1,
                                                  double t_prime,
                                                  double *result);

void bdsde_noise_free(struct BdsdeNoise *noise);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BDSDE_H */
