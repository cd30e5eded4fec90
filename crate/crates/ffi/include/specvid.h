#ifndef SPECVID_H
#define SPECVID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call. `SPECVID_STATUS_OK` is zero.
 */
typedef enum SpecvidStatus {
  SPECVID_STATUS_OK = 0,
  SPECVID_STATUS_NULL_POINTER = 1,
  SPECVID_STATUS_INVALID_UTF8 = 2,
  SPECVID_STATUS_IO = 3,
  SPECVID_STATUS_PARSE = 4,
  SPECVID_STATUS_VALIDATION = 5,
  SPECVID_STATUS_CALIBRATION = 6,
  SPECVID_STATUS_INTERNAL = 7,
} SpecvidStatus;

typedef enum SpecvidPolicyKind {
  SPECVID_POLICY_KIND_THRESHOLD = 0,
  SPECVID_POLICY_KIND_RANDOM = 1,
  SPECVID_POLICY_KIND_ALWAYS_ACCEPT = 2,
  SPECVID_POLICY_KIND_ALWAYS_REJECT = 3,
} SpecvidPolicyKind;

typedef enum SpecvidAggregation {
  SPECVID_AGGREGATION_MIN_FRAME = 0,
  SPECVID_AGGREGATION_MEAN_FRAME = 1,
} SpecvidAggregation;

/**
 * Opaque calibration handle.
 */
typedef struct SpecvidCalibration SpecvidCalibration;

/**
 * Routing policy and run settings. `tau` is read only by threshold
 * policies, `accept_prob` and `rng_seed` only by random ones.
 * `num_blocks == 0` selects the default block count.
 */
typedef struct SpecvidRunParams {
  enum SpecvidPolicyKind policy;
  double tau;
  double accept_prob;
  uint64_t rng_seed;
  bool force_reject_block0;
  enum SpecvidAggregation aggregation;
  size_t num_blocks;
  uint64_t seed;
} SpecvidRunParams;

typedef struct SpecvidRunStats {
  /**
   * Accepted fraction of blocks after block 0.
   */
  double accept_rate;
  double time_s;
  double quality;
  size_t num_blocks;
  size_t accepted_blocks;
  size_t emitted_frames;
} SpecvidRunStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *specvid_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call into the library on the same thread.
 */
const char *specvid_last_error(void);

/**
 * Calibration fitted to the bundled reference table.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum SpecvidStatus specvid_calibration_default(struct SpecvidCalibration **out);

/**
 * Load a calibration TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as for
 * [`specvid_calibration_default`].
 */
enum SpecvidStatus specvid_calibration_load(const char *path, struct SpecvidCalibration **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `cal` must be null or a handle returned by this library and not yet freed.
 */
void specvid_calibration_free(struct SpecvidCalibration *cal);

/**
 * Run one synthetic prompt end to end.
 *
 * # Safety
 * `cal` must be a live handle; `params` and `out` valid pointers.
 */
enum SpecvidStatus specvid_simulate_prompt(const struct SpecvidCalibration *cal,
                                           const struct SpecvidRunParams *params,
                                           size_t prompt_index,
                                           struct SpecvidRunStats *out);

/**
 * Aggregate per-frame scores of one block.
 *
 * # Safety
 * `scores` must point to `len` readable doubles; `out` must be writable.
 */
enum SpecvidStatus specvid_aggregate(const double *scores,
                                     size_t len,
                                     enum SpecvidAggregation mode,
                                     double *out);

/**
 * Threshold decision for one block: writes `true` to `accept` iff
 * `q >= tau`, except that block 0 is rejected when forced.
 *
 * # Safety
 * `accept` must be writable.
 */
enum SpecvidStatus specvid_decide_threshold(size_t block_index,
                                            double q,
                                            double tau,
                                            bool force_reject_block0,
                                            bool *accept);

/**
 * `t_target_only / t`; both must be positive and finite.
 *
 * # Safety
 * `out` must be writable.
 */
enum SpecvidStatus specvid_speedup(double t, double t_target_only, double *out);

/**
 * Replay a JSONL trace under `params` and return the report as JSON.
 * `params.seed` is ignored. The string must be released with
 * [`specvid_string_free`].
 *
 * # Safety
 * `cal` must be a live handle, `trace` NUL-terminated, `params` and
 * `out_json` valid pointers.
 */
enum SpecvidStatus specvid_replay_jsonl(const struct SpecvidCalibration *cal,
                                        const char *trace,
                                        const struct SpecvidRunParams *params,
                                        char **out_json);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void specvid_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECVID_H */
