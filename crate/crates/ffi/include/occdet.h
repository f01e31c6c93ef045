#ifndef OCCDET_H
#define OCCDET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OccdetStatus {
  OCCDET_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  OCCDET_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The configuration or a file's contents failed validation.
   */
  OCCDET_STATUS_INVALID = 2,
  /**
   * Training produced a non-finite loss or gradient.
   */
  OCCDET_STATUS_NON_FINITE = 3,
  OCCDET_STATUS_IO = 4,
  /**
   * A panic was caught at the boundary.
   */
  OCCDET_STATUS_INTERNAL = 5,
} OccdetStatus;

typedef struct OccdetConfig OccdetConfig;

typedef struct OccdetModel OccdetModel;

typedef struct OccdetReport OccdetReport;

/**
 * Headline numbers of a report. Optional metrics are NaN when absent.
 */
typedef struct OccdetMetrics {
  double miou;
  double miou_visible;
  double point_miou;
  double map;
  double nds;
  double mate;
  double mase;
  double maoe;
  double mave;
  double maae;
} OccdetMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *occdet_version(void);

/**
 * Message of the last failed call on this thread, or null after a
 * successful call. Valid until the next call on the same thread.
 */
const char *occdet_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void occdet_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum OccdetStatus occdet_config_default(struct OccdetConfig **out);

/**
 * The small single-scene configuration used for overfitting.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum OccdetStatus occdet_config_tiny(struct OccdetConfig **out);

/**
 * Parses and validates a JSON document; missing fields take defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OccdetStatus occdet_config_from_json(const char *json, struct OccdetConfig **out);

/**
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum OccdetStatus occdet_config_to_json(const struct OccdetConfig *cfg, char **out);

/**
 * Content hash that identifies the configuration in logs and checkpoints.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum OccdetStatus occdet_config_hash(const struct OccdetConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum OccdetStatus occdet_config_set_seed(struct OccdetConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum OccdetStatus occdet_config_set_steps(struct OccdetConfig *cfg, size_t steps);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, not used afterwards.
 */
void occdet_config_free(struct OccdetConfig *cfg);

/**
 * Trains from scratch. With a non-null `out_dir`, the log and the final
 * checkpoint are written there.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` null or a NUL-terminated string,
 * and `out` a valid pointer.
 */
enum OccdetStatus occdet_train(const struct OccdetConfig *cfg,
                               const char *out_dir,
                               struct OccdetModel **out);

/**
 * Loads a checkpoint directory written by [`occdet_train`].
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OccdetStatus occdet_model_load(const char *dir, struct OccdetModel **out);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum OccdetStatus occdet_model_param_count(struct OccdetModel *model, size_t *out);

/**
 * Copies the model's configuration into a new handle.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum OccdetStatus occdet_model_config(const struct OccdetModel *model, struct OccdetConfig **out);

/**
 * Scores the model on a scene directory (or a directory of scenes). A
 * null `scenes_dir` evaluates on the configuration's training scenes.
 *
 * # Safety
 * `model` must be a live handle, `scenes_dir` null or a NUL-terminated
 * string, and `out` a valid pointer.
 */
enum OccdetStatus occdet_model_evaluate(const struct OccdetModel *model,
                                        const char *scenes_dir,
                                        struct OccdetReport **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, not used afterwards.
 */
void occdet_model_free(struct OccdetModel *model);

/**
 * # Safety
 * `report` must be a live handle and `out` a valid pointer.
 */
enum OccdetStatus occdet_report_metrics(const struct OccdetReport *report,
                                        struct OccdetMetrics *out);

/**
 * # Safety
 * `report` must be a live handle and `out` a valid pointer.
 */
enum OccdetStatus occdet_report_to_json(const struct OccdetReport *report, char **out);

/**
 * # Safety
 * `report` must be null or a handle from this library, not used afterwards.
 */
void occdet_report_free(struct OccdetReport *report);

/**
 * Runs the finite-difference suite, or only case `op` when non-null.
 * `all_passed` receives whether every selected case met its tolerance.
 *
 * # Safety
 * `op` must be null or a NUL-terminated string and `all_passed` a valid
 * pointer.
 */
enum OccdetStatus occdet_gradcheck(const char *op, uint64_t seeds, bool *all_passed);

/**
 * Detection score from mAP and the five mean true-positive errors.
 */
double occdet_nds_score(double map,
                        double mate,
                        double mase,
                        double maoe,
                        double mave,
                        double maae);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCCDET_H */
