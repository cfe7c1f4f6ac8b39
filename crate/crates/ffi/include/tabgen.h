#ifndef TABGEN_H
#define TABGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TabgenStatus {
  TABGEN_STATUS_OK = 0,
  TABGEN_STATUS_NULL_ARGUMENT = 1,
  TABGEN_STATUS_INVALID_UTF8 = 2,
  TABGEN_STATUS_INVALID_ARGUMENT = 3,
  TABGEN_STATUS_IO = 4,
  TABGEN_STATUS_PARSE = 5,
  TABGEN_STATUS_MODEL = 6,
  TABGEN_STATUS_PANIC = 7,
} TabgenStatus;

typedef enum TabgenParseStatus {
  TABGEN_PARSE_STATUS_OK = 0,
  TABGEN_PARSE_STATUS_TRUNCATED = 1,
  TABGEN_PARSE_STATUS_FAILED = 2,
} TabgenParseStatus;

/**
 * A loaded table, optionally with a target column.
 */
typedef struct TabgenDataset TabgenDataset;

/**
 * A calibrated tree ensemble read from a model file.
 */
typedef struct TabgenModel TabgenModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful one. The pointer is valid until the next tabgen call on the
 * same thread and must not be freed.
 */
const char *tabgen_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *tabgen_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void tabgen_string_free(char *s);

/**
 * Parses CSV text. `target` may be null.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum TabgenStatus tabgen_dataset_from_csv(const char *id,
                                          const char *csv_text,
                                          const char *target,
                                          struct TabgenDataset **out);

/**
 * Reads a CSV file; the dataset id is the file stem. `target` may be null.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum TabgenStatus tabgen_dataset_from_file(const char *path,
                                           const char *target,
                                           struct TabgenDataset **out);

/**
 * Number of data rows, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t tabgen_dataset_num_rows(const struct TabgenDataset *ds);

/**
 * Renders row `row` as `name is value; ...` text, skipping the target.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` must be writable.
 */
enum TabgenStatus tabgen_dataset_serialize_row(const struct TabgenDataset *ds,
                                               size_t row,
                                               char **out);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void tabgen_dataset_free(struct TabgenDataset *ds);

/**
 * Loads a model file written by the training pipeline.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum TabgenStatus tabgen_model_load(const char *path, struct TabgenModel **out);

/**
 * Size of the model's class space, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t tabgen_model_num_classes(const struct TabgenModel *model);

/**
 * Writes calibrated class probabilities for one row into `out`, which
 * must hold at least `tabgen_model_num_classes` values.
 *
 * # Safety
 * Handles must be live; `out` must point to `len` writable doubles.
 */
enum TabgenStatus tabgen_model_predict_proba(const struct TabgenModel *model,
                                             const struct TabgenDataset *ds,
                                             size_t row,
                                             double *out,
                                             size_t len);

/**
 * Augmented target text (`class 0: p0; ...`) for one row. The dataset must
 * have its target column set.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum TabgenStatus tabgen_model_augment(const struct TabgenModel *model,
                                       const struct TabgenDataset *ds,
                                       size_t row,
                                       char **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tabgen_model_free(struct TabgenModel *model);

/**
 * Maps generated text to a class among `num_classes`. `out_class` may be
 * null; it is left untouched when parsing fails.
 *
 * # Safety
 * `text` must be NUL-terminated; `out_status` must be writable.
 */
enum TabgenStatus tabgen_parse_prediction(const char *text,
                                          size_t num_classes,
                                          size_t *out_class,
                                          enum TabgenParseStatus *out_status);

/**
 * Renders `len` probabilities as `class 0: p0; class 1: p1; ...`.
 *
 * # Safety
 * `probs` must point to `len` readable doubles; `out` must be writable.
 */
enum TabgenStatus tabgen_serialize_probs(const double *probs, size_t len, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TABGEN_H */
