/* C interface for the streameval streaming evaluation harness. */

#ifndef STREAMEVAL_H
#define STREAMEVAL_H

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call in this API.
typedef enum sev_status {
  // The call succeeded.
  SEV_STATUS_OK = 0,
  // A required pointer argument was null.
  SEV_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  SEV_STATUS_INVALID_UTF8 = 2,
  // The configuration or specification was rejected.
  SEV_STATUS_CONFIG_ERROR = 3,
  // The operation failed while running.
  SEV_STATUS_RUNTIME_ERROR = 4,
} sev_status;

// Opaque dataset handle.
typedef struct sev_dataset sev_dataset;

// Opaque stream-task handle.
typedef struct sev_stream_task sev_stream_task;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sev_version(void);

// Message of the last failure on this thread, or null if none occurred.
// The pointer stays valid until the next failing call on the same thread.
const char *sev_last_error(void);

// Frees a string previously returned through a `char **` out-parameter.
//
// # Safety
// `text` must be a pointer obtained from this library and not yet freed.
void sev_string_free(char *text);

// Synthesizes a Gaussian-mixture dataset from a JSON spec
// (`{"num_classes": .., "dim": .., "cluster_separation": ..,
// "samples_per_class": .., "pretrain_fraction": .., "seed": ..}`).
//
// # Safety
// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
enum sev_status sev_dataset_synth(const char *spec_json, struct sev_dataset **out);

// Loads a dataset from a binary embedding file and its JSON role manifest.
//
// # Safety
// Both paths must be NUL-terminated strings and `out` a valid pointer.
enum sev_status sev_dataset_load(const char *embeddings_path,
                                 const char *manifest_path,
                                 struct sev_dataset **out);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle from this library.
uint64_t sev_dataset_len(const struct sev_dataset *dataset);

// Feature dimension, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle from this library.
uint32_t sev_dataset_dim(const struct sev_dataset *dataset);

// Releases a dataset handle.
//
// # Safety
// `dataset` must be null or a live handle from this library, not yet freed.
void sev_dataset_free(struct sev_dataset *dataset);

// Builds a heavy-tailed stream task over the dataset from a JSON spec
// (`{"num_classes": .., "zipf_s": .., "total_samples": ..,
// "head_threshold": .., "seed": ..}`).
//
// # Safety
// `dataset` must be a live handle, `spec_json` NUL-terminated, `out` valid.
enum sev_status sev_sequence_build(const struct sev_dataset *dataset,
                                   const char *spec_json,
                                   struct sev_stream_task **out);

// Stream length, or 0 for a null handle.
//
// # Safety
// `task` must be null or a live handle from this library.
uint64_t sev_sequence_len(const struct sev_stream_task *task);

// Serializes the stream task (order, class counts, buckets) to JSON.
//
// # Safety
// `task` must be a live handle and `out_json` a valid pointer; the returned
// string must be freed with [`sev_string_free`].
enum sev_status sev_sequence_to_json(const struct sev_stream_task *task, char **out_json);

// Releases a stream-task handle.
//
// # Safety
// `task` must be null or a live handle from this library, not yet freed.
void sev_sequence_free(struct sev_stream_task *task);

// Runs a whole experiment (pretraining plus one streamed run per seed)
// from an experiment-config JSON and returns the run summaries as a JSON
// array.
//
// # Safety
// `config_json` must be NUL-terminated and `out_summaries_json` a valid
// pointer; the returned string must be freed with [`sev_string_free`].
enum sev_status sev_run_experiment(const char *config_json, char **out_summaries_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STREAMEVAL_H */
