/* C ABI of the intrinsic-flow experiment runner.
 *
 * Mirrors crates/ffi/src/lib.rs; regenerate with
 *   cbindgen --config cbindgen.toml --crate intrinsic-flow-ffi --output include/intrinsic_flow.h
 * where cbindgen is available.
 */

#ifndef INTRINSIC_FLOW_H
#define INTRINSIC_FLOW_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every fallible call. */
typedef enum IfStatus {
  /* Success. */
  IF_OK = 0,
  /* A pointer argument was null or a string was not valid UTF-8. */
  IF_ERR_INVALID_ARGUMENT = 1,
  /* The config failed schema validation. */
  IF_ERR_SCHEMA = 2,
  /* The experiment failed numerically (partial outputs were kept). */
  IF_ERR_NUMERICAL = 3,
  /* Filesystem failure. */
  IF_ERR_IO = 4,
  /* The experiment has not been run yet. */
  IF_ERR_NOT_RUN = 5,
  /* A panic was caught at the boundary. */
  IF_ERR_PANIC = 6,
} IfStatus;

/* Opaque experiment handle; release with if_experiment_free. */
typedef struct IfExperiment IfExperiment;

/* Library version as a static NUL-terminated string (do not free). */
const char *if_version(void);

/* Creates an experiment from JSON config text. The config is validated on
 * if_experiment_run, not here. */
IfStatus if_experiment_new_from_json(const char *json, IfExperiment **out);

/* Creates an experiment by reading a JSON config file. */
IfStatus if_experiment_new_from_file(const char *path, IfExperiment **out);

/* Runs the experiment; artifacts are written as by the CLI `run` command. */
IfStatus if_experiment_run(IfExperiment *exp);

/* Manifest JSON of the last successful run; NULL if the experiment has not
 * run. Free with if_string_free. */
char *if_experiment_manifest_json(const IfExperiment *exp);

/* Output directory of the last successful run; NULL before a run. Free with
 * if_string_free. */
char *if_experiment_output_dir(const IfExperiment *exp);

/* One summary metric of the last run. Returns IF_ERR_NOT_RUN before a run
 * and IF_ERR_INVALID_ARGUMENT for unknown keys. */
IfStatus if_experiment_metric(const IfExperiment *exp, const char *key, double *out);

/* Convenience one-shot: parse, run, and (optionally) return the manifest.
 * manifest_out may be NULL. */
IfStatus if_run_json(const char *json, char **manifest_out);

/* Message of the most recent error on this thread; NULL if none. Free with
 * if_string_free. */
char *if_last_error_message(void);

/* Releases a string returned by this library. NULL is a no-op. */
void if_string_free(char *s);

/* Releases an experiment handle. NULL is a no-op. */
void if_experiment_free(IfExperiment *exp);

#ifdef __cplusplus
}
#endif

#endif /* INTRINSIC_FLOW_H */
