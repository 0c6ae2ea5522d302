#ifndef MOFUSION_H
#define MOFUSION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum MofusionStatus {
  MofusionStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  MofusionStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MofusionStatus_InvalidUtf8 = 2,
  /**
   * Invalid configuration, arguments, or file contents.
   */
  MofusionStatus_Config = 3,
  /**
   * Numerical or backend failure at run time.
   */
  MofusionStatus_Runtime = 4,
  /**
   * A panic was caught at the FFI boundary.
   */
  MofusionStatus_Panic = 5,
} MofusionStatus;

/**
 * Opaque engine handle. Create with `mofusion_engine_load`, release with
 * `mofusion_engine_free`.
 */
typedef struct MofusionEngine {
  uint8_t _opaque[0];
} MofusionEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mofusion_version(void);

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mofusion_last_error(void);

/**
 * Loads a checkpoint directory (EMA weights when present, raw otherwise)
 * and writes the engine handle to `out`.
 *
 * # Safety
 * `checkpoint_dir` must be NUL-terminated; `out` must be a valid pointer.
 */
enum MofusionStatus mofusion_engine_load(const char *checkpoint_dir, struct MofusionEngine **out);

/**
 * Releases an engine handle. A null handle is a no-op.
 *
 * # Safety
 * `handle` must have come from `mofusion_engine_load` and not be used again.
 */
void mofusion_engine_free(struct MofusionEngine *handle);

/**
 * Generates a motion for `prompt` and writes it to `out_path` as a .mot
 * file with an embedded representation header.
 *
 * `frames` must be within the model's trained window. `steps == 0` and
 * `guidance_scale < 0` select the sampler defaults.
 *
 * # Safety
 * All pointer arguments must satisfy the usual C string contracts.
 */
enum MofusionStatus mofusion_engine_generate(const struct MofusionEngine *handle,
                                             const char *prompt,
                                             uint64_t frames,
                                             uint64_t seed,
                                             uint32_t steps,
                                             double guidance_scale,
                                             const char *out_path);

/**
 * Runs footskate cleanup on a .mot file (desk skeleton, default thresholds)
 * and writes the corrected motion to `out_path`. When non-null,
 * `skate_before` and `skate_after` receive the skating ratios.
 *
 * # Safety
 * Path arguments must be NUL-terminated strings.
 */
enum MofusionStatus mofusion_cleanup_file(const char *in_path,
                                          const char *out_path,
                                          double *skate_before,
                                          double *skate_after);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOFUSION_H */
