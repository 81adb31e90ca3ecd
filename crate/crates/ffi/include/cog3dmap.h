#ifndef COG3DMAP_H
#define COG3DMAP_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum C3dStatus {
  C3D_STATUS_OK = 0,
  C3D_STATUS_NULL_POINTER = 1,
  C3D_STATUS_INVALID_FRAME = 2,
  C3D_STATUS_INVALID_INPUT = 3,
  C3D_STATUS_CONFIG = 4,
  C3D_STATUS_FORMAT = 5,
  C3D_STATUS_CORRUPT_FILE = 6,
  C3D_STATUS_VERSION = 7,
  C3D_STATUS_IO = 8,
  /**
   * An internal consistency check failed. The map is unchanged.
   */
  C3D_STATUS_INTERNAL = 9,
  C3D_STATUS_PANIC = 10,
  /**
   * The output buffer is smaller than the data to copy.
   */
  C3D_STATUS_BUFFER_TOO_SMALL = 11,
} C3dStatus;

/**
 * Opaque map handle.
 */
typedef struct C3dMap C3dMap;

/**
 * Counts from one map update.
 */
typedef struct C3dStepReport {
  uint32_t step;
  /**
   * Nonzero when the frame had no usable patch and the map is unchanged.
   */
  uint8_t skipped;
  uint64_t retained;
  uint64_t updated;
  uint64_t added;
  uint64_t total_before;
  uint64_t total_after;
  double delta_used;
} C3dStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL if there was
 * none. The pointer stays valid until the next failing call on the same
 * thread.
 */
const char *c3d_last_error(void);

/**
 * Creates an empty map with a fixed distance threshold `delta`.
 */
enum C3dStatus c3d_map_new_static(uint32_t dim_f,
                                  uint32_t dim_g,
                                  double delta,
                                  uint64_t seed,
                                  struct C3dMap **out);

/**
 * Creates an empty map whose threshold is `clamp(ratio * diagonal, min, max)`
 * over the scene bounds seen so far.
 */
enum C3dStatus c3d_map_new_dynamic(uint32_t dim_f,
                                   uint32_t dim_g,
                                   double ratio,
                                   double min,
                                   double max,
                                   uint64_t seed,
                                   struct C3dMap **out);

/**
 * Releases a map. NULL is ignored.
 *
 * # Safety
 * `map` must come from this library and must not be used afterwards.
 */
void c3d_map_free(struct C3dMap *map);

/**
 * Integrates `n` already pooled patch observations taken at `timestep`.
 * `report` may be NULL.
 *
 * # Safety
 * Array pointers must cover `n * 3`, `n * dim_f` and `n * dim_g` floats.
 */
enum C3dStatus c3d_map_step_patches(struct C3dMap *map,
                                    size_t n,
                                    const float *positions,
                                    const float *semantic,
                                    const float *geometric,
                                    uint32_t timestep,
                                    struct C3dStepReport *report);

/**
 * Pools a dense `height x width` frame into patches of `patch_size` pixels
 * (masked mean for both feature kinds) and integrates them. `valid` holds
 * one byte per pixel; zero marks a pixel to ignore. `report` may be NULL.
 *
 * # Safety
 * Array pointers must cover `height * width` times 3, `dim_f`, `dim_g`
 * and 1 elements respectively.
 */
enum C3dStatus c3d_map_step_frame(struct C3dMap *map,
                                  uint32_t height,
                                  uint32_t width,
                                  uint32_t patch_size,
                                  const float *pointmap,
                                  const float *semantic,
                                  const float *geometric,
                                  const uint8_t *valid,
                                  uint32_t timestep,
                                  struct C3dStepReport *report);

/**
 * Number of tokens, or 0 for NULL.
 *
 * # Safety
 * `map` must be NULL or a live handle.
 */
size_t c3d_map_len(const struct C3dMap *map);

/**
 * Number of frames integrated so far, or 0 for NULL.
 *
 * # Safety
 * `map` must be NULL or a live handle.
 */
uint32_t c3d_map_step(const struct C3dMap *map);

/**
 * # Safety
 * `map` must be a live handle; the out pointers must be writable.
 */
enum C3dStatus c3d_map_dims(const struct C3dMap *map, uint32_t *dim_f, uint32_t *dim_g);

/**
 * Copies token positions (`len * 3` floats) in map order.
 *
 * # Safety
 * `out` must be writable for `capacity` floats.
 */
enum C3dStatus c3d_map_copy_positions(const struct C3dMap *map, float *out, size_t capacity);

/**
 * Copies semantic features (`len * dim_f` floats) in map order.
 *
 * # Safety
 * `out` must be writable for `capacity` floats.
 */
enum C3dStatus c3d_map_copy_semantic(const struct C3dMap *map, float *out, size_t capacity);

/**
 * Copies geometric features (`len * dim_g` floats) in map order.
 *
 * # Safety
 * `out` must be writable for `capacity` floats.
 */
enum C3dStatus c3d_map_copy_geometric(const struct C3dMap *map, float *out, size_t capacity);

/**
 * Copies `(created_step, updated_step)` pairs (`len * 2` values).
 *
 * # Safety
 * `out` must be writable for `capacity` values.
 */
enum C3dStatus c3d_map_copy_steps(const struct C3dMap *map, uint32_t *out, size_t capacity);

/**
 * Writes the map to `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum C3dStatus c3d_map_save(const struct C3dMap *map, const char *path);

/**
 * Reads a map from `path` into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum C3dStatus c3d_map_load(const char *path, struct C3dMap **out);

/**
 * Creates a new handle holding at most `budget` tokens drawn uniformly
 * with `seed`, in their original order. The source map is unchanged.
 *
 * # Safety
 * `map` must be a live handle; `out` must be writable.
 */
enum C3dStatus c3d_map_subsample(const struct C3dMap *map,
                                 size_t budget,
                                 uint64_t seed,
                                 struct C3dMap **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COG3DMAP_H */
