#ifndef PROMPTSEG_H
#define PROMPTSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_DIMENSION_MISMATCH = 3,
  PS_STATUS_INVALID_RLE = 4,
  PS_STATUS_BUFFER_TOO_SMALL = 5,
  PS_STATUS_IO = 6,
  PS_STATUS_MALFORMED = 7,
  PS_STATUS_POLICY = 8,
  PS_STATUS_INTERNAL = 9,
  PS_STATUS_PANIC = 10,
} PsStatus;

// A dataset directory loaded into memory.
typedef struct PsDataset PsDataset;

// A binary mask.
typedef struct PsMask PsMask;

// A checkpointed policy ready for greedy decoding.
typedef struct PsPolicy PsPolicy;

// Reward components of one scored response.
typedef struct PsReward {
  uint8_t r_format;
  double r_iou;
  double total;
} PsReward;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ps_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *ps_last_error_message(void);

// Creates an all-background `width`×`height` mask.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum PsStatus ps_mask_new(uintptr_t width, uintptr_t height, struct PsMask **out);

// Creates a mask from `width * height` row-major bytes (nonzero = foreground).
//
// # Safety
// `bits` must point to `width * height` readable bytes; `out` must be writable.
enum PsStatus ps_mask_from_bytes(uintptr_t width,
                                 uintptr_t height,
                                 const uint8_t *bits,
                                 struct PsMask **out);

// Releases a mask; null is ignored.
//
// # Safety
// `mask` must be null or a handle from this library not yet freed.
void ps_mask_free(struct PsMask *mask);

// Writes width, height and foreground count.
//
// # Safety
// `mask` must be a live handle; each out pointer may be null to skip it.
enum PsStatus ps_mask_info(const struct PsMask *mask,
                           uintptr_t *width,
                           uintptr_t *height,
                           uintptr_t *count);

// Reads pixel `(x, y)` into `out` (0 or 1).
//
// # Safety
// `mask` must be a live handle and `out` writable.
enum PsStatus ps_mask_get(const struct PsMask *mask, uintptr_t x, uintptr_t y, uint8_t *out);

// Sets pixel `(x, y)` to foreground when `value` is nonzero.
//
// # Safety
// `mask` must be a live handle not aliased by another thread.
enum PsStatus ps_mask_set(struct PsMask *mask, uintptr_t x, uintptr_t y, uint8_t value);

// Intersection over union; two empty masks score 1.
//
// # Safety
// `a` and `b` must be live handles and `out` writable.
enum PsStatus ps_mask_iou(const struct PsMask *a, const struct PsMask *b, double *out);

// Pixelwise OR of `n` masks into a new handle. With `n == 0` the result is
// an all-background `width`×`height` mask; otherwise `width`/`height` must
// match the inputs.
//
// # Safety
// `masks` must point to `n` live handles; `out` must be writable.
enum PsStatus ps_mask_union(const struct PsMask *const *masks,
                            uintptr_t n,
                            uintptr_t width,
                            uintptr_t height,
                            struct PsMask **out);

// Run-length encodes a mask (row-major, background run first). Writes the
// number of runs to `len`; if `capacity` is too small nothing else is
// written and `BufferTooSmall` is returned, so callers may probe with a
// null buffer.
//
// # Safety
// `counts` must have room for `capacity` values; `len` must be writable.
enum PsStatus ps_mask_rle_encode(const struct PsMask *mask,
                                 uint64_t *counts,
                                 uintptr_t capacity,
                                 uintptr_t *len);

// Decodes run lengths whose sum must equal `width * height`.
//
// # Safety
// `counts` must point to `n` readable values; `out` must be writable.
enum PsStatus ps_mask_rle_decode(uintptr_t width,
                                 uintptr_t height,
                                 const uint64_t *counts,
                                 uintptr_t n,
                                 struct PsMask **out);

// Format reward (1 parseable, 0 otherwise) of `text` under prompt mode
// `mode` (e.g. "bbox_pos2") on a `width`×`height` canvas.
//
// # Safety
// `text` and `mode` must be NUL-terminated strings; `out` must be writable.
enum PsStatus ps_format_reward(const char *text,
                               const char *mode,
                               uintptr_t width,
                               uintptr_t height,
                               uint8_t *out);

// Group-standardized advantages of `n >= 2` rewards, written to `out[0..n]`.
//
// # Safety
// `rewards` must point to `n` readable values and `out` to `n` writable ones.
enum PsStatus ps_advantages(const double *rewards, uintptr_t n, double *out);

// Loads a dataset directory written by `promptseg gen`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PsStatus ps_dataset_open(const char *path, struct PsDataset **out);

// Releases a dataset; null is ignored.
//
// # Safety
// `ds` must be null or a live handle.
void ps_dataset_free(struct PsDataset *ds);

// Number of samples (queries) in the dataset.
//
// # Safety
// `ds` must be a live handle and `out` writable.
enum PsStatus ps_dataset_len(const struct PsDataset *ds, uintptr_t *out);

// Copy of the ground-truth mask of sample `index`.
//
// # Safety
// `ds` must be a live handle and `out` writable.
enum PsStatus ps_dataset_gt_mask(const struct PsDataset *ds, uintptr_t index, struct PsMask **out);

// Scores a response against sample `index` with the synthetic segmenter and
// default reward weights (format 1, IoU 2).
//
// # Safety
// `ds` must be a live handle, `text`/`mode` NUL-terminated, `out` writable.
enum PsStatus ps_score_response(const struct PsDataset *ds,
                                uintptr_t index,
                                const char *text,
                                const char *mode,
                                struct PsReward *out);

// Loads a policy checkpoint written by `promptseg train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PsStatus ps_policy_load(const char *path, struct PsPolicy **out);

// Releases a policy; null is ignored.
//
// # Safety
// `policy` must be null or a live handle.
void ps_policy_free(struct PsPolicy *policy);

// Greedy response text of the policy for sample `index`, NUL-terminated.
// `len` receives the text length excluding the terminator; when `capacity`
// is not larger than that, `BufferTooSmall` is returned and `buf` is left
// untouched.
//
// # Safety
// `buf` must have room for `capacity` bytes; `len` must be writable.
enum PsStatus ps_policy_respond(const struct PsPolicy *policy,
                                const struct PsDataset *ds,
                                uintptr_t index,
                                char *buf,
                                uintptr_t capacity,
                                uintptr_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMPTSEG_H */
