#ifndef WSEG_H
#define WSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WsegStatus {
  WSEG_STATUS_OK = 0,
  WSEG_STATUS_INVALID_INPUT = 1,
  WSEG_STATUS_CONFIG = 2,
  WSEG_STATUS_DATA = 3,
  WSEG_STATUS_GENERATION = 4,
  WSEG_STATUS_UNDEFINED_MEAN = 5,
  WSEG_STATUS_IO = 6,
  WSEG_STATUS_NULL_POINTER = 7,
  WSEG_STATUS_PANIC = 8,
} WsegStatus;

// Opaque trained network.
typedef struct WsegNet WsegNet;

// One labeled box; corners inclusive.
typedef struct WsegBox {
  uint32_t x0;
  uint32_t y0;
  uint32_t x1;
  uint32_t y1;
  uint8_t label;
} WsegBox;

typedef struct WsegCrfParams {
  double w_spatial;
  double theta_gamma;
  double w_bilateral;
  double theta_alpha;
  double theta_beta;
  uint32_t iterations;
} WsegCrfParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len - 1` bytes). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t wseg_last_error_message(char *buf, size_t len);

// Loads a checkpoint file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum WsegStatus wseg_net_load(const char *path, struct WsegNet **out);

// Loads a checkpoint from memory.
//
// # Safety
// `bytes` must point to `len` readable bytes; `out` must be writable.
enum WsegStatus wseg_net_from_bytes(const uint8_t *bytes, size_t len, struct WsegNet **out);

// # Safety
// `net` must be null or a handle from this library not yet freed.
void wseg_net_free(struct WsegNet *net);

// Number of output labels, 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t wseg_net_num_labels(const struct WsegNet *net);

// Input channels expected by the network, 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t wseg_net_in_channels(const struct WsegNet *net);

// Per-pixel scores; `scores_out` holds `height * width * num_labels` values.
//
// # Safety
// `image` must hold `height * width * channels` values and `scores_out`
// `height * width * wseg_net_num_labels(net)`.
enum WsegStatus wseg_net_forward(const struct WsegNet *net,
                                 const double *image,
                                 size_t height,
                                 size_t width,
                                 size_t channels,
                                 double *scores_out);

// Per-pixel softmax of a score map into `probs_out` (same size).
//
// # Safety
// Both buffers hold `height * width * num_labels` values.
enum WsegStatus wseg_pixel_distribution(const double *scores,
                                        size_t height,
                                        size_t width,
                                        size_t num_labels,
                                        double *probs_out);

// k-th smallest of `values` with `k = ceil(rho * len)`.
//
// # Safety
// `values` holds `len` doubles; `out` is writable.
enum WsegStatus wseg_quota_threshold(const double *values, size_t len, double rho, double *out);

// Fixed-bias E-step for an image-level label set (`present`, background
// implied). Writes `height * width` labels.
//
// # Safety
// `scores` as in [`wseg_pixel_distribution`]; `present` holds `num_present`
// labels; `labels_out` holds `height * width` bytes.
enum WsegStatus wseg_em_fixed_estep(const double *scores,
                                    size_t height,
                                    size_t width,
                                    size_t num_labels,
                                    const uint8_t *present,
                                    size_t num_present,
                                    double b_fg,
                                    double b_bg,
                                    uint8_t *labels_out);

// Adaptive-bias E-step. `biases_out` may be null; otherwise it receives
// `num_labels` biases (absent labels as `-inf`).
//
// # Safety
// As [`wseg_em_fixed_estep`]; `biases_out` null or `num_labels` doubles.
enum WsegStatus wseg_em_adapt_estep(const double *scores,
                                    size_t height,
                                    size_t width,
                                    size_t num_labels,
                                    const uint8_t *present,
                                    size_t num_present,
                                    double rho_fg,
                                    double rho_bg,
                                    uint64_t seed,
                                    uint8_t *labels_out,
                                    double *biases_out);

// Filled-rectangle label map; the smallest box wins overlaps.
//
// # Safety
// `boxes` holds `num_boxes` entries; `labels_out` `height * width` bytes.
enum WsegStatus wseg_bbox_rect(const struct WsegBox *boxes,
                               size_t num_boxes,
                               size_t height,
                               size_t width,
                               uint8_t *labels_out);

// Box-gated fixed-bias E-step.
//
// # Safety
// As [`wseg_em_fixed_estep`] and [`wseg_bbox_rect`].
enum WsegStatus wseg_bbox_em_fixed_estep(const double *scores,
                                         size_t height,
                                         size_t width,
                                         size_t num_labels,
                                         const struct WsegBox *boxes,
                                         size_t num_boxes,
                                         double b_fg,
                                         double b_bg,
                                         uint8_t *labels_out);

struct WsegCrfParams wseg_crf_default_params(void);

// Dense-CRF refinement of a score map. `params` may be null for defaults.
//
// # Safety
// `scores` as above; `image` holds `height * width * channels` values;
// `labels_out` `height * width` bytes.
enum WsegStatus wseg_crf_refine(const double *scores,
                                size_t height,
                                size_t width,
                                size_t num_labels,
                                const double *image,
                                size_t channels,
                                const struct WsegCrfParams *params,
                                uint8_t *labels_out);

// Mean IOU of one prediction against ground truth over `num_pixels` pixels.
//
// # Safety
// `gt` and `pred` hold `num_pixels` bytes; `out` is writable.
enum WsegStatus wseg_mean_iou(const uint8_t *gt,
                              const uint8_t *pred,
                              size_t num_pixels,
                              size_t num_labels,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSEG_H */
