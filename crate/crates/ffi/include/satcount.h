#ifndef SATCOUNT_H
#define SATCOUNT_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum ScStatus {
  SC_STATUS_OK = 0,
  SC_STATUS_NULL_POINTER = 1,
  SC_STATUS_INVALID_ARGUMENT = 2,
  SC_STATUS_OUT_OF_BOUNDS = 3,
  // The operation's precondition does not hold (e.g. road color unset).
  SC_STATUS_CONFLICT = 4,
  SC_STATUS_NOT_FOUND = 5,
  SC_STATUS_BUFFER_TOO_SMALL = 6,
  SC_STATUS_INTERNAL = 7,
} ScStatus;

typedef enum ScStrokeKind {
  SC_STROKE_KIND_STRAIGHT_LINE = 0,
  SC_STROKE_KIND_FREEHAND = 1,
} ScStrokeKind;

// An annotation session. Not thread-safe; callers serialize access.
typedef struct ScSession ScSession;

typedef struct ScHsv {
  double h;
  double s;
  double v;
} ScHsv;

typedef struct ScBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} ScBox;

typedef struct ScDetection {
  struct ScBox bbox;
  double score;
} ScDetection;

typedef struct ScMetrics {
  uint64_t counted;
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  // Meaningful only when `recall_defined`.
  double recall;
  double precision;
  bool recall_defined;
  bool precision_defined;
} ScMetrics;

typedef struct ScCountConfig {
  double mean_px_lined;
  double mean_px_side_by_side;
  size_t min_blob_area;
  double elongation_threshold;
} ScCountConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static description of a status code. Never null.
const char *sc_status_message(enum ScStatus status);

// Detail of the last failure on this thread, valid until the next failing call.
const char *sc_last_error(void);

enum ScStatus sc_rgb_to_hsv(uint8_t r, uint8_t g, uint8_t b, struct ScHsv *out);

// Distance over saturation and value only.
double sc_sv_distance(struct ScHsv a, struct ScHsv b);

enum ScStatus sc_iou(const struct ScBox *a, const struct ScBox *b, double *out);

// Greedy NMS. Writes up to `out_cap` survivors in rank order and their count to `out_len`.
// A null `out` with `out_cap` 0 only queries the count.
enum ScStatus sc_nms(const struct ScDetection *dets,
                     size_t n,
                     double iou_threshold,
                     struct ScDetection *out,
                     size_t out_cap,
                     size_t *out_len);

enum ScStatus sc_metrics(int64_t tp, int64_t fp, int64_t fn_, struct ScMetrics *out);

struct ScCountConfig sc_count_config_default(void);

// Estimated vehicle count of a row-major byte mask (nonzero is vehicle).
// `config` may be null for the defaults.
enum ScStatus sc_count_mask(const uint8_t *mask,
                            uint32_t width,
                            uint32_t height,
                            const struct ScCountConfig *config,
                            uint64_t *total);

// Tile origins as `(x, y)` pairs in `origins` (2 values per tile), row-major.
// The tile count is always written to `count`; a null `origins` with `cap` 0 only queries it.
enum ScStatus sc_plan_tiles(uint32_t width,
                            uint32_t height,
                            uint32_t tile_size,
                            uint32_t overlap,
                            uint32_t *origins,
                            size_t cap,
                            size_t *count);

// Creates a session over a copy of `pixels` (row-major, `channels` of 1, 3 or 4).
enum ScStatus sc_session_new(const uint8_t *pixels,
                             uint32_t width,
                             uint32_t height,
                             uint8_t channels,
                             struct ScSession **out);

// Releases a session. Null is ignored.
void sc_session_free(struct ScSession *session);

enum ScStatus sc_session_size(const struct ScSession *session, uint32_t *width, uint32_t *height);

enum ScStatus sc_session_set_settings(struct ScSession *session,
                                      double fill_tolerance,
                                      double road_margin);

// Picks the road color around `(x, y)`. `out` may be null.
enum ScStatus sc_session_set_road_color(struct ScSession *session,
                                        int64_t x,
                                        int64_t y,
                                        struct ScHsv *out);

// Flood fills from `(x, y)` into a new instance. `instance_id` and `pixel_count` may be null.
enum ScStatus sc_session_flood_fill(struct ScSession *session,
                                    int64_t x,
                                    int64_t y,
                                    uint32_t *instance_id,
                                    size_t *pixel_count);

// Labels a stroke through `n_points` `(x, y)` pairs in `points` (2 values per point).
enum ScStatus sc_session_stroke(struct ScSession *session,
                                enum ScStrokeKind kind,
                                const uint32_t *points,
                                size_t n_points,
                                uint32_t brush_radius,
                                uint32_t *instance_id,
                                size_t *pixel_count);

// Reverts the latest edit; `reverted` reports whether there was one.
enum ScStatus sc_session_undo(struct ScSession *session, bool *reverted);

enum ScStatus sc_session_redo(struct ScSession *session, bool *reapplied);

enum ScStatus sc_session_erase(struct ScSession *session, uint32_t instance_id, size_t *cleared);

// Copies the row-major instance ids into `out`, which must hold `width * height` values.
enum ScStatus sc_session_labels(const struct ScSession *session, uint32_t *out, size_t cap);

// Writes up to `cap` instance boxes `[x_min, y_min, x_max, y_max]` with their ids, in id order.
// The box count is always written to `count`; null buffers with `cap` 0 only query it.
enum ScStatus sc_session_boxes(const struct ScSession *session,
                               uint32_t *ids,
                               struct ScBox *boxes,
                               size_t cap,
                               size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SATCOUNT_H */
