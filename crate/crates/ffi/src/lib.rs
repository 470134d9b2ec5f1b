//! C ABI over the satcount core.
//!
//! Every fallible function returns an [`ScStatus`]; results go through out-pointers. A
//! non-`Ok` status leaves a message readable with [`sc_last_error`] on the calling thread.
//! Annotation sessions are opaque [`ScSession`] handles released with [`sc_session_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use satcount::annotate::{AnnotateError, AnnotationSession, FillSettings, Stroke, StrokeKind};
use satcount::counting::{count_image, CountEstimatorConfig};
use satcount::detect::{nms, Detection, Source};
use satcount::eval::metrics;
use satcount::geometry::BoxF;
use satcount::tiling::plan_tiles;
use satcount::{rgb_to_hsv, sv_distance, BinaryMask, HsvColor, RasterImage};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfBounds = 3,
    /// The operation's precondition does not hold (e.g. road color unset).
    Conflict = 4,
    NotFound = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: ScStatus, message: impl Into<String>) -> ScStatus {
    let msg = CString::new(message.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

fn guard(f: impl FnOnce() -> ScStatus) -> ScStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(ScStatus::Internal, "internal panic"))
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(ScStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

fn annotate_status(e: AnnotateError) -> ScStatus {
    let status = match e {
        AnnotateError::OutOfBounds { .. } => ScStatus::OutOfBounds,
        AnnotateError::RoadColorUnset | AnnotateError::SeedLabeled { .. } | AnnotateError::NothingToLabel => {
            ScStatus::Conflict
        }
        AnnotateError::UnknownInstance(_) => ScStatus::NotFound,
        AnnotateError::InvalidStroke(_) | AnnotateError::InvalidSetting(_) | AnnotateError::DimensionMismatch(..) => {
            ScStatus::InvalidArgument
        }
        _ => ScStatus::Internal,
    };
    fail(status, e.to_string())
}

/// Static description of a status code. Never null.
#[no_mangle]
pub extern "C" fn sc_status_message(status: ScStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        ScStatus::Ok => b"ok\0",
        ScStatus::NullPointer => b"null pointer argument\0",
        ScStatus::InvalidArgument => b"invalid argument\0",
        ScStatus::OutOfBounds => b"coordinate outside the image\0",
        ScStatus::Conflict => b"operation not possible in the current state\0",
        ScStatus::NotFound => b"not found\0",
        ScStatus::BufferTooSmall => b"output buffer too small\0",
        ScStatus::Internal => b"internal error\0",
    };
    s.as_ptr().cast()
}

/// Detail of the last failure on this thread, valid until the next failing call.
#[no_mangle]
pub extern "C" fn sc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScHsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl From<HsvColor> for ScHsv {
    fn from(c: HsvColor) -> Self {
        Self { h: c.h, s: c.s, v: c.v }
    }
}

#[no_mangle]
pub unsafe extern "C" fn sc_rgb_to_hsv(r: u8, g: u8, b: u8, out: *mut ScHsv) -> ScStatus {
    non_null!(out);
    *out = rgb_to_hsv(r, g, b).into();
    ScStatus::Ok
}

/// Distance over saturation and value only.
#[no_mangle]
pub extern "C" fn sc_sv_distance(a: ScHsv, b: ScHsv) -> f64 {
    sv_distance(HsvColor::new(a.h, a.s, a.v), HsvColor::new(b.h, b.s, b.v))
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

fn to_box(b: &ScBox) -> Result<BoxF, ScStatus> {
    BoxF::new(b.x_min, b.y_min, b.x_max, b.y_max).map_err(|e| fail(ScStatus::InvalidArgument, e.to_string()))
}

#[no_mangle]
pub unsafe extern "C" fn sc_iou(a: *const ScBox, b: *const ScBox, out: *mut f64) -> ScStatus {
    non_null!(a, b, out);
    guard(|| match (to_box(&*a), to_box(&*b)) {
        (Ok(a), Ok(b)) => {
            *out = a.iou(&b);
            ScStatus::Ok
        }
        (Err(s), _) | (_, Err(s)) => s,
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScDetection {
    pub bbox: ScBox,
    pub score: f64,
}

/// Greedy NMS. Writes up to `out_cap` survivors in rank order and their count to `out_len`.
/// A null `out` with `out_cap` 0 only queries the count.
#[no_mangle]
pub unsafe extern "C" fn sc_nms(
    dets: *const ScDetection,
    n: usize,
    iou_threshold: f64,
    out: *mut ScDetection,
    out_cap: usize,
    out_len: *mut usize,
) -> ScStatus {
    non_null!(out_len);
    if n > 0 {
        non_null!(dets);
    }
    if out_cap > 0 {
        non_null!(out);
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return fail(ScStatus::InvalidArgument, "iou_threshold must lie in [0, 1]");
    }
    guard(|| {
        let input = if n == 0 { &[][..] } else { std::slice::from_raw_parts(dets, n) };
        let mut parsed = Vec::with_capacity(n);
        for d in input {
            match to_box(&d.bbox) {
                Ok(b) => parsed.push(Detection::new(b, d.score, Source::Detector)),
                Err(s) => return s,
            }
        }
        let kept = nms(&parsed, iou_threshold);
        *out_len = kept.len();
        if out.is_null() {
            return ScStatus::Ok;
        }
        if kept.len() > out_cap {
            return fail(ScStatus::BufferTooSmall, format!("{} detections survive, capacity {out_cap}", kept.len()));
        }
        for (i, d) in kept.iter().enumerate() {
            *out.add(i) = ScDetection {
                bbox: ScBox {
                    x_min: d.bbox.x_min,
                    y_min: d.bbox.y_min,
                    x_max: d.bbox.x_max,
                    y_max: d.bbox.y_max,
                },
                score: d.score,
            };
        }
        ScStatus::Ok
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScMetrics {
    pub counted: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Meaningful only when `recall_defined`.
    pub recall: f64,
    pub precision: f64,
    pub recall_defined: bool,
    pub precision_defined: bool,
}

#[no_mangle]
pub unsafe extern "C" fn sc_metrics(tp: i64, fp: i64, fn_: i64, out: *mut ScMetrics) -> ScStatus {
    non_null!(out);
    match metrics(tp, fp, fn_) {
        Ok(r) => {
            *out = ScMetrics {
                counted: r.counted,
                tp: r.tp,
                fp: r.fp,
                fn_: r.fn_,
                recall: r.recall.unwrap_or(0.0),
                precision: r.precision.unwrap_or(0.0),
                recall_defined: r.recall.is_some(),
                precision_defined: r.precision.is_some(),
            };
            ScStatus::Ok
        }
        Err(e) => fail(ScStatus::InvalidArgument, e.to_string()),
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScCountConfig {
    pub mean_px_lined: f64,
    pub mean_px_side_by_side: f64,
    pub min_blob_area: usize,
    pub elongation_threshold: f64,
}

#[no_mangle]
pub extern "C" fn sc_count_config_default() -> ScCountConfig {
    let c = CountEstimatorConfig::default();
    ScCountConfig {
        mean_px_lined: c.mean_px_lined,
        mean_px_side_by_side: c.mean_px_side_by_side,
        min_blob_area: c.min_blob_area,
        elongation_threshold: c.elongation_threshold,
    }
}

/// Estimated vehicle count of a row-major byte mask (nonzero is vehicle).
/// `config` may be null for the defaults.
#[no_mangle]
pub unsafe extern "C" fn sc_count_mask(
    mask: *const u8,
    width: u32,
    height: u32,
    config: *const ScCountConfig,
    total: *mut u64,
) -> ScStatus {
    non_null!(mask, total);
    guard(|| {
        let cfg = if config.is_null() {
            CountEstimatorConfig::default()
        } else {
            let c = &*config;
            CountEstimatorConfig {
                mean_px_lined: c.mean_px_lined,
                mean_px_side_by_side: c.mean_px_side_by_side,
                min_blob_area: c.min_blob_area,
                elongation_threshold: c.elongation_threshold,
            }
        };
        if let Err(e) = cfg.validate() {
            return fail(ScStatus::InvalidArgument, e.to_string());
        }
        let n = width as usize * height as usize;
        let data = std::slice::from_raw_parts(mask, n).iter().map(|&b| b != 0).collect();
        match BinaryMask::from_vec(width, height, data) {
            Ok(m) => {
                *total = count_image(&m, &cfg).total;
                ScStatus::Ok
            }
            Err(e) => fail(ScStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Tile origins as `(x, y)` pairs in `origins` (2 values per tile), row-major.
/// The tile count is always written to `count`; a null `origins` with `cap` 0 only queries it.
#[no_mangle]
pub unsafe extern "C" fn sc_plan_tiles(
    width: u32,
    height: u32,
    tile_size: u32,
    overlap: u32,
    origins: *mut u32,
    cap: usize,
    count: *mut usize,
) -> ScStatus {
    non_null!(count);
    if cap > 0 {
        non_null!(origins);
    }
    guard(|| match plan_tiles(width, height, tile_size, overlap) {
        Ok(grid) => {
            *count = grid.len();
            if origins.is_null() {
                return ScStatus::Ok;
            }
            if grid.len() > cap {
                return fail(ScStatus::BufferTooSmall, format!("{} tiles, capacity {cap}", grid.len()));
            }
            for (i, &(x, y)) in grid.origins.iter().enumerate() {
                *origins.add(2 * i) = x;
                *origins.add(2 * i + 1) = y;
            }
            ScStatus::Ok
        }
        Err(e) => fail(ScStatus::InvalidArgument, e.to_string()),
    })
}

/// An annotation session. Not thread-safe; callers serialize access.
pub struct ScSession {
    inner: AnnotationSession,
}

/// Creates a session over a copy of `pixels` (row-major, `channels` of 1, 3 or 4).
#[no_mangle]
pub unsafe extern "C" fn sc_session_new(
    pixels: *const u8,
    width: u32,
    height: u32,
    channels: u8,
    out: *mut *mut ScSession,
) -> ScStatus {
    non_null!(pixels, out);
    guard(|| {
        let n = width as usize * height as usize * channels as usize;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        match RasterImage::new(width, height, channels, data) {
            Ok(img) => {
                let s = Box::new(ScSession {
                    inner: AnnotationSession::new(Arc::new(img)),
                });
                *out = Box::into_raw(s);
                ScStatus::Ok
            }
            Err(e) => fail(ScStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a session. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sc_session_free(session: *mut ScSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

#[no_mangle]
pub unsafe extern "C" fn sc_session_size(session: *const ScSession, width: *mut u32, height: *mut u32) -> ScStatus {
    non_null!(session, width, height);
    let m = (*session).inner.mask();
    *width = m.width();
    *height = m.height();
    ScStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn sc_session_set_settings(session: *mut ScSession, fill_tolerance: f64, road_margin: f64) -> ScStatus {
    non_null!(session);
    match (*session).inner.set_settings(FillSettings {
        fill_tolerance,
        road_margin,
    }) {
        Ok(()) => ScStatus::Ok,
        Err(e) => annotate_status(e),
    }
}

/// Picks the road color around `(x, y)`. `out` may be null.
#[no_mangle]
pub unsafe extern "C" fn sc_session_set_road_color(session: *mut ScSession, x: i64, y: i64, out: *mut ScHsv) -> ScStatus {
    non_null!(session);
    guard(|| match (*session).inner.set_road_color(x, y) {
        Ok(c) => {
            if !out.is_null() {
                *out = c.into();
            }
            ScStatus::Ok
        }
        Err(e) => annotate_status(e),
    })
}

/// Flood fills from `(x, y)` into a new instance. `instance_id` and `pixel_count` may be null.
#[no_mangle]
pub unsafe extern "C" fn sc_session_flood_fill(
    session: *mut ScSession,
    x: i64,
    y: i64,
    instance_id: *mut u32,
    pixel_count: *mut usize,
) -> ScStatus {
    non_null!(session);
    guard(|| match (*session).inner.flood_fill(x, y) {
        Ok(l) => {
            if !instance_id.is_null() {
                *instance_id = l.instance_id;
            }
            if !pixel_count.is_null() {
                *pixel_count = l.pixels.len();
            }
            ScStatus::Ok
        }
        Err(e) => annotate_status(e),
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScStrokeKind {
    StraightLine = 0,
    Freehand = 1,
}

/// Labels a stroke through `n_points` `(x, y)` pairs in `points` (2 values per point).
#[no_mangle]
pub unsafe extern "C" fn sc_session_stroke(
    session: *mut ScSession,
    kind: ScStrokeKind,
    points: *const u32,
    n_points: usize,
    brush_radius: u32,
    instance_id: *mut u32,
    pixel_count: *mut usize,
) -> ScStatus {
    non_null!(session, points);
    guard(|| {
        let flat = std::slice::from_raw_parts(points, 2 * n_points);
        let stroke = Stroke {
            kind: match kind {
                ScStrokeKind::StraightLine => StrokeKind::StraightLine,
                ScStrokeKind::Freehand => StrokeKind::Freehand,
            },
            points: flat.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
            brush_radius,
        };
        match (*session).inner.apply_stroke(&stroke) {
            Ok(l) => {
                if !instance_id.is_null() {
                    *instance_id = l.instance_id;
                }
                if !pixel_count.is_null() {
                    *pixel_count = l.pixels.len();
                }
                ScStatus::Ok
            }
            Err(e) => annotate_status(e),
        }
    })
}

/// Reverts the latest edit; `reverted` reports whether there was one.
#[no_mangle]
pub unsafe extern "C" fn sc_session_undo(session: *mut ScSession, reverted: *mut bool) -> ScStatus {
    non_null!(session, reverted);
    *reverted = (*session).inner.undo();
    ScStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn sc_session_redo(session: *mut ScSession, reapplied: *mut bool) -> ScStatus {
    non_null!(session, reapplied);
    *reapplied = (*session).inner.redo();
    ScStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn sc_session_erase(session: *mut ScSession, instance_id: u32, cleared: *mut usize) -> ScStatus {
    non_null!(session);
    guard(|| match (*session).inner.erase_instance(instance_id) {
        Ok(n) => {
            if !cleared.is_null() {
                *cleared = n;
            }
            ScStatus::Ok
        }
        Err(e) => annotate_status(e),
    })
}

/// Copies the row-major instance ids into `out`, which must hold `width * height` values.
#[no_mangle]
pub unsafe extern "C" fn sc_session_labels(session: *const ScSession, out: *mut u32, cap: usize) -> ScStatus {
    non_null!(session, out);
    let labels = (*session).inner.mask().labels();
    if labels.len() > cap {
        return fail(ScStatus::BufferTooSmall, format!("mask has {} pixels, capacity {cap}", labels.len()));
    }
    std::ptr::copy_nonoverlapping(labels.as_ptr(), out, labels.len());
    ScStatus::Ok
}

/// Writes up to `cap` instance boxes `[x_min, y_min, x_max, y_max]` with their ids, in id order.
/// The box count is always written to `count`; null buffers with `cap` 0 only query it.
#[no_mangle]
pub unsafe extern "C" fn sc_session_boxes(
    session: *const ScSession,
    ids: *mut u32,
    boxes: *mut ScBox,
    cap: usize,
    count: *mut usize,
) -> ScStatus {
    non_null!(session, count);
    if cap > 0 {
        non_null!(ids, boxes);
    }
    let all = (*session).inner.boxes();
    *count = all.len();
    if ids.is_null() || boxes.is_null() {
        return ScStatus::Ok;
    }
    if all.len() > cap {
        return fail(ScStatus::BufferTooSmall, format!("{} boxes, capacity {cap}", all.len()));
    }
    for (i, (id, b)) in all.iter().enumerate() {
        *ids.add(i) = *id;
        let f = b.to_f64();
        *boxes.add(i) = ScBox {
            x_min: f.x_min,
            y_min: f.y_min,
            x_max: f.x_max,
            y_max: f.y_max,
        };
    }
    ScStatus::Ok
}
