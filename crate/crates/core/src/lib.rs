//! Vehicle counting for very-high-resolution satellite imagery.
//!
//! The crate covers the non-neural half of a vehicle-counting pipeline:
//!
//! - [`annotate`]: seed-click flood fill in (S, V) space, manual strokes, instance masks
//!   and bounding-box export for building training sets.
//! - [`counting`]: test-time-augmentation vote aggregation over segmentation masks,
//!   connected components and a blob-size count estimator.
//! - [`detect`]: anchor computation, decoding of raw detection grids and NMS.
//! - [`fusion`]: combining detector boxes with segmentation blobs.
//! - [`eval`]: ground-truth matching and recall/precision reports.
//! - [`tiling`]: fixed-size windows over large rasters and stitching them back.
//! - [`service`]: the HTTP annotation service used by the browser front end.
//!
//! Model outputs (masks, raw grids, box lists) are read from files; no inference runs here.

pub mod annotate;
pub mod color;
pub mod config;
pub mod counting;
pub mod detect;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod raster;
pub mod service;
pub mod tiling;

pub use color::{rgb_to_hsv, sv_distance, HsvColor};
pub use geometry::{BoxF, PixelBox};
pub use raster::{BinaryMask, RasterImage};
