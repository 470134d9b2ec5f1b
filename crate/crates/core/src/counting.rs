//! Counting vehicles from segmentation output.
//!
//! Test-time augmentation gives many binary predictions per pixel. They are mapped back to
//! the canvas and combined by strict-majority voting. The foreground is then split into
//! 8-connected blobs and every blob is converted into a vehicle count by dividing its area
//! by a per-vehicle pixel footprint. The footprint depends on whether the blob looks like
//! cars parked in a line (elongated) or side by side (compact).

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::InstanceMask;
use crate::geometry::PixelBox;
use crate::raster::{self, BinaryMask, RasterError};

#[derive(Debug, Error)]
pub enum CountingError {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error("no predictions to aggregate")]
    NoPredictions,
    #[error("{0} canvas pixels received no vote")]
    UncoveredPixels(usize),
    #[error("vote count overflow (more than 65535 predictions)")]
    TooManyPredictions,
    #[error("malformed vote raster: {0}")]
    MalformedVotes(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    #[default]
    None,
    Horizontal,
    Vertical,
}

/// How a prediction was produced from the canvas image.
///
/// Forward order: the canvas is placed at `offset` inside a padded (or cropped) frame, the
/// frame is flipped, then rotated clockwise by `rotate_degrees`. Only multiples of 90° are
/// invertible on a pixel grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaTransform {
    #[serde(default)]
    pub rotate_degrees: i32,
    #[serde(default)]
    pub flip: Flip,
    /// Position of the canvas origin inside the frame; negative values crop.
    #[serde(default)]
    pub offset: (i64, i64),
}

impl TtaTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    fn quarter_turns(&self) -> Result<u32, CountingError> {
        if self.rotate_degrees % 90 != 0 {
            return Err(CountingError::InvalidTransform(format!(
                "rotation of {}° is not a multiple of 90°",
                self.rotate_degrees
            )));
        }
        Ok((self.rotate_degrees / 90).rem_euclid(4) as u32)
    }

    /// Maps a canvas pixel into the prediction raster of size `pred_w` x `pred_h`,
    /// or `None` when the pixel falls outside the prediction's footprint.
    pub fn canvas_to_prediction(
        &self,
        x: u32,
        y: u32,
        pred_w: u32,
        pred_h: u32,
    ) -> Result<Option<(u32, u32)>, CountingError> {
        let turns = self.quarter_turns()?;
        Ok(self.map_point(turns, x, y, pred_w, pred_h))
    }

    fn map_point(&self, turns: u32, x: u32, y: u32, pred_w: u32, pred_h: u32) -> Option<(u32, u32)> {
        let (fw, fh) = if turns % 2 == 1 { (pred_h as i64, pred_w as i64) } else { (pred_w as i64, pred_h as i64) };
        let (mut px, mut py) = (x as i64 + self.offset.0, y as i64 + self.offset.1);
        if px < 0 || py < 0 || px >= fw || py >= fh {
            return None;
        }
        match self.flip {
            Flip::None => {}
            Flip::Horizontal => px = fw - 1 - px,
            Flip::Vertical => py = fh - 1 - py,
        }
        // Clockwise quarter turn of a w x h raster: (x, y) -> (h - 1 - y, x), new size h x w.
        let (mut w, mut h) = (fw, fh);
        for _ in 0..turns {
            let nx = h - 1 - py;
            py = px;
            px = nx;
            std::mem::swap(&mut w, &mut h);
        }
        Some((px as u32, py as u32))
    }
}

/// Per-pixel vote tallies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbabilityMask {
    width: u32,
    height: u32,
    votes_vehicle: Vec<u16>,
    votes_total: Vec<u16>,
}

impl ProbabilityMask {
    pub fn from_votes(
        width: u32,
        height: u32,
        votes_vehicle: Vec<u16>,
        votes_total: Vec<u16>,
    ) -> Result<Self, CountingError> {
        let n = width as usize * height as usize;
        if votes_vehicle.len() != n || votes_total.len() != n {
            return Err(CountingError::MalformedVotes("length mismatch".into()));
        }
        if votes_vehicle.iter().zip(&votes_total).any(|(v, t)| v > t) {
            return Err(CountingError::MalformedVotes("vehicle votes exceed total votes".into()));
        }
        let uncovered = votes_total.iter().filter(|&&t| t == 0).count();
        if uncovered > 0 {
            return Err(CountingError::UncoveredPixels(uncovered));
        }
        Ok(Self {
            width,
            height,
            votes_vehicle,
            votes_total,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn votes_vehicle(&self) -> &[u16] {
        &self.votes_vehicle
    }

    pub fn votes_total(&self) -> &[u16] {
        &self.votes_total
    }

    pub fn votes_at(&self, x: u32, y: u32) -> (u16, u16) {
        let i = y as usize * self.width as usize + x as usize;
        (self.votes_vehicle[i], self.votes_total[i])
    }

    /// Two-channel 16-bit PNG: (vehicle votes, total votes).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), CountingError> {
        let samples = self
            .votes_vehicle
            .iter()
            .zip(&self.votes_total)
            .flat_map(|(&v, &t)| [v, t])
            .collect();
        raster::save_gray_alpha16_png(path, self.width, self.height, samples)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, CountingError> {
        let (w, h, samples) = raster::load_gray_alpha16_png(path)?;
        let (vv, vt) = samples.chunks_exact(2).map(|c| (c[0], c[1])).unzip();
        Self::from_votes(w, h, vv, vt)
    }
}

/// Maps every prediction back onto a `width` x `height` canvas and tallies votes.
pub fn aggregate_votes(
    width: u32,
    height: u32,
    predictions: &[(BinaryMask, TtaTransform)],
) -> Result<ProbabilityMask, CountingError> {
    if predictions.is_empty() {
        return Err(CountingError::NoPredictions);
    }
    if predictions.len() > u16::MAX as usize {
        return Err(CountingError::TooManyPredictions);
    }
    let n = width as usize * height as usize;
    let mut vv = vec![0u16; n];
    let mut vt = vec![0u16; n];
    for (mask, t) in predictions {
        let turns = t.quarter_turns()?;
        for y in 0..height {
            for x in 0..width {
                if let Some((px, py)) = t.map_point(turns, x, y, mask.width(), mask.height()) {
                    let i = y as usize * width as usize + x as usize;
                    vt[i] += 1;
                    vv[i] += mask.get(px, py) as u16;
                }
            }
        }
    }
    ProbabilityMask::from_votes(width, height, vv, vt)
}

/// Strict majority: vehicle iff more than half the votes say so. Ties are background.
pub fn threshold_votes(pmask: &ProbabilityMask) -> BinaryMask {
    let data = pmask
        .votes_vehicle
        .iter()
        .zip(&pmask.votes_total)
        .map(|(&v, &t)| 2 * v as u32 > t as u32)
        .collect();
    BinaryMask::from_vec(pmask.width, pmask.height, data).expect("same shape")
}

/// An 8-connected foreground component.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    /// Pixels in row-major order.
    pub pixels: Vec<(u32, u32)>,
    pub area: usize,
    pub bounds: PixelBox,
    /// Major/minor axis ratio from second-order moments, at least 1.
    pub elongation: f64,
}

impl Blob {
    pub fn from_pixels(mut pixels: Vec<(u32, u32)>) -> Self {
        assert!(!pixels.is_empty(), "blob needs at least one pixel");
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        let mut b = PixelBox {
            x_min: u32::MAX,
            y_min: u32::MAX,
            x_max: 0,
            y_max: 0,
        };
        for &(x, y) in &pixels {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x + 1);
            b.y_max = b.y_max.max(y + 1);
        }
        let elongation = elongation(&pixels);
        Self {
            area: pixels.len(),
            pixels,
            bounds: b,
            elongation,
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.bounds.contains(x, y) && self.pixels.binary_search_by_key(&(y, x), |&(px, py)| (py, px)).is_ok()
    }

    /// Row runs `[y, x_start, x_end)`, a compact exact encoding of the pixel set.
    pub fn runs(&self) -> Vec<[u32; 3]> {
        let mut runs: Vec<[u32; 3]> = Vec::new();
        for &(x, y) in &self.pixels {
            match runs.last_mut() {
                Some(r) if r[0] == y && r[2] == x => r[2] += 1,
                _ => runs.push([y, x, x + 1]),
            }
        }
        runs
    }

    pub fn from_runs(runs: &[[u32; 3]]) -> Self {
        Self::from_pixels(
            runs.iter()
                .flat_map(|&[y, x0, x1]| (x0..x1).map(move |x| (x, y)))
                .collect(),
        )
    }
}

/// Axis ratio of the pixel set treated as a union of unit squares.
///
/// Each pixel contributes its own second moment of 1/12 per axis, so a solid `a x b`
/// rectangle has variances `a²/12` and `b²/12` and an elongation of exactly `b / a`, and a
/// single pixel has elongation 1.
fn elongation(pixels: &[(u32, u32)]) -> f64 {
    let n = pixels.len() as f64;
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    let (cx, cy) = (sx / n, sy / n);
    let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pixels {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        mxx += dx * dx;
        myy += dy * dy;
        mxy += dx * dy;
    }
    let pixel_moment = 1.0 / 12.0;
    let (a, c, b) = (mxx / n + pixel_moment, myy / n + pixel_moment, mxy / n);
    let mean = (a + c) / 2.0;
    let spread = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let (major, minor) = (mean + spread, mean - spread);
    (major / minor).sqrt().max(1.0)
}

/// 8-connected components, in order of each blob's first pixel in raster order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Blob> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let data = mask.data();
    let mut seen = vec![false; data.len()];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if !data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i as i64) % w, (i as i64) / w);
            pixels.push((x as u32, y as u32));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if data[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        blobs.push(Blob::from_pixels(pixels));
    }
    blobs
}

/// Per-vehicle footprints for converting blob area into a count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountEstimatorConfig {
    /// Pixels per vehicle in elongated blobs (cars in a line).
    pub mean_px_lined: f64,
    /// Pixels per vehicle in compact blobs (cars side by side).
    pub mean_px_side_by_side: f64,
    pub min_blob_area: usize,
    pub elongation_threshold: f64,
}

/// A vehicle covers about 5 x 8 pixels at 50 cm ground sampling.
pub const DEFAULT_VEHICLE_PIXELS: f64 = 40.0;

impl Default for CountEstimatorConfig {
    fn default() -> Self {
        Self {
            mean_px_lined: DEFAULT_VEHICLE_PIXELS,
            mean_px_side_by_side: DEFAULT_VEHICLE_PIXELS,
            min_blob_area: 12,
            elongation_threshold: 2.5,
        }
    }
}

impl CountEstimatorConfig {
    pub fn validate(&self) -> Result<(), CountingError> {
        if !(self.mean_px_lined > 0.0 && self.mean_px_side_by_side > 0.0) {
            return Err(CountingError::InvalidConfig("mean pixel footprints must be positive".into()));
        }
        if self.min_blob_area == 0 {
            return Err(CountingError::InvalidConfig("min_blob_area must be positive".into()));
        }
        if !(self.elongation_threshold >= 1.0) {
            return Err(CountingError::InvalidConfig("elongation_threshold must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn estimate_count(blob: &Blob, cfg: &CountEstimatorConfig) -> u64 {
    estimate_count_for(blob.area, blob.elongation, cfg)
}

fn estimate_count_for(area: usize, elongation: f64, cfg: &CountEstimatorConfig) -> u64 {
    if area < cfg.min_blob_area {
        return 0;
    }
    let divisor = if elongation >= cfg.elongation_threshold {
        cfg.mean_px_lined
    } else {
        cfg.mean_px_side_by_side
    };
    // f64::round is half-away-from-zero.
    ((area as f64 / divisor).round() as u64).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobReport {
    pub area: usize,
    pub bounds: PixelBox,
    pub elongation: f64,
    pub count: u64,
    /// Row runs `[y, x_start, x_end)` of the blob's pixels.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<[u32; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub total: u64,
    pub blobs: Vec<BlobReport>,
}

impl CountReport {
    /// Rebuilds blobs from the stored runs. Entries without runs are skipped.
    pub fn to_blobs(&self) -> Vec<Blob> {
        self.blobs
            .iter()
            .filter(|b| !b.runs.is_empty())
            .map(|b| Blob::from_runs(&b.runs))
            .collect()
    }
}

pub fn count_blobs(blobs: &[Blob], cfg: &CountEstimatorConfig) -> CountReport {
    let blobs: Vec<BlobReport> = blobs
        .iter()
        .map(|b| BlobReport {
            area: b.area,
            bounds: b.bounds,
            elongation: b.elongation,
            count: estimate_count(b, cfg),
            runs: b.runs(),
        })
        .collect();
    CountReport {
        total: blobs.iter().map(|b| b.count).sum(),
        blobs,
    }
}

pub fn count_image(mask: &BinaryMask, cfg: &CountEstimatorConfig) -> CountReport {
    count_blobs(&connected_components(mask), cfg)
}

/// Statistics behind a calibrated estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub config: CountEstimatorConfig,
    pub lined_vehicles: u64,
    pub side_by_side_vehicles: u64,
}

/// Derives both per-vehicle footprints from annotated instance masks.
///
/// The union of instances is split into 8-connected blocks, exactly as a segmentation mask
/// would be. Each block is classified with the same elongation rule the estimator uses, and a
/// class's footprint is its total block area over its total vehicle count. A class without
/// samples borrows the other class's footprint; with no vehicles at all the base config is
/// returned unchanged.
pub fn calibrate(masks: &[InstanceMask], base: &CountEstimatorConfig) -> Calibration {
    let (mut lined_px, mut lined_n, mut side_px, mut side_n) = (0u64, 0u64, 0u64, 0u64);
    for mask in masks {
        let fg = BinaryMask::from_vec(
            mask.width(),
            mask.height(),
            mask.labels().iter().map(|&l| l != 0).collect(),
        )
        .expect("same shape");
        for blob in connected_components(&fg) {
            let mut ids: Vec<u32> = blob.pixels.iter().map(|&(x, y)| mask.get(x, y)).collect();
            ids.sort_unstable();
            ids.dedup();
            let vehicles = ids.len() as u64;
            if blob.elongation >= base.elongation_threshold {
                lined_px += blob.area as u64;
                lined_n += vehicles;
            } else {
                side_px += blob.area as u64;
                side_n += vehicles;
            }
        }
    }
    let mean = |px: u64, n: u64| (n > 0).then(|| px as f64 / n as f64);
    let (lined, side) = (mean(lined_px, lined_n), mean(side_px, side_n));
    let mut config = *base;
    if let Some(v) = lined.or(side) {
        config.mean_px_lined = v;
    }
    if let Some(v) = side.or(lined) {
        config.mean_px_side_by_side = v;
    }
    Calibration {
        config,
        lined_vehicles: lined_n,
        side_by_side_vehicles: side_n,
    }
}
