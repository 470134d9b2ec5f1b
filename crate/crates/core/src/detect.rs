//! Detector-side post-processing for small-object grids.
//!
//! The detector predicts on fine grids (strides 8, 4 and 2 by default) because vehicles only
//! span a handful of pixels. This module turns raw per-cell outputs into boxes, suppresses
//! duplicates, and computes anchor priors from annotated box sizes with IoU-distance k-means.

use std::cmp::Ordering;
use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::geometry::iou;
use crate::geometry::BoxF;

pub const GRID_MAGIC: &[u8; 8] = b"SCGRID01";
pub const DEFAULT_STRIDES: [u32; 3] = [8, 4, 2];
pub const DEFAULT_ANCHORS_PER_LEVEL: usize = 3;
pub const DEFAULT_NMS_IOU: f64 = 0.3;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed detection grid: {0}")]
    MalformedGrid(String),
    #[error("malformed detection record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A prior box size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn new(w: f64, h: f64) -> Result<Self, DetectError> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(DetectError::InvalidArgument(format!("anchor ({w}, {h}) must be positive")));
        }
        Ok(Self { w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// IoU of two boxes sharing a center, i.e. a comparison of shapes only.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub seed: u64,
    /// Independent k-means++ initializations; the lowest-cost run wins.
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            restarts: 10,
            max_iter: 300,
        }
    }
}

/// Result of [`compute_anchors`].
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorFit {
    /// Cluster means, sorted by area ascending.
    pub anchors: Vec<Anchor>,
    /// Mean `1 - IoU` of every box to its cluster mean.
    pub cost: f64,
    /// Cost after each accepted step of the winning run; non-increasing.
    pub history: Vec<f64>,
}

// Above this many boxes the single-move refinement is skipped (it is quadratic).
const REFINE_LIMIT: usize = 4000;
// Pairwise exchanges are tried only on small inputs.
const SWAP_LIMIT: usize = 300;
// Small inputs are also seeded from every k-subset of distinct sizes, up to this many subsets.
const SUBSET_SEED_LIMIT: usize = 200;

struct Partition<'a> {
    boxes: &'a [(f64, f64)],
    assign: Vec<usize>,
    sums: Vec<(f64, f64, usize)>,
    costs: Vec<f64>,
}

impl<'a> Partition<'a> {
    fn new(boxes: &'a [(f64, f64)], assign: Vec<usize>, k: usize) -> Self {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (b, &c) in boxes.iter().zip(&assign) {
            sums[c].0 += b.0;
            sums[c].1 += b.1;
            sums[c].2 += 1;
        }
        let mut p = Self {
            boxes,
            assign,
            sums,
            costs: vec![0.0; k],
        };
        for c in 0..k {
            p.costs[c] = p.cluster_cost(c, None, None);
        }
        p
    }

    fn mean(&self, c: usize) -> (f64, f64) {
        let (w, h, n) = self.sums[c];
        (w / n as f64, h / n as f64)
    }

    /// Cost of cluster `c`, optionally with box `without` removed or `with` added.
    fn cluster_cost(&self, c: usize, without: Option<usize>, with: Option<usize>) -> f64 {
        let (mut sw, mut sh, mut n) = self.sums[c];
        if let Some(i) = without {
            sw -= self.boxes[i].0;
            sh -= self.boxes[i].1;
            n -= 1;
        }
        if let Some(i) = with {
            sw += self.boxes[i].0;
            sh += self.boxes[i].1;
            n += 1;
        }
        if n == 0 {
            return 0.0;
        }
        let m = (sw / n as f64, sh / n as f64);
        let members = self
            .assign
            .iter()
            .enumerate()
            .filter(|&(i, &a)| a == c && Some(i) != without)
            .map(|(i, _)| i)
            .chain(with);
        members.map(|i| 1.0 - shape_iou(self.boxes[i], m)).sum()
    }

    fn total(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.boxes.len() as f64
    }

    /// Best single-box move that lowers the total cost while keeping every cluster non-empty.
    fn best_move(&self) -> Option<(usize, usize, f64, f64)> {
        let k = self.sums.len();
        let mut best: Option<(usize, usize, f64, f64, f64)> = None;
        for i in 0..self.boxes.len() {
            let from = self.assign[i];
            if self.sums[from].2 < 2 {
                continue;
            }
            let from_cost = self.cluster_cost(from, Some(i), None);
            for to in (0..k).filter(|&c| c != from) {
                let to_cost = self.cluster_cost(to, None, Some(i));
                let delta = from_cost + to_cost - self.costs[from] - self.costs[to];
                if delta < -1e-12 && best.is_none_or(|b| delta < b.4) {
                    best = Some((i, to, from_cost, to_cost, delta));
                }
            }
        }
        best.map(|(i, to, fc, tc, _)| (i, to, fc, tc))
    }

    /// Best exchange of two boxes between clusters that lowers the total cost.
    fn best_swap(&self) -> Option<(usize, usize, f64, f64)> {
        let mut best: Option<(usize, usize, f64, f64, f64)> = None;
        for i in 0..self.boxes.len() {
            for j in i + 1..self.boxes.len() {
                let (ci, cj) = (self.assign[i], self.assign[j]);
                if ci == cj {
                    continue;
                }
                let cost_i = self.swapped_cost(ci, i, j);
                let cost_j = self.swapped_cost(cj, j, i);
                let delta = cost_i + cost_j - self.costs[ci] - self.costs[cj];
                if delta < -1e-12 && best.is_none_or(|b| delta < b.4) {
                    best = Some((i, j, cost_i, cost_j, delta));
                }
            }
        }
        best.map(|(i, j, a, b, _)| (i, j, a, b))
    }

    /// Cost of cluster `c` with member `out` replaced by `inn`.
    fn swapped_cost(&self, c: usize, out: usize, inn: usize) -> f64 {
        let (sw, sh, n) = self.sums[c];
        let m = (
            (sw - self.boxes[out].0 + self.boxes[inn].0) / n as f64,
            (sh - self.boxes[out].1 + self.boxes[inn].1) / n as f64,
        );
        self.assign
            .iter()
            .enumerate()
            .filter(|&(i, &a)| a == c && i != out)
            .map(|(i, _)| i)
            .chain(std::iter::once(inn))
            .map(|i| 1.0 - shape_iou(self.boxes[i], m))
            .sum()
    }

    fn apply_swap(&mut self, i: usize, j: usize, cost_i: f64, cost_j: f64) {
        let (ci, cj) = (self.assign[i], self.assign[j]);
        let (bi, bj) = (self.boxes[i], self.boxes[j]);
        self.sums[ci].0 += bj.0 - bi.0;
        self.sums[ci].1 += bj.1 - bi.1;
        self.sums[cj].0 += bi.0 - bj.0;
        self.sums[cj].1 += bi.1 - bj.1;
        self.assign.swap(i, j);
        self.costs[ci] = cost_i;
        self.costs[cj] = cost_j;
    }

    fn apply_move(&mut self, i: usize, to: usize, from_cost: f64, to_cost: f64) {
        let from = self.assign[i];
        let b = self.boxes[i];
        self.sums[from].0 -= b.0;
        self.sums[from].1 -= b.1;
        self.sums[from].2 -= 1;
        self.sums[to].0 += b.0;
        self.sums[to].1 += b.1;
        self.sums[to].2 += 1;
        self.assign[i] = to;
        self.costs[from] = from_cost;
        self.costs[to] = to_cost;
    }
}

fn nearest(b: (f64, f64), centers: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centers.iter().enumerate() {
        let d = 1.0 - shape_iou(b, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Assigns boxes to their nearest center, then hands every empty cluster the box farthest
/// from its own center among clusters that can spare one.
fn assign_all(boxes: &[(f64, f64)], centers: &[(f64, f64)]) -> Vec<usize> {
    let k = centers.len();
    let mut assign: Vec<usize> = boxes.iter().map(|&b| nearest(b, centers)).collect();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return assign;
        };
        let donor = (0..boxes.len())
            .filter(|&i| sizes[assign[i]] > 1)
            .max_by(|&i, &j| {
                let di = 1.0 - shape_iou(boxes[i], centers[assign[i]]);
                let dj = 1.0 - shape_iou(boxes[j], centers[assign[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("k <= number of boxes");
        assign[donor] = empty;
    }
}

fn kmeans_pp(boxes: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = boxes.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let centers: Vec<_> = chosen.iter().map(|&i| boxes[i]).collect();
        let weights: Vec<f64> = boxes
            .iter()
            .map(|&b| {
                let d = 1.0 - shape_iou(b, centers[nearest(b, &centers)]);
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while weights[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // Every box coincides with a chosen center; take any unused index.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
    }
    chosen.into_iter().map(|i| boxes[i]).collect()
}

/// Every `k`-subset of the distinct box sizes, when there are at most `limit` of them.
fn subset_seeds(boxes: &[(f64, f64)], k: usize, limit: usize) -> Vec<Vec<(f64, f64)>> {
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &b in boxes {
        if !distinct.contains(&b) {
            distinct.push(b);
        }
    }
    let n = distinct.len();
    if n < k {
        return Vec::new();
    }
    let mut count: u128 = 1;
    for i in 0..k as u128 {
        count = count * (n as u128 - i) / (i + 1);
        if count > limit as u128 {
            return Vec::new();
        }
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| distinct[i]).collect());
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            return out;
        };
        idx[pos] += 1;
        for q in pos + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

fn refine<'a>(boxes: &'a [(f64, f64)], k: usize, centers: &[(f64, f64)], cfg: &KMeansConfig) -> (Partition<'a>, Vec<f64>) {
    let mut part = Partition::new(boxes, assign_all(boxes, centers), k);
    let mut history = vec![part.total()];
    for _ in 0..cfg.max_iter {
        // Lloyd step: reassign to the current means, kept only if it lowers the cost.
        let means: Vec<_> = (0..k).map(|c| part.mean(c)).collect();
        let assign = assign_all(boxes, &means);
        if assign != part.assign {
            let candidate = Partition::new(boxes, assign, k);
            if candidate.total() < part.total() - 1e-12 {
                part = candidate;
                history.push(part.total());
                continue;
            }
        }
        if boxes.len() > REFINE_LIMIT {
            break;
        }
        if let Some((i, to, fc, tc)) = part.best_move() {
            part.apply_move(i, to, fc, tc);
        } else if let Some((i, j, ci, cj)) = (boxes.len() <= SWAP_LIMIT).then(|| part.best_swap()).flatten() {
            part.apply_swap(i, j, ci, cj);
        } else {
            break;
        }
        history.push(part.total());
    }
    (part, history)
}

/// Clusters `(w, h)` box sizes into `k` anchors with `1 - IoU` as the distance.
///
/// Centroids are cluster means. Each run starts from a seeded k-means++ draw (and, on small
/// inputs, from every k-subset of distinct sizes) and alternates
/// Lloyd reassignment with single-box moves, accepting a step only when the mean `1 - IoU`
/// decreases, so the recorded cost history never goes up.
pub fn compute_anchors(boxes: &[(f64, f64)], k: usize, cfg: &KMeansConfig) -> Result<AnchorFit, DetectError> {
    if k == 0 {
        return Err(DetectError::InvalidArgument("k must be at least 1".into()));
    }
    if k > boxes.len() {
        return Err(DetectError::InvalidArgument(format!(
            "k = {k} exceeds the number of boxes ({})",
            boxes.len()
        )));
    }
    if let Some(b) = boxes.iter().find(|b| !(b.0 > 0.0 && b.1 > 0.0 && b.0.is_finite() && b.1.is_finite())) {
        return Err(DetectError::InvalidArgument(format!("box size ({}, {}) must be positive", b.0, b.1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts: Vec<Vec<(f64, f64)>> = (0..cfg.restarts.max(1)).map(|_| kmeans_pp(boxes, k, &mut rng)).collect();
    starts.extend(subset_seeds(boxes, k, SUBSET_SEED_LIMIT));
    let mut best: Option<(Vec<(f64, f64)>, f64, Vec<f64>)> = None;
    for centers in &starts {
        let (part, history) = refine(boxes, k, centers, cfg);
        let cost = part.total();
        if best.as_ref().is_none_or(|b| cost < b.1 - 1e-12) {
            let means = (0..k).map(|c| part.mean(c)).collect();
            best = Some((means, cost, history));
        }
    }
    let (means, cost, history) = best.expect("at least one run");
    let mut anchors: Vec<Anchor> = means.into_iter().map(|(w, h)| Anchor { w, h }).collect();
    anchors.sort_by(|a, b| a.area().total_cmp(&b.area()).then(a.w.total_cmp(&b.w)));
    Ok(AnchorFit {
        anchors,
        cost,
        history,
    })
}

/// Splits area-sorted anchors across strides, finest stride taking the smallest anchors.
pub fn assign_anchors_to_levels(
    anchors: &[Anchor],
    strides: &[u32],
    per_level: usize,
) -> Result<Vec<(u32, Vec<Anchor>)>, DetectError> {
    if anchors.len() != strides.len() * per_level {
        return Err(DetectError::InvalidArgument(format!(
            "{} anchors cannot fill {} levels of {per_level}",
            anchors.len(),
            strides.len()
        )));
    }
    let mut sorted = anchors.to_vec();
    sorted.sort_by(|a, b| a.area().total_cmp(&b.area()));
    let mut levels: Vec<u32> = strides.to_vec();
    levels.sort_unstable();
    Ok(levels
        .into_iter()
        .zip(sorted.chunks(per_level))
        .map(|(s, c)| (s, c.to_vec()))
        .collect())
}

/// Raw detector output for one prediction level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionGrid {
    stride: u32,
    cells_x: u32,
    cells_y: u32,
    anchors: Vec<Anchor>,
    /// `(tx, ty, tw, th, t_obj)` per cell and anchor, in (y, x, anchor, channel) order.
    raw: Vec<f32>,
}

impl DetectionGrid {
    pub fn new(stride: u32, cells_x: u32, cells_y: u32, anchors: Vec<Anchor>, raw: Vec<f32>) -> Result<Self, DetectError> {
        if stride == 0 || cells_x == 0 || cells_y == 0 {
            return Err(DetectError::MalformedGrid("stride and cell counts must be positive".into()));
        }
        if anchors.is_empty() {
            return Err(DetectError::MalformedGrid("grid has no anchors".into()));
        }
        for a in &anchors {
            Anchor::new(a.w, a.h).map_err(|e| DetectError::MalformedGrid(e.to_string()))?;
        }
        let expected = cells_x as usize * cells_y as usize * anchors.len() * 5;
        if raw.len() != expected {
            return Err(DetectError::MalformedGrid(format!(
                "{} raw values, expected {expected}",
                raw.len()
            )));
        }
        Ok(Self {
            stride,
            cells_x,
            cells_y,
            anchors,
            raw,
        })
    }

    /// All-zero raw values.
    pub fn zeros(stride: u32, cells_x: u32, cells_y: u32, anchors: Vec<Anchor>) -> Result<Self, DetectError> {
        let n = cells_x as usize * cells_y as usize * anchors.len() * 5;
        Self::new(stride, cells_x, cells_y, anchors, vec![0.0; n])
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn cells(&self) -> (u32, u32) {
        (self.cells_x, self.cells_y)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn raw(&self) -> &[f32] {
        &self.raw
    }

    pub fn input_size(&self) -> (u32, u32) {
        (self.cells_x * self.stride, self.cells_y * self.stride)
    }

    fn offset(&self, x: u32, y: u32, anchor: usize) -> usize {
        ((y as usize * self.cells_x as usize + x as usize) * self.anchors.len() + anchor) * 5
    }

    pub fn values(&self, x: u32, y: u32, anchor: usize) -> [f32; 5] {
        let o = self.offset(x, y, anchor);
        self.raw[o..o + 5].try_into().unwrap()
    }

    pub fn set_values(&mut self, x: u32, y: u32, anchor: usize, v: [f32; 5]) {
        let o = self.offset(x, y, anchor);
        self.raw[o..o + 5].copy_from_slice(&v);
    }

    /// Little-endian layout: magic, stride, cells_x, cells_y, n_anchors (u32), anchors as
    /// f32 pairs, then raw f32 values.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(GRID_MAGIC)?;
        for v in [self.stride, self.cells_x, self.cells_y, self.anchors.len() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for a in &self.anchors {
            out.write_all(&(a.w as f32).to_le_bytes())?;
            out.write_all(&(a.h as f32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.raw.len() * 4);
        for v in &self.raw {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, DetectError> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| DetectError::MalformedGrid("truncated header".into()))?;
        if &magic != GRID_MAGIC {
            return Err(DetectError::MalformedGrid("bad magic".into()));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |input: &mut R| -> Result<u32, DetectError> {
            input
                .read_exact(&mut word)
                .map_err(|_| DetectError::MalformedGrid("truncated header".into()))?;
            Ok(u32::from_le_bytes(word))
        };
        let stride = next_u32(&mut input)?;
        let cells_x = next_u32(&mut input)?;
        let cells_y = next_u32(&mut input)?;
        let n_anchors = next_u32(&mut input)? as usize;
        if n_anchors > 1024 {
            return Err(DetectError::MalformedGrid(format!("implausible anchor count {n_anchors}")));
        }
        let mut anchors = Vec::with_capacity(n_anchors);
        for _ in 0..n_anchors {
            let w = f32::from_bits(next_u32(&mut input)?);
            let h = f32::from_bits(next_u32(&mut input)?);
            anchors.push(Anchor { w: w as f64, h: h as f64 });
        }
        let mut body = Vec::new();
        input.read_to_end(&mut body)?;
        if body.len() % 4 != 0 {
            return Err(DetectError::MalformedGrid("body is not a whole number of f32 values".into()));
        }
        let raw = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(stride, cells_x, cells_y, anchors, raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Detector,
    Segmentation,
    Fused,
}

/// A scored box. Serialized flat as `{x_min, y_min, x_max, y_max, score, source}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoxF,
    pub score: f64,
    pub source: Source,
}

impl Detection {
    pub fn new(bbox: BoxF, score: f64, source: Source) -> Self {
        Self { bbox, score, source }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.bbox.is_valid() {
            return Err(format!("empty box {:?}", self.bbox));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        Ok(())
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

// Keeps scores strictly inside (0, 1) even when the logistic saturates in f64.
const SCORE_EPS: f64 = 1e-12;

/// Decodes every cell and anchor into a detection in the grid's input coordinates.
///
/// Centers are `(cell + σ(t)) · stride`, sizes are `anchor · exp(t)`, score is `σ(t_obj)`.
/// Boxes are clipped to the input extent and rounded to 0.01 px; entries with non-finite
/// values or an empty clipped box are dropped.
pub fn decode_grid(grid: &DetectionGrid) -> Vec<Detection> {
    let (in_w, in_h) = grid.input_size();
    let s = grid.stride as f64;
    let mut out = Vec::new();
    for y in 0..grid.cells_y {
        for x in 0..grid.cells_x {
            for (a, anchor) in grid.anchors.iter().enumerate() {
                let v = grid.values(x, y, a).map(f64::from);
                if v.iter().any(|t| !t.is_finite()) {
                    continue;
                }
                let [tx, ty, tw, th, tobj] = v;
                let cx = (x as f64 + sigmoid(tx)) * s;
                let cy = (y as f64 + sigmoid(ty)) * s;
                let w = anchor.w * tw.exp();
                let h = anchor.h * th.exp();
                let bbox = BoxF::from_center(cx, cy, w, h)
                    .clip(in_w as f64, in_h as f64)
                    .quantized();
                if !bbox.is_valid() {
                    continue;
                }
                let score = sigmoid(tobj).clamp(SCORE_EPS, 1.0 - SCORE_EPS);
                out.push(Detection::new(bbox, score, Source::Detector));
            }
        }
    }
    out
}

/// Ranking used by NMS: higher score first, then smaller area, then box coordinates.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.area().total_cmp(&b.bbox.area()))
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the best-ranked detection and drops every remaining one whose IoU with it
/// is at least `iou_threshold`. Output is in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(rank_order);
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let keep = order[i];
        kept.push(keep);
        for (j, other) in order.iter().enumerate().skip(i + 1) {
            if !suppressed[j] && keep.bbox.iou(&other.bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

pub fn write_detections_jsonl<W: Write>(mut out: W, dets: &[Detection]) -> std::io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl<R: BufRead>(input: R) -> Result<Vec<Detection>, DetectError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|e| DetectError::MalformedRecord {
            line: n + 1,
            message: e.to_string(),
        })?;
        d.validate()
            .map_err(|message| DetectError::MalformedRecord { line: n + 1, message })?;
        out.push(d);
    }
    Ok(out)
}
