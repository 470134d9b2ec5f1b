//! Semi-automatic vehicle labeling.
//!
//! An [`AnnotationSession`] pairs an image with an [`InstanceMask`]. The annotator first picks
//! the local road color, then clicks vehicles: each click grows a region from the seed over
//! 8-connected pixels whose (S, V) color is close to the seed and far enough from the road.
//! Vehicles the fill cannot isolate are painted with line or freehand strokes. Every click
//! produces a new instance id, so touching vehicles stay separable and each one gets its own
//! bounding box on export.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{rgb_f64_to_hsv, rgb_to_hsv, sv_distance, HsvColor};
use crate::geometry::PixelBox;
use crate::raster::{self, RasterError, RasterImage};

pub const DEFAULT_FILL_TOLERANCE: f64 = 0.15;
pub const DEFAULT_ROAD_MARGIN: f64 = 0.10;
pub const DEFAULT_UNDO_DEPTH: usize = 64;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("pixel ({x}, {y}) is outside the {width}x{height} image")]
    OutOfBounds { x: i64, y: i64, width: u32, height: u32 },
    #[error("road color is not set; pick the road color before flood filling")]
    RoadColorUnset,
    #[error("seed ({x}, {y}) already belongs to instance {id}")]
    SeedLabeled { x: u32, y: u32, id: u32 },
    #[error("invalid stroke: {0}")]
    InvalidStroke(String),
    #[error("stroke covers no unlabeled pixel")]
    NothingToLabel,
    #[error("instance {0} not found")]
    UnknownInstance(u32),
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("mask dimensions {0}x{1} do not match the image")]
    DimensionMismatch(u32, u32),
    #[error("instance id {0} does not fit a 16-bit export")]
    IdOverflow(u32),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed box record: {0}")]
    BoxRecord(String),
}

/// Per-pixel instance ids: 0 is background, every vehicle has its own positive id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    width: u32,
    height: u32,
    labels: Vec<u32>,
    next_id: u32,
}

impl InstanceMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width as usize * height as usize],
            next_id: 1,
        }
    }

    /// Wraps an existing id grid. `next_id` continues after the largest id present.
    pub fn from_labels(width: u32, height: u32, labels: Vec<u32>) -> Result<Self, AnnotateError> {
        if labels.len() != width as usize * height as usize {
            return Err(AnnotateError::DimensionMismatch(width, height));
        }
        let next_id = labels.iter().copied().max().unwrap_or(0) + 1;
        Ok(Self {
            width,
            height,
            labels,
            next_id,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    /// Restores a persisted counter; it never moves below the ids in use.
    pub fn set_next_id(&mut self, next_id: u32) {
        let floor = self.labels.iter().copied().max().unwrap_or(0) + 1;
        self.next_id = next_id.max(floor);
    }

    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.labels[self.index(x, y)]
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn contains_id(&self, id: u32) -> bool {
        id != 0 && self.labels.contains(&id)
    }

    pub fn pixel_count(&self, id: u32) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    /// 16-bit id render for lossless export.
    pub fn to_u16(&self) -> Result<Vec<u16>, AnnotateError> {
        self.labels
            .iter()
            .map(|&l| u16::try_from(l).map_err(|_| AnnotateError::IdOverflow(l)))
            .collect()
    }

    pub fn save_ids_png(&self, path: impl AsRef<Path>) -> Result<(), AnnotateError> {
        raster::save_gray16_png(path, self.width, self.height, self.to_u16()?)?;
        Ok(())
    }

    pub fn ids_png_bytes(&self) -> Result<Vec<u8>, AnnotateError> {
        Ok(raster::encode_gray16_png(self.width, self.height, self.to_u16()?)?)
    }

    pub fn load_ids_png(path: impl AsRef<Path>) -> Result<Self, AnnotateError> {
        let (w, h, ids) = raster::load_gray16_png(path)?;
        Self::from_labels(w, h, ids.into_iter().map(u32::from).collect())
    }

    /// RGB render with [`palette_color`]; background is black.
    pub fn to_palette_raster(&self) -> RasterImage {
        let mut data = Vec::with_capacity(self.labels.len() * 3);
        for &l in &self.labels {
            data.extend_from_slice(&palette_color(l));
        }
        RasterImage::new(self.width, self.height, 3, data).expect("palette render has valid shape")
    }
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Display color for an instance id. Ids cycle through a fixed palette, so consecutive ids
/// (the usual case for two glued vehicles) never share a color.
pub fn palette_color(id: u32) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    PALETTE[((id - 1) as usize) % PALETTE.len()]
}

/// Tight box per instance, ordered by id.
pub fn extract_boxes(mask: &InstanceMask) -> Vec<(u32, PixelBox)> {
    let mut bounds: BTreeMap<u32, (u32, u32, u32, u32)> = BTreeMap::new();
    for y in 0..mask.height {
        let row = &mask.labels[y as usize * mask.width as usize..][..mask.width as usize];
        for (x, &id) in row.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let x = x as u32;
            let e = bounds.entry(id).or_insert((x, y, x, y));
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
        }
    }
    bounds
        .into_iter()
        .map(|(id, (x0, y0, x1, y1))| {
            (id, PixelBox::new(x0, y0, x1 + 1, y1 + 1).expect("non-empty instance"))
        })
        .collect()
}

/// One line of the box export: `{id, x_min, y_min, x_max, y_max}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub id: u32,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoxRecord {
    pub fn new(id: u32, b: PixelBox) -> Self {
        Self {
            id,
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }

    pub fn bounds(&self) -> Result<PixelBox, AnnotateError> {
        PixelBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
            .map_err(|e| AnnotateError::BoxRecord(e.to_string()))
    }
}

pub fn write_boxes_jsonl<W: Write>(mut out: W, boxes: &[(u32, PixelBox)]) -> std::io::Result<()> {
    for &(id, b) in boxes {
        serde_json::to_writer(&mut out, &BoxRecord::new(id, b))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn boxes_to_jsonl(boxes: &[(u32, PixelBox)]) -> String {
    let mut buf = Vec::new();
    write_boxes_jsonl(&mut buf, boxes).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

/// Reads box records, skipping blank lines.
pub fn read_boxes_jsonl<R: BufRead>(input: R) -> Result<Vec<(u32, PixelBox)>, AnnotateError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(&line)
            .map_err(|e| AnnotateError::BoxRecord(format!("line {}: {e}", n + 1)))?;
        out.push((rec.id, rec.bounds()?));
    }
    Ok(out)
}

/// Visit order for region growing. The accepted set does not depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Traversal {
    BreadthFirst,
    DepthFirst,
}

/// Thresholds for the fill predicate, both in unit (S, V) space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillSettings {
    pub fill_tolerance: f64,
    pub road_margin: f64,
}

impl Default for FillSettings {
    fn default() -> Self {
        Self {
            fill_tolerance: DEFAULT_FILL_TOLERANCE,
            road_margin: DEFAULT_ROAD_MARGIN,
        }
    }
}

impl FillSettings {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        for (name, v) in [("fill_tolerance", self.fill_tolerance), ("road_margin", self.road_margin)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(AnnotateError::InvalidSetting(format!("{name} = {v} is outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Grows a region from `seed` over unlabeled 8-neighbours.
///
/// A pixel joins iff its (S, V) distance to the seed color is at most `fill_tolerance` and
/// its distance to `road` is at least `road_margin`. The seed always joins. Returns sorted
/// row-major pixel indices.
pub fn flood_region(
    image: &RasterImage,
    labels: &[u32],
    seed: (u32, u32),
    road: HsvColor,
    settings: FillSettings,
    traversal: Traversal,
) -> Vec<usize> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let seed_color = {
        let [r, g, b] = image.rgb(seed.0, seed.1);
        rgb_to_hsv(r, g, b)
    };
    let accepts = |x: u32, y: u32| {
        let [r, g, b] = image.rgb(x, y);
        let c = rgb_to_hsv(r, g, b);
        sv_distance(c, seed_color) <= settings.fill_tolerance && sv_distance(c, road) >= settings.road_margin
    };

    let mut visited = vec![false; labels.len()];
    let seed_idx = (seed.1 as i64 * w + seed.0 as i64) as usize;
    visited[seed_idx] = true;
    let mut region = vec![seed_idx];
    let mut frontier = VecDeque::from([seed]);
    loop {
        let next = match traversal {
            Traversal::BreadthFirst => frontier.pop_front(),
            Traversal::DepthFirst => frontier.pop_back(),
        };
        let Some((cx, cy)) = next else { break };
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let idx = (ny * w + nx) as usize;
                if visited[idx] {
                    continue;
                }
                visited[idx] = true;
                if labels[idx] == 0 && accepts(nx as u32, ny as u32) {
                    region.push(idx);
                    frontier.push_back((nx as u32, ny as u32));
                }
            }
        }
    }
    region.sort_unstable();
    region
}

/// Bresenham rasterization of a segment, endpoints included.
pub fn line_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrokeKind {
    StraightLine,
    Freehand,
}

/// A manual stroke: one segment, or a polyline, stamped with an L2 disc of `brush_radius`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stroke {
    pub kind: StrokeKind,
    pub points: Vec<(u32, u32)>,
    pub brush_radius: u32,
}

impl Stroke {
    pub fn straight(a: (u32, u32), b: (u32, u32), brush_radius: u32) -> Self {
        Self {
            kind: StrokeKind::StraightLine,
            points: vec![a, b],
            brush_radius,
        }
    }

    pub fn freehand(points: Vec<(u32, u32)>, brush_radius: u32) -> Self {
        Self {
            kind: StrokeKind::Freehand,
            points,
            brush_radius,
        }
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.points.is_empty() {
            return Err(AnnotateError::InvalidStroke("stroke has no points".into()));
        }
        if self.kind == StrokeKind::StraightLine && self.points.len() != 2 {
            return Err(AnnotateError::InvalidStroke(format!(
                "straight line needs exactly 2 points, got {}",
                self.points.len()
            )));
        }
        Ok(())
    }

    /// Pixels covered by the stroke, clipped to `width` x `height`, sorted row-major.
    pub fn rasterize(&self, width: u32, height: u32) -> Vec<(u32, u32)> {
        let r = self.brush_radius as i64;
        let disc: Vec<(i64, i64)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let pts: Vec<(i64, i64)> = self.points.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
        let mut centers = vec![pts[0]];
        for pair in pts.windows(2) {
            centers.extend(line_pixels(pair[0], pair[1]).into_iter().skip(1));
        }
        let mut covered = std::collections::BTreeSet::new();
        for (cx, cy) in centers {
            for (dx, dy) in &disc {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && x < width as i64 && y < height as i64 {
                    covered.insert((y as u32, x as u32));
                }
            }
        }
        covered.into_iter().map(|(y, x)| (x, y)).collect()
    }
}

/// Pixels newly assigned to one instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Labeled {
    pub instance_id: u32,
    pub pixels: Vec<(u32, u32)>,
    pub bounds: PixelBox,
}

#[derive(Clone, Debug)]
struct MaskDelta {
    // (index, before, after)
    changes: Vec<(usize, u32, u32)>,
    next_id_before: u32,
    next_id_after: u32,
}

/// One image being labeled. Mutations are not synchronized; callers serialize them.
#[derive(Clone, Debug)]
pub struct AnnotationSession {
    image: Arc<RasterImage>,
    mask: InstanceMask,
    road_color: Option<HsvColor>,
    settings: FillSettings,
    undo: VecDeque<MaskDelta>,
    redo: Vec<MaskDelta>,
    undo_depth: usize,
}

impl AnnotationSession {
    pub fn new(image: Arc<RasterImage>) -> Self {
        let mask = InstanceMask::new(image.width(), image.height());
        Self {
            image,
            mask,
            road_color: None,
            settings: FillSettings::default(),
            undo: VecDeque::new(),
            redo: Vec::new(),
            undo_depth: DEFAULT_UNDO_DEPTH,
        }
    }

    /// Resumes from a stored mask. Undo history starts empty.
    pub fn with_mask(image: Arc<RasterImage>, mask: InstanceMask) -> Result<Self, AnnotateError> {
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(AnnotateError::DimensionMismatch(mask.width(), mask.height()));
        }
        let mut s = Self::new(image);
        s.mask = mask;
        Ok(s)
    }

    pub fn with_settings(mut self, settings: FillSettings) -> Result<Self, AnnotateError> {
        self.set_settings(settings)?;
        Ok(self)
    }

    pub fn with_undo_depth(mut self, depth: usize) -> Self {
        self.undo_depth = depth;
        self
    }

    pub fn image(&self) -> &Arc<RasterImage> {
        &self.image
    }

    pub fn mask(&self) -> &InstanceMask {
        &self.mask
    }

    pub fn road_color(&self) -> Option<HsvColor> {
        self.road_color
    }

    pub fn set_road_hsv(&mut self, color: Option<HsvColor>) {
        self.road_color = color;
    }

    pub fn settings(&self) -> FillSettings {
        self.settings
    }

    pub fn set_settings(&mut self, settings: FillSettings) -> Result<(), AnnotateError> {
        settings.validate()?;
        self.settings = settings;
        Ok(())
    }

    pub fn undo_len(&self) -> usize {
        self.undo.len()
    }

    fn check_bounds(&self, x: i64, y: i64) -> Result<(u32, u32), AnnotateError> {
        if self.image.contains(x, y) {
            Ok((x as u32, y as u32))
        } else {
            Err(AnnotateError::OutOfBounds {
                x,
                y,
                width: self.image.width(),
                height: self.image.height(),
            })
        }
    }

    /// Sets the road color to the HSV of the mean RGB over the in-bounds 3x3 window.
    pub fn set_road_color(&mut self, x: i64, y: i64) -> Result<HsvColor, AnnotateError> {
        let (cx, cy) = self.check_bounds(x, y)?;
        let mut sum = [0u32; 3];
        let mut n = 0u32;
        for ny in cy.saturating_sub(1)..=(cy + 1).min(self.image.height() - 1) {
            for nx in cx.saturating_sub(1)..=(cx + 1).min(self.image.width() - 1) {
                let p = self.image.rgb(nx, ny);
                for c in 0..3 {
                    sum[c] += p[c] as u32;
                }
                n += 1;
            }
        }
        let mean = |c: usize| sum[c] as f64 / n as f64;
        let color = rgb_f64_to_hsv(mean(0), mean(1), mean(2));
        self.road_color = Some(color);
        Ok(color)
    }

    pub fn flood_fill(&mut self, x: i64, y: i64) -> Result<Labeled, AnnotateError> {
        let road = self.road_color.ok_or(AnnotateError::RoadColorUnset)?;
        let (sx, sy) = self.check_bounds(x, y)?;
        let existing = self.mask.get(sx, sy);
        if existing != 0 {
            return Err(AnnotateError::SeedLabeled {
                x: sx,
                y: sy,
                id: existing,
            });
        }
        let region = flood_region(
            &self.image,
            &self.mask.labels,
            (sx, sy),
            road,
            self.settings,
            Traversal::BreadthFirst,
        );
        Ok(self.label_indices(region))
    }

    pub fn apply_stroke(&mut self, stroke: &Stroke) -> Result<Labeled, AnnotateError> {
        stroke.validate()?;
        for &(x, y) in &stroke.points {
            self.check_bounds(x as i64, y as i64)?;
        }
        let w = self.mask.width as usize;
        let fresh: Vec<usize> = stroke
            .rasterize(self.mask.width, self.mask.height)
            .into_iter()
            .map(|(x, y)| y as usize * w + x as usize)
            .filter(|&i| self.mask.labels[i] == 0)
            .collect();
        if fresh.is_empty() {
            return Err(AnnotateError::NothingToLabel);
        }
        Ok(self.label_indices(fresh))
    }

    /// Assigns a fresh id to background pixels at `indices` (sorted) and records the delta.
    fn label_indices(&mut self, indices: Vec<usize>) -> Labeled {
        let id = self.mask.next_id;
        let w = self.mask.width;
        let mut changes = Vec::with_capacity(indices.len());
        let mut pixels = Vec::with_capacity(indices.len());
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for i in indices {
            changes.push((i, self.mask.labels[i], id));
            self.mask.labels[i] = id;
            let (x, y) = ((i % w as usize) as u32, (i / w as usize) as u32);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            pixels.push((x, y));
        }
        self.mask.next_id += 1;
        self.push_delta(MaskDelta {
            changes,
            next_id_before: id,
            next_id_after: id + 1,
        });
        Labeled {
            instance_id: id,
            pixels,
            bounds: PixelBox::new(x0, y0, x1 + 1, y1 + 1).expect("at least one pixel"),
        }
    }

    /// Clears an instance; returns the number of pixels reset to background.
    pub fn erase_instance(&mut self, id: u32) -> Result<usize, AnnotateError> {
        if !self.mask.contains_id(id) {
            return Err(AnnotateError::UnknownInstance(id));
        }
        let mut changes = Vec::new();
        for (i, l) in self.mask.labels.iter_mut().enumerate() {
            if *l == id {
                changes.push((i, id, 0));
                *l = 0;
            }
        }
        let n = changes.len();
        let next = self.mask.next_id;
        self.push_delta(MaskDelta {
            changes,
            next_id_before: next,
            next_id_after: next,
        });
        Ok(n)
    }

    fn push_delta(&mut self, delta: MaskDelta) {
        self.redo.clear();
        self.undo.push_back(delta);
        while self.undo.len() > self.undo_depth {
            self.undo.pop_front();
        }
    }

    /// Reverts the latest mutation. Returns false when there is nothing to undo.
    pub fn undo(&mut self) -> bool {
        let Some(delta) = self.undo.pop_back() else {
            return false;
        };
        for &(i, before, _) in delta.changes.iter().rev() {
            self.mask.labels[i] = before;
        }
        self.mask.next_id = delta.next_id_before;
        self.redo.push(delta);
        true
    }

    pub fn redo(&mut self) -> bool {
        let Some(delta) = self.redo.pop() else {
            return false;
        };
        for &(i, _, after) in &delta.changes {
            self.mask.labels[i] = after;
        }
        self.mask.next_id = delta.next_id_after;
        self.undo.push_back(delta);
        true
    }

    pub fn boxes(&self) -> Vec<(u32, PixelBox)> {
        extract_boxes(&self.mask)
    }
}
