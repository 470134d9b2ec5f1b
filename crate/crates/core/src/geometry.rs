//! Axis-aligned boxes and intersection-over-union.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}): min must be strictly below max")]
pub struct InvalidBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Integer pixel box, min inclusive and max exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawPixelBox")]
pub struct PixelBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

#[derive(Deserialize)]
struct RawPixelBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl TryFrom<RawPixelBox> for PixelBox {
    type Error = InvalidBox;

    fn try_from(r: RawPixelBox) -> Result<Self, InvalidBox> {
        PixelBox::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

impl PixelBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, InvalidBox> {
        if x_min >= x_max || y_min >= y_max {
            return Err(InvalidBox {
                x_min: x_min as f64,
                y_min: y_min as f64,
                x_max: x_max as f64,
                y_max: y_max as f64,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn intersection_area(&self, other: &PixelBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w as u64 * h as u64
    }

    /// IoU from exact integer areas.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn to_f64(&self) -> BoxF {
        BoxF {
            x_min: self.x_min as f64,
            y_min: self.y_min as f64,
            x_max: self.x_max as f64,
            y_max: self.y_max as f64,
        }
    }
}

/// Continuous box in pixel coordinates, used for detections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxF {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, InvalidBox> {
        // NaN fails both comparisons, so it is rejected as well.
        if !(x_min < x_max && y_min < y_max) {
            return Err(InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    /// Rounds every coordinate to 0.01 px.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| (v * 100.0).round() / 100.0;
        Self {
            x_min: q(self.x_min),
            y_min: q(self.y_min),
            x_max: q(self.x_max),
            y_max: q(self.y_max),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn iou(&self, other: &BoxF) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        inter / union
    }
}

impl From<PixelBox> for BoxF {
    fn from(b: PixelBox) -> Self {
        b.to_f64()
    }
}

/// Intersection over union of two valid boxes: 0 when disjoint, 1 when identical.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = PixelBox::new(0, 0, 4, 4).unwrap();
        let b = PixelBox::new(2, 0, 6, 4).unwrap();
        let c = PixelBox::new(10, 10, 12, 12).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&c), 0.0);
        // 8 shared pixels out of 24 in the union.
        assert_eq!(a.iou(&b), 8.0 / 24.0);
        assert_eq!(a.to_f64().iou(&b.to_f64()), 8.0 / 24.0);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        let a = BoxF::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoxF::new(2.0, 0.0, 4.0, 2.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn rejects_empty_boxes() {
        assert!(PixelBox::new(3, 0, 3, 1).is_err());
        assert!(BoxF::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(BoxF::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<PixelBox>(r#"{"x_min":5,"y_min":0,"x_max":2,"y_max":1}"#).is_err());
    }

    #[test]
    fn quantize_and_clip() {
        let b = BoxF::new(-1.234, 2.346, 10.006, 4.0).unwrap().clip(8.0, 8.0).quantized();
        assert_eq!(b, BoxF::new(0.0, 2.35, 8.0, 4.0).unwrap());
    }
}
