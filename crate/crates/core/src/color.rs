//! HSV conversion and the saturation/value distance used by the flood fill.
//!
//! Vehicles and asphalt are both close to achromatic in pan-sharpened imagery, so hue is
//! unreliable there. Hue is still computed for display, but [`sv_distance`] ignores it.

use serde::{Deserialize, Serialize};

/// Hexcone HSV. `h` in degrees `[0, 360)`, `s` and `v` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsvColor {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl HsvColor {
    /// Builds a color, wrapping hue into `[0, 360)` and clamping `s`, `v` to `[0, 1]`.
    pub fn new(h: f64, s: f64, v: f64) -> Self {
        let h = h.rem_euclid(360.0);
        Self {
            h: if h >= 360.0 { 0.0 } else { h },
            s: s.clamp(0.0, 1.0),
            v: v.clamp(0.0, 1.0),
        }
    }
}

pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> HsvColor {
    rgb_f64_to_hsv(r as f64, g as f64, b as f64)
}

/// Same as [`rgb_to_hsv`] for fractional samples on the 0..=255 scale (e.g. neighborhood means).
pub fn rgb_f64_to_hsv(r: f64, g: f64, b: f64) -> HsvColor {
    let (r, g, b) = (r / 255.0, g / 255.0, b / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    HsvColor::new(h, s, v)
}

/// Inverse of [`rgb_to_hsv`], rounding to the nearest byte.
pub fn hsv_to_rgb(c: HsvColor) -> [u8; 3] {
    let chroma = c.v * c.s;
    let hp = c.h / 60.0;
    let x = chroma * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = c.v - chroma;
    let to_byte = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_byte(r1), to_byte(g1), to_byte(b1)]
}

/// Euclidean distance over `(s, v)`; hue is ignored.
pub fn sv_distance(a: HsvColor, b: HsvColor) -> f64 {
    (a.s - b.s).hypot(a.v - b.v)
}
