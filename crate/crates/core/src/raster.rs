//! In-memory rasters and lossless PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, LumaA};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid raster dimensions {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("unsupported channel count {0} (expected 1, 3 or 4)")]
    UnsupportedChannels(u8),
    #[error("sample buffer has {actual} bytes, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unsupported PNG layout: {0}")]
    UnsupportedPng(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Row-major 8-bit raster with 1, 3 or 4 interleaved channels.
///
/// Immutable once built; share it behind an `Arc` when several workers need it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions { width, height });
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(RasterError::UnsupportedChannels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(RasterError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// A zero-filled raster.
    pub fn blank(width: u32, height: u32, channels: u8) -> Result<Self, RasterError> {
        let len = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![0; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    /// Samples of one pixel. Panics when `(x, y)` is outside the raster.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of bounds");
        let o = self.offset(x, y);
        &self.data[o..o + self.channels as usize]
    }

    /// The pixel as RGB. Gray rasters replicate the single sample; a fourth channel is ignored.
    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let p = self.pixel(x, y);
        match self.channels {
            1 => [p[0], p[0], p[0]],
            _ => [p[0], p[1], p[2]],
        }
    }

    /// Copies a `width` x `height` window whose top-left corner is `(x0, y0)`.
    /// Parts of the window outside the raster are zero-filled.
    pub fn crop_padded(&self, x0: u32, y0: u32, width: u32, height: u32) -> RasterImage {
        let ch = self.channels as usize;
        let mut out = vec![0u8; width as usize * height as usize * ch];
        let x_end = (x0 + width).min(self.width);
        let y_end = (y0 + height).min(self.height);
        if x0 < x_end {
            let run = (x_end - x0) as usize * ch;
            for y in y0..y_end {
                let src = self.offset(x0, y);
                let dst = ((y - y0) as usize * width as usize) * ch;
                out[dst..dst + run].copy_from_slice(&self.data[src..src + run]);
            }
        }
        RasterImage {
            width,
            height,
            channels: self.channels,
            data: out,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let img = image::open(path)?;
        Self::from_dynamic(img)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: image::DynamicImage) -> Result<Self, RasterError> {
        use image::DynamicImage as D;
        let (w, h) = (img.width(), img.height());
        match img {
            D::ImageLuma8(b) => Self::new(w, h, 1, b.into_raw()),
            D::ImageRgb8(b) => Self::new(w, h, 3, b.into_raw()),
            D::ImageRgba8(b) => Self::new(w, h, 4, b.into_raw()),
            D::ImageLumaA8(_) => Self::new(w, h, 4, img.to_rgba8().into_raw()),
            other => Err(RasterError::UnsupportedPng(format!(
                "{:?} (8-bit gray, RGB or RGBA expected)",
                other.color()
            ))),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        self.to_dynamic().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    fn to_dynamic(&self) -> image::DynamicImage {
        use image::DynamicImage as D;
        let (w, h, d) = (self.width, self.height, self.data.clone());
        // Lengths were validated at construction.
        match self.channels {
            1 => D::ImageLuma8(ImageBuffer::from_raw(w, h, d).unwrap()),
            3 => D::ImageRgb8(ImageBuffer::from_raw(w, h, d).unwrap()),
            _ => D::ImageRgba8(ImageBuffer::from_raw(w, h, d).unwrap()),
        }
    }
}

/// Foreground/background raster, e.g. a thresholded segmentation output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(RasterError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Nonzero first-channel samples are foreground.
    pub fn from_raster(img: &RasterImage) -> Self {
        let ch = img.channels() as usize;
        Self {
            width: img.width(),
            height: img.height(),
            data: img.data().chunks_exact(ch).map(|p| p[0] != 0).collect(),
        }
    }

    /// Foreground as 255, background as 0, single channel.
    pub fn to_raster(&self) -> RasterImage {
        let data = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let img = image::open(path)?;
        let (w, h) = (img.width(), img.height());
        // Accept 16-bit id masks as well as 8-bit binary renders.
        let data = match img {
            image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v != 0).collect(),
            other => other.to_luma8().into_raw().into_iter().map(|v| v != 0).collect(),
        };
        Self::from_vec(w, h, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        self.to_raster().save_png(path)
    }
}

/// Writes a single-channel 16-bit PNG.
pub fn save_gray16_png(
    path: impl AsRef<Path>,
    width: u32,
    height: u32,
    samples: Vec<u16>,
) -> Result<(), RasterError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width, height, samples)
        .ok_or_else(|| RasterError::UnsupportedPng("16-bit sample count mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn encode_gray16_png(width: u32, height: u32, samples: Vec<u16>) -> Result<Vec<u8>, RasterError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width, height, samples)
        .ok_or_else(|| RasterError::UnsupportedPng("16-bit sample count mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Reads a single-channel 16-bit PNG as `(width, height, samples)`.
pub fn load_gray16_png(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<u16>), RasterError> {
    decode_gray16(image::open(path)?)
}

pub fn decode_gray16_png(bytes: &[u8]) -> Result<(u32, u32, Vec<u16>), RasterError> {
    decode_gray16(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?)
}

fn decode_gray16(img: image::DynamicImage) -> Result<(u32, u32, Vec<u16>), RasterError> {
    let (w, h) = (img.width(), img.height());
    match img {
        image::DynamicImage::ImageLuma16(b) => Ok((w, h, b.into_raw())),
        other => Err(RasterError::UnsupportedPng(format!(
            "{:?} (16-bit gray expected)",
            other.color()
        ))),
    }
}

/// Writes a two-channel 16-bit PNG from interleaved `(first, second)` samples.
pub fn save_gray_alpha16_png(
    path: impl AsRef<Path>,
    width: u32,
    height: u32,
    samples: Vec<u16>,
) -> Result<(), RasterError> {
    let buf: ImageBuffer<LumaA<u16>, Vec<u16>> = ImageBuffer::from_raw(width, height, samples)
        .ok_or_else(|| RasterError::UnsupportedPng("16-bit sample count mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_gray_alpha16_png(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<u16>), RasterError> {
    let img = image::open(path)?;
    let (w, h) = (img.width(), img.height());
    match img {
        image::DynamicImage::ImageLumaA16(b) => Ok((w, h, b.into_raw())),
        other => Err(RasterError::UnsupportedPng(format!(
            "{:?} (16-bit gray+alpha expected)",
            other.color()
        ))),
    }
}
