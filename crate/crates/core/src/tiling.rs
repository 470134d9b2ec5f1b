//! Fixed-size windows over large rasters.
//!
//! Origins advance by `tile_size - overlap`; the last row and column are pulled back so the
//! final tile ends exactly on the image edge. Only images smaller than a tile along some axis
//! need padding, and the pad is recorded on the grid.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RasterImage;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TilingError {
    #[error("invalid tiling configuration: {0}")]
    InvalidConfig(String),
    #[error("incomplete mosaic: no tile for origin ({0}, {1})")]
    MissingTile(u32, u32),
    #[error("tile at ({0}, {1}) does not belong to the grid or appears twice")]
    UnexpectedTile(u32, u32),
    #[error("tile at ({x}, {y}) is {width}x{height}x{channels}, expected {expected}x{expected}x{expected_channels}")]
    TileShape {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
        channels: u8,
        expected: u32,
        expected_channels: u8,
    },
}

/// Tile origins over a `width` x `height` image, in row-major order (y outer, x inner).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: u32,
    pub overlap: u32,
    pub width: u32,
    pub height: u32,
    pub origins: Vec<(u32, u32)>,
}

impl TileGrid {
    pub fn stride(&self) -> u32 {
        self.tile_size - self.overlap
    }

    /// Zero columns appended on the right when the image is narrower than one tile.
    pub fn pad_x(&self) -> u32 {
        self.tile_size.saturating_sub(self.width)
    }

    pub fn pad_y(&self) -> u32 {
        self.tile_size.saturating_sub(self.height)
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TilingError> {
        let grid: TileGrid =
            serde_json::from_str(s).map_err(|e| TilingError::InvalidConfig(e.to_string()))?;
        let expected = plan_tiles(grid.width, grid.height, grid.tile_size, grid.overlap)?;
        if expected.origins != grid.origins {
            return Err(TilingError::InvalidConfig(
                "origins do not match the tiling policy for this extent".into(),
            ));
        }
        Ok(grid)
    }
}

fn axis_origins(extent: u32, tile: u32, stride: u32) -> Vec<u32> {
    if extent <= tile {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + tile < extent {
        out.push(pos);
        pos += stride;
    }
    let last = extent - tile;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn plan_tiles(width: u32, height: u32, tile_size: u32, overlap: u32) -> Result<TileGrid, TilingError> {
    if tile_size == 0 {
        return Err(TilingError::InvalidConfig("tile_size must be positive".into()));
    }
    if overlap >= tile_size {
        return Err(TilingError::InvalidConfig(format!(
            "overlap {overlap} must be smaller than tile_size {tile_size}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(TilingError::InvalidConfig("image extent must be positive".into()));
    }
    let stride = tile_size - overlap;
    let xs = axis_origins(width, tile_size, stride);
    let ys = axis_origins(height, tile_size, stride);
    let origins = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    Ok(TileGrid {
        tile_size,
        overlap,
        width,
        height,
        origins,
    })
}

/// Cuts `img` into the grid's tiles, zero-padding where the image is smaller than a tile.
pub fn crop_by_grid(img: &RasterImage, grid: &TileGrid) -> Vec<((u32, u32), RasterImage)> {
    grid.origins
        .par_iter()
        .map(|&(x, y)| ((x, y), img.crop_padded(x, y, grid.tile_size, grid.tile_size)))
        .collect()
}

/// Reassembles tiles into a `width` x `height` mosaic.
///
/// Tiles are written in grid-origin order, so where tiles overlap the later origin wins.
/// Padding beyond the mosaic extent is dropped.
pub fn stitch(
    tiles: &[((u32, u32), RasterImage)],
    grid: &TileGrid,
    width: u32,
    height: u32,
) -> Result<RasterImage, TilingError> {
    let mut by_origin: HashMap<(u32, u32), &RasterImage> = HashMap::with_capacity(tiles.len());
    let wanted: std::collections::HashSet<_> = grid.origins.iter().copied().collect();
    for (origin, tile) in tiles {
        if !wanted.contains(origin) || by_origin.insert(*origin, tile).is_some() {
            return Err(TilingError::UnexpectedTile(origin.0, origin.1));
        }
    }
    let channels = match tiles.first() {
        Some((_, t)) => t.channels(),
        None => {
            let (x, y) = grid.origins.first().copied().unwrap_or((0, 0));
            return Err(TilingError::MissingTile(x, y));
        }
    };
    let ch = channels as usize;
    let mut out = vec![0u8; width as usize * height as usize * ch];
    for &(ox, oy) in &grid.origins {
        let tile = by_origin.get(&(ox, oy)).ok_or(TilingError::MissingTile(ox, oy))?;
        if tile.width() != grid.tile_size || tile.height() != grid.tile_size || tile.channels() != channels {
            return Err(TilingError::TileShape {
                x: ox,
                y: oy,
                width: tile.width(),
                height: tile.height(),
                channels: tile.channels(),
                expected: grid.tile_size,
                expected_channels: channels,
            });
        }
        let x_end = (ox + grid.tile_size).min(width);
        let y_end = (oy + grid.tile_size).min(height);
        if ox >= x_end {
            continue;
        }
        let run = (x_end - ox) as usize * ch;
        let src_data = tile.data();
        for y in oy..y_end {
            let src = (y - oy) as usize * grid.tile_size as usize * ch;
            let dst = (y as usize * width as usize + ox as usize) * ch;
            out[dst..dst + run].copy_from_slice(&src_data[src..src + run]);
        }
    }
    RasterImage::new(width, height, channels, out)
        .map_err(|e| TilingError::InvalidConfig(e.to_string()))
}
