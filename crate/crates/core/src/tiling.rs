//! Overlapping square tiles for whole-image inference and the inverse
//! stitching step.
//!
//! Overlapping predictions are merged by a uniform average over covering
//! tiles, so the blend weight of a tile at a pixel is `1 / coverage`.

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, ImageGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct TileLayout {
    tile: usize,
    height: usize,
    width: usize,
    padded_height: usize,
    padded_width: usize,
    pad_top: usize,
    pad_left: usize,
    row_anchors: Vec<usize>,
    col_anchors: Vec<usize>,
    coverage: Vec<u32>,
}

/// Anchors along one axis of length `side` (already padded to `>= tile`).
pub fn axis_anchors(side: usize, tile: usize, min_overlap: usize) -> Vec<usize> {
    debug_assert!(side >= tile && min_overlap < tile);
    if side == tile {
        return vec![0];
    }
    let span = side - tile;
    let max_stride = tile - min_overlap;
    let n = span.div_ceil(max_stride) + 1;
    (0..n).map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize).collect()
}

/// Plans tiles of side `tile` covering `img` with at least `min_overlap`
/// pixels between neighbours.
pub fn tile_image(img: &ImageGrid, tile: usize, min_overlap: usize) -> Result<TileLayout> {
    TileLayout::new(img.height(), img.width(), tile, min_overlap)
}

impl TileLayout {
    pub fn new(height: usize, width: usize, tile: usize, min_overlap: usize) -> Result<Self> {
        if tile == 0 || min_overlap >= tile {
            return Err(Error::Config(format!("tile size {tile} must exceed min overlap {min_overlap}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("cannot tile an empty image".into()));
        }
        let padded_height = height.max(tile);
        let padded_width = width.max(tile);
        let pad_top = (padded_height - height) / 2;
        let pad_left = (padded_width - width) / 2;
        let row_anchors = axis_anchors(padded_height, tile, min_overlap);
        let col_anchors = axis_anchors(padded_width, tile, min_overlap);

        let mut coverage = vec![0u32; padded_height * padded_width];
        for &r0 in &row_anchors {
            for &c0 in &col_anchors {
                for r in r0..r0 + tile {
                    for c in c0..c0 + tile {
                        coverage[r * padded_width + c] += 1;
                    }
                }
            }
        }
        Ok(Self {
            tile,
            height,
            width,
            padded_height,
            padded_width,
            pad_top,
            pad_left,
            row_anchors,
            col_anchors,
            coverage,
        })
    }

    pub fn tile_size(&self) -> usize {
        self.tile
    }

    pub fn row_anchors(&self) -> &[usize] {
        &self.row_anchors
    }

    pub fn col_anchors(&self) -> &[usize] {
        &self.col_anchors
    }

    /// Top-left anchors of all tiles in row-major order, in padded coordinates.
    pub fn anchors(&self) -> Vec<(usize, usize)> {
        self.row_anchors.iter().flat_map(|&r| self.col_anchors.iter().map(move |&c| (r, c))).collect()
    }

    pub fn tile_count(&self) -> usize {
        self.row_anchors.len() * self.col_anchors.len()
    }

    /// `(top, left)` zero padding added to reach the tile size.
    pub fn padding(&self) -> (usize, usize) {
        (self.pad_top, self.pad_left)
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.padded_height, self.padded_width)
    }

    /// Blend weight of tile `t` at padded pixel `(r, c)`; zero outside the tile.
    pub fn weight(&self, t: usize, r: usize, c: usize) -> f64 {
        let ncols = self.col_anchors.len();
        let (r0, c0) = (self.row_anchors[t / ncols], self.col_anchors[t % ncols]);
        if r < r0 || c < c0 || r >= r0 + self.tile || c >= c0 + self.tile {
            return 0.0;
        }
        1.0 / self.coverage[r * self.padded_width + c] as f64
    }

    /// Cuts the (zero padded) image into tiles following the layout.
    pub fn extract(&self, img: &ImageGrid) -> Result<Vec<ImageGrid>> {
        if img.height() != self.height || img.width() != self.width {
            return Err(Error::Shape("image does not match tile layout".into()));
        }
        let mut padded = vec![0.0f32; self.padded_height * self.padded_width];
        for r in 0..self.height {
            let dst = (r + self.pad_top) * self.padded_width + self.pad_left;
            padded[dst..dst + self.width].copy_from_slice(&img.values()[r * self.width..(r + 1) * self.width]);
        }
        self.anchors()
            .into_iter()
            .map(|(r0, c0)| {
                let mut v = Vec::with_capacity(self.tile * self.tile);
                for r in r0..r0 + self.tile {
                    let s = r * self.padded_width + c0;
                    v.extend_from_slice(&padded[s..s + self.tile]);
                }
                ImageGrid::new(self.tile, self.tile, v)
            })
            .collect()
    }

    /// Cuts a full-size feature map into tiles (used to verify stitching).
    pub fn extract_features(&self, z: &FeatureMap) -> Result<Vec<FeatureMap>> {
        z.check_dims(self.height, self.width)?;
        let mut out = Vec::with_capacity(self.tile_count());
        for (r0, c0) in self.anchors() {
            let mut t = FeatureMap::zeros(self.tile, self.tile);
            for ch in 0..FeatureMap::CHANNELS {
                let src = z.channel(ch);
                let dst = t.channel_mut(ch);
                for r in 0..self.tile {
                    for c in 0..self.tile {
                        let (pr, pc) = (r0 + r, c0 + c);
                        let inside = pr >= self.pad_top
                            && pc >= self.pad_left
                            && pr - self.pad_top < self.height
                            && pc - self.pad_left < self.width;
                        if inside {
                            dst[r * self.tile + c] = src[(pr - self.pad_top) * self.width + pc - self.pad_left];
                        }
                    }
                }
            }
            out.push(t);
        }
        Ok(out)
    }
}

/// Merges per-tile predictions back into a full-size feature map.
pub fn stitch(tiles: &[FeatureMap], layout: &TileLayout) -> Result<FeatureMap> {
    if tiles.len() != layout.tile_count() {
        return Err(Error::Shape(format!("layout has {} tiles, got {}", layout.tile_count(), tiles.len())));
    }
    let (ph, pw) = layout.padded_dims();
    let mut acc = vec![0.0f64; 3 * ph * pw];
    for (tile, (r0, c0)) in tiles.iter().zip(layout.anchors()) {
        tile.check_dims(layout.tile, layout.tile)?;
        for ch in 0..FeatureMap::CHANNELS {
            let src = tile.channel(ch);
            for r in 0..layout.tile {
                for c in 0..layout.tile {
                    let p = (r0 + r) * pw + c0 + c;
                    acc[ch * ph * pw + p] += src[r * layout.tile + c] / layout.coverage[p] as f64;
                }
            }
        }
    }
    let (h, w) = (layout.height, layout.width);
    let mut out = Vec::with_capacity(3 * h * w);
    for ch in 0..FeatureMap::CHANNELS {
        for r in 0..h {
            let s = ch * ph * pw + (r + layout.pad_top) * pw + layout.pad_left;
            out.extend_from_slice(&acc[s..s + w]);
        }
    }
    FeatureMap::from_planar(h, w, out)
}
