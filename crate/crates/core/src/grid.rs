//! Dense 2-D containers shared by every stage of the pipeline.
//!
//! All grids are stored row-major; pixel `(row, col)` lives at index
//! `row * width + col`.

use crate::error::{Error, Result};

/// Single-channel intensity image, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image values must be finite".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.width + col] = v;
    }
}

/// Instance label image: `0` is background, `1..=N` are cell instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

/// Inclusive pixel bounding box of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn diagonal(&self) -> f64 {
        ((self.height() * self.height() + self.width() * self.width()) as f64).sqrt()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.row_min + self.row_max) as f64 / 2.0, (self.col_min + self.col_max) as f64 / 2.0)
    }
}

impl LabelMask {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask must be non-empty, got {height}x{width}")));
        }
        if ids.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} ids for {height}x{width}, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, ids: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, id: u32) {
        self.ids[row * self.width + col] = id;
    }

    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per id, indexed by id (entry 0 counts background).
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.max_id() as usize + 1];
        for &id in &self.ids {
            counts[id as usize] += 1;
        }
        counts
    }

    /// Number of distinct nonzero ids.
    pub fn instance_count(&self) -> usize {
        self.counts().iter().skip(1).filter(|&&c| c > 0).count()
    }

    pub fn contains(&self, id: u32) -> bool {
        id != 0 && self.ids.contains(&id)
    }

    /// Row-major pixel indices of one instance.
    pub fn pixels_of(&self, id: u32) -> Vec<usize> {
        self.ids.iter().enumerate().filter_map(|(i, &v)| (v == id).then_some(i)).collect()
    }

    /// Pixel indices of every instance, indexed by id (entry 0 is empty).
    pub fn instance_pixels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.max_id() as usize + 1];
        for (i, &id) in self.ids.iter().enumerate() {
            if id != 0 {
                out[id as usize].push(i);
            }
        }
        out
    }

    pub fn bbox(&self, id: u32) -> Result<BBox> {
        let mut bb: Option<BBox> = None;
        for (i, &v) in self.ids.iter().enumerate() {
            if v != id || id == 0 {
                continue;
            }
            let (r, c) = (i / self.width, i % self.width);
            bb = Some(match bb {
                None => BBox { row_min: r, row_max: r, col_min: c, col_max: c },
                Some(b) => BBox {
                    row_min: b.row_min.min(r),
                    row_max: b.row_max.max(r),
                    col_min: b.col_min.min(c),
                    col_max: b.col_max.max(c),
                },
            });
        }
        bb.ok_or(Error::NotFound(id))
    }

    /// Relabels instances to `1..=N` in order of first appearance in
    /// row-major scan.
    pub fn compacted(&self) -> LabelMask {
        let mut map = vec![0u32; self.max_id() as usize + 1];
        let mut next = 0u32;
        let ids = self
            .ids
            .iter()
            .map(|&id| {
                if id == 0 {
                    return 0;
                }
                let slot = &mut map[id as usize];
                if *slot == 0 {
                    next += 1;
                    *slot = next;
                }
                *slot
            })
            .collect();
        LabelMask { height: self.height, width: self.width, ids }
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != 0).collect()
    }
}

/// Three-channel per-pixel network output `(z1, z2, z3)`: flow-x, flow-y
/// and the unnormalized mask score. Stored channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    /// Builds a map from planar data laid out as `[z1 plane, z2 plane, z3 plane]`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "feature map {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature map values must be finite".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn flow(&self, i: usize) -> (f64, f64) {
        let n = self.pixels();
        (self.data[i], self.data[n + i])
    }

    #[inline]
    pub fn logit(&self, i: usize) -> f64 {
        self.data[2 * self.pixels() + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, z: [f64; 3]) {
        let n = self.pixels();
        self.data[i] = z[0];
        self.data[n + i] = z[1];
        self.data[2 * n + i] = z[2];
    }

    pub fn same_dims(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "feature map is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Adds `scale * other` in place.
    pub fn add_scaled(&mut self, other: &FeatureMap, scale: f64) {
        assert!(self.same_dims(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= scale);
        self
    }
}
