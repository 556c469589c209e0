//! Training patches: source crops, K-shot target patches and their random
//! geometric augmentation. Labels are always recomputed from the
//! transformed mask.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::bbox_cell_size;
use crate::grid::{ImageGrid, LabelMask};
use crate::synth::{compute_flow_targets, FlowTarget};

use super::TrainConfig;

/// A square training patch with its instance mask and derived labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: ImageGrid,
    pub mask: LabelMask,
    pub labels: FlowTarget,
}

impl Patch {
    pub fn new(image: ImageGrid, mask: LabelMask) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Shape("patch image and mask differ in size".into()));
        }
        let labels = compute_flow_targets(&mask);
        Ok(Self { image, mask, labels })
    }

    pub fn side(&self) -> usize {
        self.image.height()
    }
}

/// One annotated target cell, cropped around the cell and resized so the
/// cell appears at nominal size.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotPatch {
    pub patch: Patch,
    pub cell_id: u32,
    pub cell_size: f64,
    /// Side of the square crop before resizing.
    pub crop_side: usize,
}

/// Square window in real source coordinates: top-left corner and side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub top: f64,
    pub left: f64,
    pub side: f64,
}

/// Maps output pixel `i` of an `out`-wide resample to window coordinates.
#[inline]
fn source_coord(i: usize, origin: f64, side: f64, out: usize) -> f64 {
    origin + (i as f64 + 0.5) * side / out as f64 - 0.5
}

/// Bilinear resample of a window into an `out x out` grid; zero outside.
pub fn resample_image(img: &ImageGrid, win: Window, out: usize) -> ImageGrid {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let px = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            img.values()[(r * w + c) as usize] as f64
        }
    };
    let mut v = Vec::with_capacity(out * out);
    for i in 0..out {
        let y = source_coord(i, win.top, win.side, out);
        let (y0, ty) = (y.floor(), y - y.floor());
        for j in 0..out {
            let x = source_coord(j, win.left, win.side, out);
            let (x0, tx) = (x.floor(), x - x.floor());
            let (r, c) = (y0 as isize, x0 as isize);
            let mut s = px(r, c) * (1.0 - ty) * (1.0 - tx);
            if tx > 0.0 {
                s += px(r, c + 1) * (1.0 - ty) * tx;
            }
            if ty > 0.0 {
                s += px(r + 1, c) * ty * (1.0 - tx);
                if tx > 0.0 {
                    s += px(r + 1, c + 1) * ty * tx;
                }
            }
            v.push(s as f32);
        }
    }
    ImageGrid::new(out, out, v).expect("resampled values are finite")
}

/// Nearest-neighbour resample of a mask window; background outside.
pub fn resample_mask(mask: &LabelMask, win: Window, out: usize) -> LabelMask {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut ids = Vec::with_capacity(out * out);
    for i in 0..out {
        let r = source_coord(i, win.top, win.side, out).round() as isize;
        for j in 0..out {
            let c = source_coord(j, win.left, win.side, out).round() as isize;
            let inside = r >= 0 && c >= 0 && r < h && c < w;
            ids.push(if inside { mask.ids()[(r * w + c) as usize] } else { 0 });
        }
    }
    LabelMask::new(out, out, ids).expect("dims are consistent")
}

/// Crop side for a cell of size `cell_size`: `round(beta_max * m_c * w / m_n)`.
pub fn shot_crop_side(cell_size: f64, cfg: &TrainConfig) -> usize {
    (cfg.beta_max * cell_size * cfg.tile as f64 / cfg.nominal_size).round().max(1.0) as usize
}

/// Top-left offset of a crop of `side` centred at `center` along an axis of
/// length `len`, kept inside the axis when it fits.
fn clamp_origin(center: f64, side: usize, len: usize) -> f64 {
    let ideal = (center - side as f64 / 2.0 + 0.5).round();
    if side <= len {
        ideal.clamp(0.0, (len - side) as f64)
    } else {
        -(((side - len) / 2) as f64)
    }
}

/// Crops the patch centred on `cell_id` and resizes it to `tile x tile`.
pub fn extract_shot(img: &ImageGrid, mask: &LabelMask, cell_id: u32, cfg: &TrainConfig) -> Result<ShotPatch> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::Shape("image and mask differ in size".into()));
    }
    let bbox = mask.bbox(cell_id)?;
    let cell_size = bbox_cell_size(mask, cell_id)?;
    let side = shot_crop_side(cell_size, cfg);
    let (cy, cx) = bbox.center();
    let win = Window {
        top: clamp_origin(cy, side, img.height()),
        left: clamp_origin(cx, side, img.width()),
        side: side as f64,
    };
    let patch = Patch::new(resample_image(img, win, cfg.tile), resample_mask(mask, win, cfg.tile))?;
    Ok(ShotPatch { patch, cell_id, cell_size, crop_side: side })
}

/// Random draws of one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub factor: f64,
    /// Offset of the sub-window as a fraction of the free range, in `[0, 1]`.
    pub offset: (f64, f64),
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
}

impl AugmentParams {
    pub fn sample<R: Rng>(rng: &mut R, range: [f64; 2]) -> Self {
        let factor = if range[1] > range[0] { rng.random_range(range[0]..=range[1]) } else { range[0] };
        Self {
            factor,
            offset: (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)),
            flip_vertical: rng.random_bool(0.5),
            flip_horizontal: rng.random_bool(0.5),
        }
    }
}

/// Applies a scale/translation crop and flips. The sub-window side is
/// `side * factor / context_scale`; a shot patch carries `beta_max` of
/// context around its cell, so it is the identity at `factor = beta_max`,
/// while a plain crop (`context_scale = 1`) is the identity at `factor = 1`.
pub fn augment_with(patch: &Patch, context_scale: f64, a: &AugmentParams) -> Result<Patch> {
    let n = patch.side();
    let side = n as f64 * a.factor / context_scale;
    let free = n as f64 - side;
    // For windows larger than the patch the offset runs over the padding.
    let win =
        Window { top: free.min(0.0) + free.abs() * a.offset.0, left: free.min(0.0) + free.abs() * a.offset.1, side };
    let mut image = resample_image(&patch.image, win, n);
    let mut mask = resample_mask(&patch.mask, win, n);
    if a.flip_vertical {
        flip_rows(image.values_mut(), n);
        flip_rows(mask.ids_mut(), n);
    }
    if a.flip_horizontal {
        flip_cols(image.values_mut(), n);
        flip_cols(mask.ids_mut(), n);
    }
    Patch::new(image, mask)
}

pub fn augment<R: Rng>(patch: &Patch, context_scale: f64, range: [f64; 2], rng: &mut R) -> Result<Patch> {
    augment_with(patch, context_scale, &AugmentParams::sample(rng, range))
}

fn flip_rows<T>(v: &mut [T], n: usize) {
    for r in 0..n / 2 {
        let (a, b) = v.split_at_mut((n - 1 - r) * n);
        a[r * n..(r + 1) * n].swap_with_slice(&mut b[..n]);
    }
}

fn flip_cols<T>(v: &mut [T], n: usize) {
    v.chunks_mut(n).for_each(|row| row.reverse());
}

/// A random `tile x tile` crop of a scene at native scale, zero padded when
/// the scene is smaller.
pub fn random_crop<R: Rng>(img: &ImageGrid, mask: &LabelMask, tile: usize, rng: &mut R) -> Result<Patch> {
    let pick = |len: usize, rng: &mut R| -> f64 {
        if len >= tile {
            rng.random_range(0..=len - tile) as f64
        } else {
            -(((tile - len) / 2) as f64)
        }
    };
    let top = pick(img.height(), rng);
    let left = pick(img.width(), rng);
    let win = Window { top, left, side: tile as f64 };
    Patch::new(resample_image(img, win, tile), resample_mask(mask, win, tile))
}
