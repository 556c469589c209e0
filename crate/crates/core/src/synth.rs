//! Synthetic cell scenes, covariate-shift transforms and ground-truth flow
//! labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMask};

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Canvas side in pixels (scenes are square).
    pub canvas: usize,
    /// Inclusive range of the number of cells.
    pub count: [usize; 2],
    /// Range of the major semi-axis in pixels.
    pub radius: [f64; 2],
    /// Range of the minor/major axis ratio; `1.0` renders circles.
    pub eccentricity: [f64; 2],
    /// Minimum gap between cells in pixels.
    pub min_separation: f64,
    pub background: f32,
    /// Range of the peak cell intensity.
    pub intensity: [f32; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: 224,
            count: [20, 30],
            radius: [10.0, 16.0],
            eccentricity: [0.6, 1.0],
            min_separation: 1.0,
            background: 0.1,
            intensity: [0.15, 0.5],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let quarter = self.canvas as f64 / 4.0;
        if self.count[0] < 1 || self.count[0] > self.count[1] {
            return Err(Error::Config(format!("invalid cell count range {:?}", self.count)));
        }
        if !(self.radius[0] > 2.0 && self.radius[1] < quarter && self.radius[0] <= self.radius[1]) {
            return Err(Error::Config(format!("radius range {:?} must lie within (2, {quarter})", self.radius)));
        }
        let [e0, e1] = self.eccentricity;
        if !(e0 > 0.0 && e0 <= e1 && e1 <= 1.0) {
            return Err(Error::Config(format!("invalid eccentricity range {:?}", self.eccentricity)));
        }
        if self.min_separation < 0.0 || self.intensity[0] > self.intensity[1] {
            return Err(Error::Config("invalid separation or intensity range".into()));
        }
        Ok(())
    }
}

/// Covariate shift applied to rendered scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub blur_sigma: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub invert: bool,
}

impl ShiftParams {
    pub const IDENTITY: ShiftParams = ShiftParams { blur_sigma: 0.0, gamma: 1.0, noise_sigma: 0.0, invert: false };

    /// Out-of-focus acquisition.
    pub fn focus_shift() -> Self {
        Self { blur_sigma: 3.0, gamma: 1.3, noise_sigma: 0.02, invert: false }
    }

    /// Inverted contrast with a different tone curve.
    pub fn stain_shift() -> Self {
        Self { blur_sigma: 0.0, gamma: 0.7, noise_sigma: 0.0, invert: true }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "none" | "identity" => Ok(Self::IDENTITY),
            "focus_shift" => Ok(Self::focus_shift()),
            "stain_shift" => Ok(Self::stain_shift()),
            other => Err(Error::Config(format!("unknown shift preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.gamma > 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("invalid shift parameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel training labels: unit flow toward the cell center and the
/// binary foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTarget {
    height: usize,
    width: usize,
    pub gx: Vec<f32>,
    pub gy: Vec<f32>,
    pub m: Vec<u8>,
}

impl FlowTarget {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn flow(&self, i: usize) -> (f64, f64) {
        (self.gx[i] as f64, self.gy[i] as f64)
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.m[i] != 0
    }

    pub fn foreground_count(&self) -> usize {
        self.m.iter().filter(|&&v| v != 0).count()
    }

    /// Assembles labels from raw channels (used by tests and decoders).
    pub fn from_parts(height: usize, width: usize, gx: Vec<f32>, gy: Vec<f32>, m: Vec<u8>) -> Result<Self> {
        let n = height * width;
        if gx.len() != n || gy.len() != n || m.len() != n {
            return Err(Error::Shape("flow target channels do not match dims".into()));
        }
        Ok(Self { height, width, gx, gy, m })
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(y, x)` after growing both axes by `grow`.
    fn rho2(&self, y: f64, x: f64, grow: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let (a, b) = (self.a + grow, self.b + grow);
        (u / a).powi(2) + (v / b).powi(2)
    }

    fn bounds(&self, grow: f64, size: usize) -> (usize, usize, usize, usize) {
        let r = self.a + grow + 1.0;
        let clamp = |v: f64| v.clamp(0.0, size as f64 - 1.0) as usize;
        (clamp(self.cy - r), clamp(self.cy + r), clamp(self.cx - r), clamp(self.cx + r))
    }
}

/// Renders non-overlapping filled ellipses on a flat background.
///
/// Cell intensity falls off quadratically from the center to half its peak
/// contrast at the rim. Ids are assigned in creation order.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(ImageGrid, LabelMask)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed);
    let n = cfg.canvas;
    let target = rng.random_range(cfg.count[0]..=cfg.count[1]);
    let mut img = ImageGrid::filled(n, n, cfg.background);
    let mut mask = LabelMask::zeros(n, n);
    let max_attempts = 200 * target;
    let mut placed = 0usize;
    let mut attempts = 0usize;

    while placed < target && attempts < max_attempts {
        attempts += 1;
        let a =
            if cfg.radius[0] == cfg.radius[1] { cfg.radius[0] } else { rng.random_range(cfg.radius[0]..cfg.radius[1]) };
        let ratio = if cfg.eccentricity[0] == cfg.eccentricity[1] {
            cfg.eccentricity[0]
        } else {
            rng.random_range(cfg.eccentricity[0]..cfg.eccentricity[1])
        };
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a + 1.0;
        let cy = rng.random_range(margin..n as f64 - margin);
        let cx = rng.random_range(margin..n as f64 - margin);
        let peak = if cfg.intensity[0] == cfg.intensity[1] {
            cfg.intensity[0]
        } else {
            rng.random_range(cfg.intensity[0]..cfg.intensity[1])
        };
        let e = Ellipse { cy, cx, a, b: a * ratio, cos: theta.cos(), sin: theta.sin() };

        let sep = cfg.min_separation;
        let (r0, r1, c0, c1) = e.bounds(sep, n);
        let blocked =
            (r0..=r1).any(|r| (c0..=c1).any(|c| mask.get(r, c) != 0 && e.rho2(r as f64, c as f64, sep) <= 1.0));
        if blocked {
            continue;
        }
        let id = placed as u32 + 1;
        let (r0, r1, c0, c1) = e.bounds(0.0, n);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let rho2 = e.rho2(r as f64, c as f64, 0.0);
                if rho2 <= 1.0 {
                    mask.set(r, c, id);
                    let contrast = (peak - cfg.background) * (1.0 - 0.5 * rho2 as f32);
                    img.set(r, c, cfg.background + contrast);
                }
            }
        }
        placed += 1;
    }
    if placed < target {
        return Err(Error::Placement { requested: target, achieved: placed });
    }
    Ok((img, mask))
}

/// Normalized discrete Gaussian truncated at `3 sigma`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let src = img.values();
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                s += kv * src[y * w + sx] as f64;
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[sy * w + x];
            }
            out[y * w + x] = s as f32;
        }
    }
    ImageGrid::new(h, w, out).expect("blur preserves shape")
}

/// Blur, gamma, additive clipped noise and optional inversion, in that order.
pub fn apply_domain_shift(img: &ImageGrid, p: &ShiftParams, seed: u64) -> Result<ImageGrid> {
    p.validate()?;
    let mut out = gaussian_blur(img, p.blur_sigma);
    if p.gamma != 1.0 {
        out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0).powf(p.gamma as f32));
    }
    if p.noise_sigma > 0.0 {
        let mut rng = rng_for(seed);
        let normal = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        out.values_mut().iter_mut().for_each(|v| *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32);
    }
    if p.invert {
        out.values_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    Ok(out)
}

/// Pixel of `pixels` (row-major indices into a `width`-wide grid) that
/// minimizes the summed Manhattan distance to all others; lowest index wins
/// ties.
pub fn medoid(pixels: &[usize], width: usize) -> usize {
    assert!(!pixels.is_empty());
    let rows: Vec<usize> = pixels.iter().map(|&p| p / width).collect();
    let cols: Vec<usize> = pixels.iter().map(|&p| p % width).collect();
    let axis_cost = |coords: &[usize]| {
        let lo = *coords.iter().min().unwrap();
        let hi = *coords.iter().max().unwrap();
        let mut hist = vec![0u64; hi - lo + 1];
        coords.iter().for_each(|&v| hist[v - lo] += 1);
        // cost[v] = sum |v - c| via prefix counts and sums.
        let mut cost = vec![0u64; hist.len()];
        let (mut cnt, mut sum) = (0u64, 0u64);
        for (v, &hcount) in hist.iter().enumerate() {
            cnt += hcount;
            sum += hcount * v as u64;
            cost[v] = v as u64 * cnt - sum;
        }
        let (mut cnt, mut sum) = (0u64, 0u64);
        for v in (0..hist.len()).rev() {
            cost[v] += sum - v as u64 * cnt;
            cnt += hist[v];
            sum += hist[v] * v as u64;
        }
        (lo, cost)
    };
    let (rlo, rcost) = axis_cost(&rows);
    let (clo, ccost) = axis_cost(&cols);
    let mut best = pixels[0];
    let mut best_cost = u64::MAX;
    let mut sorted = pixels.to_vec();
    sorted.sort_unstable();
    for p in sorted {
        let c = rcost[p / width - rlo] + ccost[p % width - clo];
        if c < best_cost {
            best_cost = c;
            best = p;
        }
    }
    best
}

/// Ground-truth flows by heat diffusion from each instance's medoid.
///
/// For every instance: the medoid receives one unit of heat per iteration,
/// the field is then replaced by the average of each pixel and its four
/// neighbours (pixels outside the instance hold zero), for
/// `ceil(2 * bbox diagonal)` iterations. Flows are the normalized central
/// differences of the final field; the medoid itself gets `(0, 0)`.
pub fn compute_flow_targets(mask: &LabelMask) -> FlowTarget {
    let (h, w) = (mask.height(), mask.width());
    let n = h * w;
    let mut gx = vec![0.0f32; n];
    let mut gy = vec![0.0f32; n];
    let m: Vec<u8> = mask.ids().iter().map(|&id| (id != 0) as u8).collect();

    for (id, pixels) in mask.instance_pixels().into_iter().enumerate().skip(1) {
        if pixels.is_empty() {
            continue;
        }
        let (flows, _) = instance_flows(mask, id as u32, &pixels);
        for (p, (fx, fy)) in pixels.iter().zip(flows) {
            gx[*p] = fx;
            gy[*p] = fy;
        }
    }
    FlowTarget { height: h, width: w, gx, gy, m }
}

/// Flows for one instance plus its center pixel index.
fn instance_flows(mask: &LabelMask, id: u32, pixels: &[usize]) -> (Vec<(f32, f32)>, usize) {
    let w = mask.width();
    let center = medoid(pixels, w);
    let r0 = pixels.iter().map(|p| p / w).min().unwrap();
    let r1 = pixels.iter().map(|p| p / w).max().unwrap();
    let c0 = pixels.iter().map(|p| p % w).min().unwrap();
    let c1 = pixels.iter().map(|p| p % w).max().unwrap();
    // Local grid with a one-pixel zero border.
    let lh = r1 - r0 + 3;
    let lw = c1 - c0 + 3;
    let local = |p: usize| (p / w - r0 + 1) * lw + (p % w - c0 + 1);
    let mut inside = vec![false; lh * lw];
    let idx: Vec<usize> = pixels.iter().map(|&p| local(p)).collect();
    idx.iter().for_each(|&i| inside[i] = true);
    debug_assert!(pixels.iter().all(|&p| mask.ids()[p] == id));

    let bh = (r1 - r0 + 1) as f64;
    let bw = (c1 - c0 + 1) as f64;
    let iters = (2.0 * (bh * bh + bw * bw).sqrt()).ceil() as usize;
    let lc = local(center);
    let mut heat = vec![0.0f64; lh * lw];
    let mut next = heat.clone();
    for _ in 0..iters {
        heat[lc] += 1.0;
        for &i in &idx {
            next[i] = (heat[i] + heat[i - 1] + heat[i + 1] + heat[i - lw] + heat[i + lw]) / 5.0;
        }
        std::mem::swap(&mut heat, &mut next);
    }

    let flows = idx
        .iter()
        .map(|&i| {
            if i == lc {
                return (0.0, 0.0);
            }
            let dx = heat[i + 1] - heat[i - 1];
            let dy = heat[i + lw] - heat[i - lw];
            let norm = dx.hypot(dy);
            if norm > 0.0 && norm.is_finite() {
                ((dx / norm) as f32, (dy / norm) as f32)
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    (flows, center)
}

/// Medoid center of every instance, indexed by id (entry 0 unused).
pub fn instance_centers(mask: &LabelMask) -> Vec<Option<usize>> {
    mask.instance_pixels()
        .iter()
        .map(|px| (!px.is_empty()).then(|| medoid(px, mask.width())))
        .enumerate()
        .map(|(id, c)| if id == 0 { None } else { c })
        .collect()
}
