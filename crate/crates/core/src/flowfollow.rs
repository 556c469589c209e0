//! Instance assembly from a predicted feature map: every foreground pixel
//! follows the predicted flow, endpoints that land close together form one
//! instance.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FollowConfig {
    pub steps: usize,
    pub step_size: f64,
    pub threshold: f64,
    pub bin_size: usize,
    pub min_size: usize,
}

impl Default for FollowConfig {
    fn default() -> Self {
        Self { steps: 200, step_size: 1.0, threshold: 0.0, bin_size: 2, min_size: 15 }
    }
}

impl FollowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.bin_size == 0 || !(self.step_size > 0.0) {
            return Err(Error::Config(format!("invalid follow config {self:?}")));
        }
        Ok(())
    }
}

/// Flow vectors shorter than this stop a trajectory.
pub const HALT_NORM: f64 = 1e-6;

/// Final `(row, col)` position of every foreground pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoints {
    pub height: usize,
    pub width: usize,
    /// Foreground pixel indices in row-major order.
    pub pixels: Vec<usize>,
    pub positions: Vec<(f64, f64)>,
}

/// Bilinear sample of the flow channels at a real position, clamped to the
/// image border. Returns `(dy, dx)`.
pub fn sample_flow(z: &FeatureMap, y: f64, x: f64) -> (f64, f64) {
    let (h, w) = (z.height(), z.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let (fx, fy) = (z.channel(0), z.channel(1));
    let lerp = |c: &[f64]| {
        let top = c[y0 * w + x0] * (1.0 - tx) + c[y0 * w + x1] * tx;
        let bottom = c[y1 * w + x0] * (1.0 - tx) + c[y1 * w + x1] * tx;
        top * (1.0 - ty) + bottom * ty
    };
    (lerp(fy), lerp(fx))
}

/// One integration step; `None` when the local flow is too short.
#[inline]
pub fn advance(z: &FeatureMap, pos: (f64, f64), step: f64) -> Option<(f64, f64)> {
    let (dy, dx) = sample_flow(z, pos.0, pos.1);
    let n = dx.hypot(dy);
    if !(n >= HALT_NORM) {
        return None;
    }
    let y = (pos.0 + step * dy / n).clamp(0.0, (z.height() - 1) as f64);
    let x = (pos.1 + step * dx / n).clamp(0.0, (z.width() - 1) as f64);
    Some((y, x))
}

fn trajectory_end(z: &FeatureMap, start: (f64, f64), cfg: &FollowConfig) -> (f64, f64) {
    // Trajectories usually settle into a two-step oscillation around a
    // center; once a position repeats exactly, the remaining steps only
    // alternate between the two points.
    let mut prev2: Option<(f64, f64)> = None;
    let mut prev = start;
    for k in 0..cfg.steps {
        let Some(next) = advance(z, prev, cfg.step_size) else { return prev };
        if next == prev {
            return next;
        }
        if prev2 == Some(next) {
            let remaining = cfg.steps - k - 1;
            return if remaining.is_multiple_of(2) { next } else { prev };
        }
        prev2 = Some(prev);
        prev = next;
    }
    prev
}

/// Integrates every foreground pixel (`z3 > threshold`) through the
/// normalized, bilinearly interpolated flow field.
pub fn follow_flows(z: &FeatureMap, cfg: &FollowConfig) -> Endpoints {
    let w = z.width();
    let pixels: Vec<usize> = (0..z.pixels()).filter(|&i| z.logit(i) > cfg.threshold).collect();
    let positions = pixels.iter().map(|&p| trajectory_end(z, ((p / w) as f64, (p % w) as f64), cfg)).collect();
    Endpoints { height: z.height(), width: w, pixels, positions }
}

/// Bin coordinates of a position.
pub fn bin_of(pos: (f64, f64), bin: usize) -> (usize, usize) {
    ((pos.0.max(0.0) as usize) / bin, (pos.1.max(0.0) as usize) / bin)
}

/// Groups endpoints by 8-connected components of occupied bins.
pub fn cluster_endpoints(ep: &Endpoints, cfg: &FollowConfig) -> LabelMask {
    let (h, w) = (ep.height, ep.width);
    let bin = cfg.bin_size;
    let (bh, bw) = (h.div_ceil(bin), w.div_ceil(bin));
    let mut occupied = vec![false; bh * bw];
    for &p in &ep.positions {
        let (r, c) = bin_of(p, bin);
        occupied[r.min(bh - 1) * bw + c.min(bw - 1)] = true;
    }
    let mut comp = vec![0u32; bh * bw];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..bh * bw {
        if !occupied[start] || comp[start] != 0 {
            continue;
        }
        next += 1;
        comp[start] = next;
        queue.push_back(start);
        while let Some(b) = queue.pop_front() {
            let (r, c) = (b / bw, b % bw);
            for nr in r.saturating_sub(1)..=(r + 1).min(bh - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(bw - 1) {
                    let nb = nr * bw + nc;
                    if occupied[nb] && comp[nb] == 0 {
                        comp[nb] = next;
                        queue.push_back(nb);
                    }
                }
            }
        }
    }
    let mut mask = LabelMask::zeros(h, w);
    let ids = mask.ids_mut();
    for (&p, &pos) in ep.pixels.iter().zip(&ep.positions) {
        let (r, c) = bin_of(pos, bin);
        ids[p] = comp[r.min(bh - 1) * bw + c.min(bw - 1)];
    }
    mask.compacted()
}

/// Drops instances smaller than `min_size` pixels and re-compacts ids.
pub fn remove_small(mask: &LabelMask, min_size: usize) -> LabelMask {
    let counts = mask.counts();
    let mut out = mask.clone();
    for id in out.ids_mut() {
        if *id != 0 && counts[*id as usize] < min_size {
            *id = 0;
        }
    }
    out.compacted()
}

/// Full head: follow, cluster, filter.
pub fn segment(z: &FeatureMap, cfg: &FollowConfig) -> Result<LabelMask> {
    cfg.validate()?;
    let ep = follow_flows(z, cfg);
    Ok(remove_small(&cluster_endpoints(&ep, cfg), cfg.min_size))
}
