//! Training objectives and their analytic gradients with respect to the
//! feature map.
//!
//! * [`loss_is`]: per-pixel flow regression plus weighted mask BCE.
//! * [`loss_cf`]: contrastive flow loss. Each foreground target pixel is an
//!   anchor; its positive is the source pixel whose *predicted* flow best
//!   matches the anchor's ground-truth flow, and its negatives are the
//!   source flows just outside the similarity cone around that positive.
//! * [`loss_cm`]: contrastive mask loss on same-position score pairs.
//! * [`loss_isa`]: the weighted per-pair adaptation objective.
//!
//! Source features are treated as constants by both contrastive terms, so
//! all gradients are with respect to the target feature map only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureMap;
use crate::synth::FlowTarget;

/// Scale of the per-pair objective. `Mean` divides the whole objective by
/// the number of target pixels, which keeps the relative weights of the
/// three terms and only rescales the step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub delta: f64,
    pub n_neg: usize,
    pub margin: f64,
    pub lambda: f64,
    /// Weight of the contrastive mask loss.
    pub gamma_mask: f64,
    /// Weight of the contrastive flow loss.
    pub gamma_flow: f64,
    /// Weight of the mask BCE inside the instance-segmentation loss.
    pub nu: f64,
    /// Scale of the objective returned by [`loss_isa`].
    pub is_reduction: Reduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            delta: 0.05,
            n_neg: 20,
            margin: 10.0,
            lambda: 1.0,
            gamma_mask: 0.05,
            gamma_flow: 2.0,
            nu: 0.04,
            is_reduction: Reduction::Mean,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0)
            || !(self.delta > -1.0 && self.delta < 1.0)
            || !(self.margin > 0.0)
            || self.lambda < 0.0
        {
            return Err(Error::Config(format!("invalid contrastive config {self:?}")));
        }
        Ok(())
    }
}

/// Target and source patches of one training pair.
#[derive(Debug, Clone, Copy)]
pub struct PairBatch<'a> {
    pub target_z: &'a FeatureMap,
    pub target: &'a FlowTarget,
    pub source_z: &'a FeatureMap,
    pub source: &'a FlowTarget,
}

impl PairBatch<'_> {
    fn check(&self) -> Result<()> {
        let (h, w) = (self.target.height(), self.target.width());
        self.target_z.check_dims(h, w)?;
        self.source_z.check_dims(h, w)?;
        if self.source.height() != h || self.source.width() != w {
            return Err(Error::Shape("source and target patches differ in size".into()));
        }
        Ok(())
    }
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Instance-segmentation loss summed over pixels:
/// `(z1 - gx)^2 + (z2 - gy)^2 + nu * BCE(m, sigmoid(z3))`.
pub fn loss_is(z: &FeatureMap, t: &FlowTarget, nu: f64) -> Result<(f64, FeatureMap)> {
    z.check_dims(t.height(), t.width())?;
    let n = z.pixels();
    let mut grad = FeatureMap::zeros(z.height(), z.width());
    let mut total = 0.0;
    for i in 0..n {
        let (z1, z2) = z.flow(i);
        let z3 = z.logit(i);
        let (gx, gy) = t.flow(i);
        let m = t.m[i] as f64;
        let (ex, ey) = (z1 - gx, z2 - gy);
        // BCE(m, sigmoid(z)) = softplus(z) - m z
        total += ex * ex + ey * ey + nu * (softplus(z3) - m * z3);
        grad.set(i, [2.0 * ex, 2.0 * ey, nu * (sigmoid(z3) - m)]);
    }
    Ok((total, grad))
}

#[inline]
fn unit(v: (f64, f64)) -> Option<(f64, f64)> {
    let n = v.0.hypot(v.1);
    (n > 0.0 && n.is_finite()).then(|| (v.0 / n, v.1 / n))
}

#[inline]
fn dot(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

/// Source pixel with `m = 1` whose predicted flow has the highest cosine
/// similarity to `label`; the lowest index wins ties. Exhaustive scan.
pub fn select_positive(label: (f64, f64), source_z: &FeatureMap, source_m: &[u8]) -> Result<usize> {
    let l = unit(label).ok_or(Error::NoPositive)?;
    let mut best: Option<(f64, usize)> = None;
    for (i, &m) in source_m.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let Some(u) = unit(source_z.flow(i)) else { continue };
        let s = dot(l, u);
        if best.is_none_or(|(bs, _)| s > bs) {
            best = Some((s, i));
        }
    }
    best.map(|(_, i)| i).ok_or(Error::NoPositive)
}

/// Hard negatives for `z_plus`: among source pixels with `m = 1` and cosine
/// similarity to `z_plus` strictly below `delta`, the `n_neg` most similar
/// (lowest index first on ties). Exhaustive scan.
pub fn mine_negatives(
    z_plus: (f64, f64),
    source_z: &FeatureMap,
    source_m: &[u8],
    delta: f64,
    n_neg: usize,
) -> Vec<usize> {
    let Some(p) = unit(z_plus) else { return Vec::new() };
    let mut cands: Vec<(f64, usize)> = source_m
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0)
        .filter_map(|(i, _)| unit(source_z.flow(i)).map(|u| (dot(p, u), i)))
        .filter(|&(s, _)| s < delta)
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cands.truncate(n_neg);
    cands.into_iter().map(|(_, i)| i).collect()
}

const TAU: f64 = std::f64::consts::TAU;
/// Angular slack covering rounding in `atan2` and in the cosine itself.
const ANGLE_EPS: f64 = 1e-7;

/// Angle-sorted view of the eligible source pixels of one patch, used to
/// answer positive and negative queries without scanning every pixel.
/// Results are identical to [`select_positive`] and [`mine_negatives`].
pub struct SourceIndex {
    /// `(angle, pixel, unit flow)` sorted by angle in `(-pi, pi]`.
    entries: Vec<(f64, usize, (f64, f64))>,
}

fn circ_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

impl SourceIndex {
    pub fn new(source_z: &FeatureMap, source_m: &[u8]) -> Self {
        let mut entries: Vec<(f64, usize, (f64, f64))> = source_m
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .filter_map(|(i, _)| unit(source_z.flow(i)).map(|u| (u.1.atan2(u.0), i, u)))
            .collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unit_flow(&self, pixel: usize) -> Option<(f64, f64)> {
        self.entries.iter().find(|e| e.1 == pixel).map(|e| e.2)
    }

    /// First position whose angle is `>= angle` (wrapping to 0).
    fn position(&self, angle: f64) -> usize {
        let a = if angle > std::f64::consts::PI { angle - TAU } else { angle };
        let a = if a <= -std::f64::consts::PI { a + TAU } else { a };
        self.entries.partition_point(|e| e.0 < a) % self.entries.len()
    }

    /// Walks from `start` in direction `step` (+1 ccw, -1 cw) yielding
    /// entries until the whole ring has been visited once.
    fn walk(&self, start: usize, ccw: bool) -> impl Iterator<Item = &(f64, usize, (f64, f64))> {
        let n = self.entries.len();
        (0..n).map(move |k| {
            let pos = if ccw { (start + k) % n } else { (start + n - k) % n };
            &self.entries[pos]
        })
    }

    /// Returns `(pixel, unit flow)` of the positive for `label`.
    pub fn positive(&self, label: (f64, f64)) -> Option<(usize, (f64, f64))> {
        let l = unit(label)?;
        if self.entries.is_empty() {
            return None;
        }
        let angle = l.1.atan2(l.0);
        let start = self.position(angle);
        let n = self.entries.len();
        let cw_start = (start + n - 1) % n;
        let d_min = circ_dist(self.entries[start].0, angle).min(circ_dist(self.entries[cw_start].0, angle));
        let limit = d_min + ANGLE_EPS;
        let mut best: Option<(f64, usize, (f64, f64))> = None;
        let mut consider = |e: &(f64, usize, (f64, f64))| {
            let s = dot(l, e.2);
            let better = match best {
                None => true,
                Some((bs, bi, _)) => s > bs || (s == bs && e.1 < bi),
            };
            if better {
                best = Some((s, e.1, e.2));
            }
        };
        for e in self.walk(start, true).take_while(|e| circ_dist(e.0, angle) <= limit) {
            consider(e);
        }
        for e in self.walk(cw_start, false).take_while(|e| circ_dist(e.0, angle) <= limit) {
            consider(e);
        }
        best.map(|(_, i, u)| (i, u))
    }

    /// Hard negatives around the positive direction `p` (a unit vector).
    pub fn negatives(&self, p: (f64, f64), delta: f64, n_neg: usize) -> Vec<(usize, (f64, f64))> {
        if self.entries.is_empty() || n_neg == 0 {
            return Vec::new();
        }
        let theta = p.1.atan2(p.0);
        let alpha = delta.clamp(-1.0, 1.0).acos();
        let lo = (alpha - ANGLE_EPS).max(0.0);
        let n = self.entries.len();

        // Entries on each side ordered by increasing angular distance from
        // `theta`, starting just inside the cone boundary.
        let ccw_start = self.position(theta + lo);
        let cw_start = (self.position(theta - lo) + n - 1) % n;
        let in_range = |e: &(f64, usize, (f64, f64)), ccw: bool| {
            let off = (e.0 - theta).rem_euclid(TAU);
            let off = if ccw { off } else { TAU - off };
            off >= lo && off <= std::f64::consts::PI + ANGLE_EPS
        };
        let mut ccw = self.walk(ccw_start, true).take_while(|e| in_range(e, true)).peekable();
        let mut cw = self.walk(cw_start, false).take_while(|e| in_range(e, false)).peekable();

        let mut picked: Vec<(f64, usize, (f64, f64))> = Vec::new();
        let mut cutoff = f64::INFINITY;
        loop {
            let next = match (ccw.peek(), cw.peek()) {
                (None, None) => break,
                (Some(_), None) => ccw.next(),
                (None, Some(_)) => cw.next(),
                (Some(a), Some(b)) => {
                    if circ_dist(a.0, theta) <= circ_dist(b.0, theta) {
                        ccw.next()
                    } else {
                        cw.next()
                    }
                }
            }
            .unwrap();
            let d = circ_dist(next.0, theta);
            if d > cutoff {
                break;
            }
            let s = dot(p, next.2);
            if s < delta && !picked.iter().any(|q| q.1 == next.1) {
                picked.push((s, next.1, next.2));
                if picked.len() == n_neg {
                    cutoff = d + ANGLE_EPS;
                }
            }
        }
        picked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        picked.truncate(n_neg);
        picked.into_iter().map(|(_, i, u)| (i, u)).collect()
    }
}

/// `-log(exp(s+ / tau) / (exp(s+ / tau) + sum_j exp(s_j / tau)))` for
/// given similarities.
pub fn contrastive_term(s_pos: f64, s_neg: &[f64], temperature: f64) -> f64 {
    let logits = std::iter::once(s_pos).chain(s_neg.iter().copied()).map(|s| s / temperature);
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    max + logits.map(|a| (a - max).exp()).sum::<f64>().ln() - s_pos / temperature
}

/// Per-anchor contrastive flow term and its gradient with respect to the
/// anchor's flow feature. `positive` and `negatives` are unit vectors.
pub fn anchor_cf(
    zt: (f64, f64),
    positive: (f64, f64),
    negatives: &[(f64, f64)],
    temperature: f64,
) -> (f64, (f64, f64)) {
    let norm = zt.0.hypot(zt.1);
    if !(norm > 0.0) {
        // Similarities are all zero and undefined in direction.
        return ((1.0 + negatives.len() as f64).ln(), (0.0, 0.0));
    }
    let zh = (zt.0 / norm, zt.1 / norm);
    let sims: Vec<f64> = std::iter::once(positive).chain(negatives.iter().copied()).map(|v| dot(zh, v)).collect();
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|a| (a - max).exp()).sum();
    let lse = max + sum.ln();
    let value = lse - logits[0];

    let mut g = (0.0, 0.0);
    for (k, (v, s)) in std::iter::once(positive).chain(negatives.iter().copied()).zip(&sims).enumerate() {
        let p = (logits[k] - lse).exp();
        let c = if k == 0 { p - 1.0 } else { p };
        // d s / d z = (v - s zh) / |z|
        g.0 += c * (v.0 - s * zh.0);
        g.1 += c * (v.1 - s * zh.1);
    }
    let scale = 1.0 / (temperature * norm);
    (value, (g.0 * scale, g.1 * scale))
}

/// Contrastive flow loss of one pair, averaged over scored anchors.
pub fn loss_cf(batch: &PairBatch<'_>, cfg: &ContrastiveConfig) -> Result<(f64, FeatureMap)> {
    batch.check()?;
    let index = SourceIndex::new(batch.source_z, &batch.source.m);
    let n = batch.target.pixels();
    let mut grad = FeatureMap::zeros(batch.target.height(), batch.target.width());
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut per_anchor: Vec<(usize, (f64, f64))> = Vec::new();
    for i in 0..n {
        if batch.target.m[i] == 0 {
            continue;
        }
        let Some((_, pos)) = index.positive(batch.target.flow(i)) else { continue };
        let negs: Vec<(f64, f64)> = index.negatives(pos, cfg.delta, cfg.n_neg).into_iter().map(|(_, u)| u).collect();
        let (v, g) = anchor_cf(batch.target_z.flow(i), pos, &negs, cfg.temperature);
        total += v;
        scored += 1;
        per_anchor.push((i, g));
    }
    if scored == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / scored as f64;
    let plane = grad.pixels();
    let data = grad.data_mut();
    for (i, g) in per_anchor {
        data[i] = g.0 * inv;
        data[plane + i] = g.1 * inv;
    }
    Ok((total * inv, grad))
}

/// Contrastive mask loss on same-position pixel pairs.
pub fn loss_cm(batch: &PairBatch<'_>, cfg: &ContrastiveConfig) -> Result<(f64, FeatureMap)> {
    batch.check()?;
    let n = batch.target.pixels();
    let mut dpos = vec![0.0; n];
    let mut dneg = vec![0.0; n];
    let (mut sum_pos, mut sum_neg) = (0.0, 0.0);
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..n {
        let diff = batch.target_z.logit(i) - batch.source_z.logit(i);
        if batch.target.m[i] == batch.source.m[i] {
            sum_pos += 0.5 * diff * diff;
            dpos[i] = diff;
            n_pos += 1;
        } else {
            let gap = (cfg.margin - diff.abs()).max(0.0);
            sum_neg += 0.5 * gap * gap;
            dneg[i] = -gap * diff.signum() * (diff != 0.0) as u8 as f64;
            n_neg += 1;
        }
    }
    let mut grad = FeatureMap::zeros(batch.target.height(), batch.target.width());
    let mut value = 0.0;
    let wp = if n_pos > 0 { 1.0 / n_pos as f64 } else { 0.0 };
    let wn = if n_neg > 0 { cfg.lambda / n_neg as f64 } else { 0.0 };
    value += sum_pos * wp + sum_neg * wn;
    for (g, (dp, dn)) in grad.channel_mut(2).iter_mut().zip(dpos.iter().zip(&dneg)) {
        *g = dp * wp + dn * wn;
    }
    Ok((value, grad))
}

/// Loss components of one adaptation pair. Components are unscaled;
/// `total = scale * (is + gamma_mask * cm + gamma_flow * cf)`.
#[derive(Debug, Clone)]
pub struct IsaLoss {
    pub total: f64,
    pub scale: f64,
    pub is: f64,
    pub cf: f64,
    pub cm: f64,
    /// Gradient of `total` with respect to the target feature map.
    pub grad: FeatureMap,
}

/// `L_IS(target) + gamma_mask * L_CM + gamma_flow * L_CF` for one
/// target/source pair. Contrastive terms are skipped when their weight is 0.
pub fn loss_isa(batch: &PairBatch<'_>, cfg: &ContrastiveConfig) -> Result<IsaLoss> {
    batch.check()?;
    cfg.validate()?;
    let (is, mut grad) = loss_is(batch.target_z, batch.target, cfg.nu)?;
    let mut cm = 0.0;
    if cfg.gamma_mask != 0.0 {
        let (v, g) = loss_cm(batch, cfg)?;
        cm = v;
        grad.add_scaled(&g, cfg.gamma_mask);
    }
    let mut cf = 0.0;
    if cfg.gamma_flow != 0.0 {
        let (v, g) = loss_cf(batch, cfg)?;
        cf = v;
        grad.add_scaled(&g, cfg.gamma_flow);
    }
    let scale = match cfg.is_reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.target.pixels() as f64,
    };
    Ok(IsaLoss {
        total: scale * (is + cfg.gamma_mask * cm + cfg.gamma_flow * cf),
        scale,
        is,
        cf,
        cm,
        grad: if scale == 1.0 { grad } else { grad.scaled(scale) },
    })
}
