#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use ct_core::synth::FlowTarget;
use ct_core::FeatureMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

/// Relative error with a tiny absolute floor so that two exact zeros agree.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-9);
    (analytic - numeric).abs() / scale
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Largest relative error between `analytic` and central differences over
/// every coordinate of `x`.
pub fn max_fd_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    (0..x.len()).map(|i| rel_err(analytic[i], central_diff(f, x, i, h))).fold(0.0, f64::max)
}

pub fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, spread: f64) -> FeatureMap {
    let data = (0..3 * h * w).map(|_| rng.random_range(-spread..spread)).collect();
    FeatureMap::from_planar(h, w, data).unwrap()
}

/// Labels with roughly `fg` foreground fraction and unit flows on
/// foreground pixels.
pub fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize, fg: f64) -> FlowTarget {
    let n = h * w;
    let (mut gx, mut gy, mut m) = (vec![0.0f32; n], vec![0.0f32; n], vec![0u8; n]);
    for i in 0..n {
        if rng.random_bool(fg) {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            gx[i] = a.cos() as f32;
            gy[i] = a.sin() as f32;
            m[i] = 1;
        }
    }
    FlowTarget::from_parts(h, w, gx, gy, m).unwrap()
}

pub mod model_fd {
    use super::*;
    use ct_core::model::{backward, forward, forward_frozen, ForwardCache, Params};
    use ct_core::ImageGrid;
    use rand::SeedableRng;

    /// Random f64 parameters with nonzero biases so every path is exercised.
    pub fn random_params(seed: u64) -> Params<f64> {
        let mut p = Params::<f64>::init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for b in p.blocks.iter_mut().filter(|b| b.name.ends_with(".bias")) {
            b.values.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        p
    }

    pub fn random_image(rng: &mut ChaCha8Rng, n: usize) -> ImageGrid {
        ImageGrid::new(n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn dot(z: &FeatureMap, c: &FeatureMap) -> f64 {
        z.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    /// One probe instance: loss `sum(c * Z)` whose output gradient is `c`.
    pub struct Probe {
        pub params: Params<f64>,
        pub img: ImageGrid,
        pub c: FeatureMap,
        pub cache: ForwardCache<f64>,
        pub grad: Params<f64>,
    }

    impl Probe {
        pub fn new(seed: u64, rng: &mut ChaCha8Rng, n: usize) -> Self {
            let params = random_params(seed);
            let img = random_image(rng, n);
            let c = random_features(rng, n, n, 1.0);
            let (_, cache) = forward(&params, &img).unwrap();
            let grad = backward(&params, &cache, &c).unwrap();
            Self { params, img, c, cache, grad }
        }

        fn perturbed(&self, block: usize, idx: usize, delta: f64) -> Params<f64> {
            let mut q = self.params.clone();
            q.blocks[block].values[idx] += delta;
            q
        }

        /// Central difference on the linear piece holding the unperturbed
        /// point.
        pub fn frozen_fd(&self, block: usize, idx: usize) -> f64 {
            let f =
                |d: f64| dot(&forward_frozen(&self.perturbed(block, idx, d), &self.img, &self.cache).unwrap(), &self.c);
            (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
        }

        /// Central difference on the true network. `None` when either end
        /// of the stencil lands on a different linear piece.
        pub fn raw_fd(&self, block: usize, idx: usize) -> Option<f64> {
            let (zp, cp) = forward(&self.perturbed(block, idx, FD_STEP), &self.img).unwrap();
            let (zm, cm) = forward(&self.perturbed(block, idx, -FD_STEP), &self.img).unwrap();
            (cp.same_pattern(&self.cache) && cm.same_pattern(&self.cache))
                .then(|| (dot(&zp, &self.c) - dot(&zm, &self.c)) / (2.0 * FD_STEP))
        }
    }

    #[derive(Debug, Default)]
    pub struct Report {
        pub frozen_worst: f64,
        pub raw_worst: f64,
        pub raw_checked: usize,
        pub straddled: usize,
    }

    /// Samples `per_block` coordinates of every parameter block on each of
    /// `instances` random 16x16 probes.
    pub fn sampled_check(instances: u64, per_block: usize, seed: u64) -> Report {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = Report::default();
        for inst in 0..instances {
            let probe = Probe::new(seed.wrapping_mul(1000) + inst, &mut rng, 16);
            for b in 0..probe.params.blocks.len() {
                for _ in 0..per_block {
                    let idx = rng.random_range(0..probe.params.blocks[b].values.len());
                    let a = probe.grad.blocks[b].values[idx];
                    r.frozen_worst = r.frozen_worst.max(rel_err(a, probe.frozen_fd(b, idx)));
                    match probe.raw_fd(b, idx) {
                        Some(n) => {
                            r.raw_worst = r.raw_worst.max(rel_err(a, n));
                            r.raw_checked += 1;
                        }
                        None => r.straddled += 1,
                    }
                }
            }
        }
        r
    }
}

pub mod loss_fd {
    use super::*;
    use ct_core::synth::FlowTarget;

    pub fn with_data(z: &FeatureMap, data: &[f64]) -> FeatureMap {
        FeatureMap::from_planar(z.height(), z.width(), data.to_vec()).unwrap()
    }

    /// Pair with target flow norms in `[1, 2]`. The cosine has curvature of
    /// order `1 / (tau |z|)`, so the FD step must stay small against `tau |z|`.
    pub fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (FeatureMap, FlowTarget, FeatureMap, FlowTarget) {
        let mut zt = random_features(rng, n, n, 2.0);
        for i in 0..n * n {
            let (x, y) = zt.flow(i);
            let a = y.atan2(x);
            let r = 1.0 + x.hypot(y) / 3.0;
            zt.set(i, [r * a.cos(), r * a.sin(), zt.logit(i)]);
        }
        let zs = random_features(rng, n, n, 2.0);
        let t = random_target(rng, n, n, 0.6);
        let s = random_target(rng, n, n, 0.6);
        (zt, t, zs, s)
    }

    /// Moves same-position logit differences away from the two kinks of the
    /// margin term (`0` and `margin`).
    pub fn away_from_kinks(zt: &mut FeatureMap, zs: &FeatureMap, margin: f64) {
        for i in 0..zt.pixels() {
            let d = zt.logit(i) - zs.logit(i);
            if d.abs() < 0.05 || (d.abs() - margin).abs() < 0.05 {
                let (x, y) = zt.flow(i);
                zt.set(i, [x, y, zt.logit(i) + 0.2]);
            }
        }
    }
}

pub mod flow_ref {
    use super::*;
    use ct_core::flowfollow::FollowConfig;
    use ct_core::synth::compute_flow_targets;
    use ct_core::LabelMask;

    /// Scalar step-by-step integrator: always runs every step.
    pub fn reference_endpoint(z: &FeatureMap, r: usize, c: usize, cfg: &FollowConfig) -> (f64, f64) {
        let (h, w) = (z.height(), z.width());
        let (fx, fy) = (z.channel(0), z.channel(1));
        let (mut y, mut x) = (r as f64, c as f64);
        for _ in 0..cfg.steps {
            let sy = y.clamp(0.0, (h - 1) as f64);
            let sx = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            let at = |ch: &[f64], yy: usize, xx: usize| ch[yy * w + xx];
            let vx = (at(fx, y0, x0) * (1.0 - tx) + at(fx, y0, x1) * tx) * (1.0 - ty)
                + (at(fx, y1, x0) * (1.0 - tx) + at(fx, y1, x1) * tx) * ty;
            let vy = (at(fy, y0, x0) * (1.0 - tx) + at(fy, y0, x1) * tx) * (1.0 - ty)
                + (at(fy, y1, x0) * (1.0 - tx) + at(fy, y1, x1) * tx) * ty;
            let n = vx.hypot(vy);
            if !(n >= 1e-6) {
                break;
            }
            y = (y + cfg.step_size * vy / n).clamp(0.0, (h - 1) as f64);
            x = (x + cfg.step_size * vx / n).clamp(0.0, (w - 1) as f64);
        }
        (y, x)
    }

    /// Endpoint grouping by union-find over endpoints whose bins touch
    /// (Chebyshev distance <= 1 in bin units), then size filtering.
    pub fn reference_segment(z: &FeatureMap, cfg: &FollowConfig) -> LabelMask {
        let (h, w) = (z.height(), z.width());
        let fg: Vec<usize> = (0..h * w).filter(|&i| z.logit(i) > cfg.threshold).collect();
        let bins: Vec<(i64, i64)> = fg
            .iter()
            .map(|&p| {
                let (y, x) = reference_endpoint(z, p / w, p % w, cfg);
                ((y as usize / cfg.bin_size) as i64, (x as usize / cfg.bin_size) as i64)
            })
            .collect();
        let mut parent: Vec<usize> = (0..fg.len()).collect();
        fn root(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                x = p[x];
            }
            x
        }
        for a in 0..fg.len() {
            for b in 0..a {
                if (bins[a].0 - bins[b].0).abs() <= 1 && (bins[a].1 - bins[b].1).abs() <= 1 {
                    let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                    parent[ra] = rb;
                }
            }
        }
        let mut ids = vec![0u32; h * w];
        for (k, &p) in fg.iter().enumerate() {
            ids[p] = root(&mut parent, k) as u32 + 1;
        }
        let mut counts = std::collections::HashMap::new();
        ids.iter().filter(|&&v| v != 0).for_each(|&v| *counts.entry(v).or_insert(0usize) += 1);
        for v in ids.iter_mut() {
            if *v != 0 && counts[v] < cfg.min_size {
                *v = 0;
            }
        }
        LabelMask::new(h, w, ids).unwrap().compacted()
    }

    /// Smooth random field: a sum of a few random attractors and repellers.
    pub fn random_field(rng: &mut ChaCha8Rng, n: usize) -> FeatureMap {
        let k = rng.random_range(1..5);
        let sources: Vec<(f64, f64, f64)> = (0..k)
            .map(|_| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64), rng.random_range(-1.0..1.0)))
            .collect();
        let mut z = FeatureMap::zeros(n, n);
        for i in 0..n * n {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let (mut fx, mut fy) = (0.0, 0.0);
            for &(cy, cx, s) in &sources {
                let d2 = (cy - y).powi(2) + (cx - x).powi(2) + 4.0;
                fx += s * (cx - x) / d2;
                fy += s * (cy - y) / d2;
            }
            let logit = rng.random_range(-1.0..3.0);
            z.set(i, [fx, fy, logit]);
        }
        z
    }

    pub fn features_from_mask(mask: &LabelMask) -> FeatureMap {
        let t = compute_flow_targets(mask);
        let mut z = FeatureMap::zeros(mask.height(), mask.width());
        for i in 0..t.pixels() {
            let (gx, gy) = t.flow(i);
            z.set(i, [gx, gy, if t.m[i] == 1 { 40.0 } else { -40.0 }]);
        }
        z
    }
}

pub mod metric_ref {
    use super::*;
    use ct_core::LabelMask;

    /// Mask painted with up to `max_inst` random rectangles (later ones
    /// overwrite earlier ones).
    pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, max_inst: u32) -> LabelMask {
        let mut ids = vec![0u32; n * n];
        let k = rng.random_range(0..=max_inst);
        for id in 1..=k {
            let (r0, c0) = (rng.random_range(0..n), rng.random_range(0..n));
            let (r1, c1) = ((r0 + rng.random_range(1..6)).min(n), (c0 + rng.random_range(1..6)).min(n));
            for r in r0..r1 {
                for c in c0..c1 {
                    ids[r * n + c] = id;
                }
            }
        }
        LabelMask::new(n, n, ids).unwrap()
    }

    pub fn iou_sets(a: &LabelMask, ia: u32, b: &LabelMask, ib: u32) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&x, &y) in a.ids().iter().zip(b.ids()) {
            let (pa, pb) = (x == ia, y == ib);
            inter += (pa && pb) as usize;
            union += (pa || pb) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Best `(total iou, pairs)` over every partial injection of predictions
    /// into GT instances using only pairs at or above the threshold.
    pub fn exhaustive(w: &[Vec<Option<f64>>], row: usize, used: &mut Vec<bool>) -> (f64, usize) {
        if row == w.len() {
            return (0.0, 0);
        }
        let mut best = exhaustive(w, row + 1, used);
        for j in 0..used.len() {
            if let (false, Some(v)) = (used[j], w[row][j]) {
                used[j] = true;
                let (t, c) = exhaustive(w, row + 1, used);
                used[j] = false;
                let cand = (t + v, c + 1);
                if cand.0 > best.0 + 1e-12 || ((cand.0 - best.0).abs() <= 1e-12 && cand.1 > best.1) {
                    best = cand;
                }
            }
        }
        best
    }

    pub fn ids_of(m: &LabelMask) -> Vec<u32> {
        (1..=m.max_id()).filter(|&i| m.contains(i)).collect()
    }
}
