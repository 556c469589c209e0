//! Instance-level evaluation: IoU matching, AP over IoU thresholds, AJI,
//! pixel-F1 and object-F1.
//!
//! AP at threshold `t` is `TP / (TP + FP + FN)` under an optimal one-to-one
//! matching. Both masks are relabelled to first-touch row-major order before
//! any order-dependent step, so every metric ignores the particular ids used.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelMask;

/// IoU thresholds reported by default: 0.50, 0.55, ..., 0.90.
pub fn default_thresholds() -> Vec<f64> {
    (0..9).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn check_dims(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "masks differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Pairwise overlaps between the instances of two masks.
#[derive(Debug, Clone)]
pub struct Overlaps {
    /// Pixel count of each prediction id (index = id).
    pub pred_area: Vec<usize>,
    pub gt_area: Vec<usize>,
    /// Intersection sizes of overlapping pairs `(pred, gt)`.
    pub inter: BTreeMap<(u32, u32), usize>,
}

impl Overlaps {
    pub fn new(pred: &LabelMask, gt: &LabelMask) -> Result<Self> {
        check_dims(pred, gt)?;
        let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if p != 0 && g != 0 {
                *inter.entry((p, g)).or_default() += 1;
            }
        }
        Ok(Self { pred_area: pred.counts(), gt_area: gt.counts(), inter: inter.into_iter().collect() })
    }

    pub fn iou(&self, p: u32, g: u32) -> f64 {
        let i = self.inter.get(&(p, g)).copied().unwrap_or(0);
        if i == 0 {
            return 0.0;
        }
        i as f64 / (self.pred_area[p as usize] + self.gt_area[g as usize] - i) as f64
    }
}

/// Dense IoU matrix with rows for predicted ids and columns for GT ids, both
/// listed in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    pub pred_ids: Vec<u32>,
    pub gt_ids: Vec<u32>,
    pub values: Vec<Vec<f64>>,
}

fn present_ids(mask: &LabelMask) -> Vec<u32> {
    mask.counts().iter().enumerate().skip(1).filter(|(_, &c)| c > 0).map(|(i, _)| i as u32).collect()
}

pub fn instance_iou_matrix(pred: &LabelMask, gt: &LabelMask) -> Result<IouMatrix> {
    let ov = Overlaps::new(pred, gt)?;
    let pred_ids = present_ids(pred);
    let gt_ids = present_ids(gt);
    let values = pred_ids.iter().map(|&p| gt_ids.iter().map(|&g| ov.iou(p, g)).collect()).collect();
    Ok(IouMatrix { pred_ids, gt_ids, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Matched `(pred id, gt id, iou)` after canonical relabelling.
    pub pairs: Vec<(u32, u32, f64)>,
}

/// Maximum-weight assignment on a dense `rows x cols` weight matrix
/// (`rows <= cols`). Returns the column assigned to each row.
fn hungarian(weight: &[Vec<f64>]) -> Vec<usize> {
    let n = weight.len();
    let m = weight.first().map_or(0, |r| r.len());
    debug_assert!(n <= m);
    // Shortest augmenting paths with potentials on cost = -weight;
    // 1-based indices, column 0 is a sentinel.
    let cost = |i: usize, j: usize| -weight[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// One-to-one matching maximizing the total IoU over pairs whose IoU is at
/// least `threshold`. Independent groups of overlapping instances are
/// solved separately.
pub fn match_instances(pred: &LabelMask, gt: &LabelMask, threshold: f64) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Domain(format!("IoU threshold {threshold} outside (0, 1]")));
    }
    let (pred, gt) = (pred.compacted(), gt.compacted());
    let ov = Overlaps::new(&pred, &gt)?;
    let (np, ng) = (pred.max_id() as usize, gt.max_id() as usize);

    // Eligible edges and connected components over pred (0..np) and gt
    // (np..np+ng) nodes.
    let edges: Vec<(u32, u32, f64)> =
        ov.inter.keys().map(|&(p, g)| (p, g, ov.iou(p, g))).filter(|&(_, _, iou)| iou >= threshold).collect();
    let mut parent: Vec<usize> = (0..np + ng).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut y = x;
        while parent[y] != r {
            let next = parent[y];
            parent[y] = r;
            y = next;
        }
        r
    }
    for &(p, g, _) in &edges {
        let (a, b) = (find(&mut parent, p as usize - 1), find(&mut parent, np + g as usize - 1));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<(u32, u32, f64)>> = BTreeMap::new();
    for &e in &edges {
        let root = find(&mut parent, e.0 as usize - 1);
        groups.entry(root).or_default().push(e);
    }

    let mut pairs = Vec::new();
    for group in groups.values() {
        if group.len() == 1 {
            pairs.push(group[0]);
            continue;
        }
        let mut ps: Vec<u32> = group.iter().map(|e| e.0).collect();
        let mut gs: Vec<u32> = group.iter().map(|e| e.1).collect();
        ps.sort_unstable();
        ps.dedup();
        gs.sort_unstable();
        gs.dedup();
        let lookup: HashMap<(u32, u32), f64> = group.iter().map(|&(p, g, w)| ((p, g), w)).collect();
        let transpose = ps.len() > gs.len();
        let (rows, cols) = if transpose { (&gs, &ps) } else { (&ps, &gs) };
        let w: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| {
                cols.iter()
                    .map(|&c| {
                        let key = if transpose { (c, r) } else { (r, c) };
                        lookup.get(&key).copied().unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect();
        for (ri, ci) in hungarian(&w).into_iter().enumerate() {
            if w[ri][ci] > 0.0 {
                let (p, g) = if transpose { (cols[ci], rows[ri]) } else { (rows[ri], cols[ci]) };
                pairs.push((p, g, w[ri][ci]));
            }
        }
    }
    pairs.sort_by_key(|&(p, g, _)| (p, g));
    let tp = pairs.len();
    Ok(MatchResult { threshold, tp, fp: np - tp, fn_: ng - tp, pairs })
}

/// `TP / (TP + FP + FN)`, with 1 for two empty masks.
pub fn ap_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        tp as f64 / denom as f64
    }
}

/// AP at each threshold for one image.
pub fn average_precision(pred: &LabelMask, gt: &LabelMask, thresholds: &[f64]) -> Result<Vec<f64>> {
    thresholds.iter().map(|&t| match_instances(pred, gt, t).map(|m| ap_from_counts(m.tp, m.fp, m.fn_))).collect()
}

/// Aggregated Jaccard index with GT processed in canonical order and ties
/// going to the lower canonical prediction id.
pub fn aji(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let (pred, gt) = (pred.compacted(), gt.compacted());
    let ov = Overlaps::new(&pred, &gt)?;
    let (np, ng) = (pred.max_id() as usize, gt.max_id() as usize);
    if ng == 0 {
        return Ok(if np == 0 { 1.0 } else { 0.0 });
    }
    let mut by_gt: Vec<Vec<(u32, usize)>> = vec![Vec::new(); ng + 1];
    for (&(p, g), &i) in &ov.inter {
        by_gt[g as usize].push((p, i));
    }
    let mut used = vec![false; np + 1];
    let (mut num, mut den) = (0usize, 0usize);
    for g in 1..=ng {
        let mut best: Option<(f64, u32, usize)> = None;
        for &(p, i) in &by_gt[g] {
            if used[p as usize] {
                continue;
            }
            let iou = ov.iou(p, g as u32);
            if best.is_none_or(|(b, bp, _)| iou > b || (iou == b && p < bp)) {
                best = Some((iou, p, i));
            }
        }
        match best {
            Some((_, p, i)) => {
                used[p as usize] = true;
                num += i;
                den += ov.pred_area[p as usize] + ov.gt_area[g] - i;
            }
            None => den += ov.gt_area[g],
        }
    }
    den += (1..=np).filter(|&p| !used[p]).map(|p| ov.pred_area[p]).sum::<usize>();
    Ok(num as f64 / den as f64)
}

/// Foreground/background F1 over pixels.
pub fn pixel_f1(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1(tp, fp, fn_))
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// `2TP / (2TP + FP + FN)` under [`match_instances`].
pub fn object_f1(pred: &LabelMask, gt: &LabelMask, threshold: f64) -> Result<f64> {
    let m = match_instances(pred, gt, threshold)?;
    Ok(f1(m.tp, m.fp, m.fn_))
}

/// All metrics of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub aji: f64,
    pub pixel_f1: f64,
    pub object_f1: f64,
}

impl ImageMetrics {
    /// AP at the threshold closest to `t`.
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| (x - t).abs() < 1e-9).map(|i| self.ap[i])
    }
}

pub fn evaluate(pred: &LabelMask, gt: &LabelMask, thresholds: &[f64]) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        thresholds: thresholds.to_vec(),
        ap: average_precision(pred, gt, thresholds)?,
        aji: aji(pred, gt)?,
        pixel_f1: pixel_f1(pred, gt)?,
        object_f1: object_f1(pred, gt, 0.5)?,
    })
}

/// Per-image average of every metric.
pub fn mean_metrics(items: &[ImageMetrics]) -> Result<ImageMetrics> {
    let first = items.first().ok_or_else(|| Error::EmptyInput("no images to average".into()))?;
    let n = items.len() as f64;
    let mut ap = vec![0.0; first.ap.len()];
    for m in items {
        if m.thresholds != first.thresholds {
            return Err(Error::Shape("images evaluated at different thresholds".into()));
        }
        ap.iter_mut().zip(&m.ap).for_each(|(a, b)| *a += b / n);
    }
    Ok(ImageMetrics {
        thresholds: first.thresholds.clone(),
        ap,
        aji: items.iter().map(|m| m.aji).sum::<f64>() / n,
        pixel_f1: items.iter().map(|m| m.pixel_f1).sum::<f64>() / n,
        object_f1: items.iter().map(|m| m.object_f1).sum::<f64>() / n,
    })
}
