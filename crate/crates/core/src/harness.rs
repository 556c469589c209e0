//! Experiment orchestration: synthetic source and shifted target datasets,
//! pretraining, adaptation variants, tiled evaluation and report files.
//!
//! Every stage is a pure function of the configuration and the run seed, so
//! two runs with the same configuration write byte-identical CSV files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flowfollow::{segment, FollowConfig};
use crate::grid::{FeatureMap, ImageGrid, LabelMask};
use crate::losses::ContrastiveConfig;
use crate::metrics::{default_thresholds, evaluate, mean_metrics, ImageMetrics};
use crate::model::{forward_sized, save_checkpoint, ModelParams};
use crate::pngio::{write_image, write_mask, write_rgb};
use crate::synth::{apply_domain_shift, generate_scene, SceneConfig, ShiftParams};
use crate::tiling::{stitch, TileLayout};
use crate::trainer::{self, adapt, build_source_pool, finetune, pretrain, select_shots, stream, TrainConfig, TrainLog};

/// Target shift given either by preset name or explicit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShiftSpec {
    Preset(String),
    Custom(ShiftParams),
}

impl ShiftSpec {
    pub fn resolve(&self) -> Result<ShiftParams> {
        match self {
            ShiftSpec::Preset(name) => ShiftParams::preset(name),
            ShiftSpec::Custom(p) => p.validate().map(|_| *p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene generator; its seed is replaced per scene.
    pub source: SceneConfig,
    pub target_shift: ShiftSpec,
    pub source_scenes: usize,
    /// Held-out unshifted scenes used to check pretraining.
    pub source_test_scenes: usize,
    /// Shifted scenes the shots are drawn from.
    pub target_train_scenes: usize,
    pub target_test_scenes: usize,
    pub train: TrainConfig,
    pub follow: FollowConfig,
    /// Minimum overlap between evaluation tiles.
    pub eval_overlap: usize,
    /// Shot counts of the K sweep.
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Write predicted masks and color overlays of the first test scene.
    pub overlays: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SceneConfig::default(),
            target_shift: ShiftSpec::Preset("focus_shift".into()),
            source_scenes: 12,
            source_test_scenes: 2,
            target_train_scenes: 2,
            target_test_scenes: 4,
            train: TrainConfig::default(),
            follow: FollowConfig::default(),
            eval_overlap: 84,
            k_values: vec![1, 2, 3, 5, 10],
            seeds: vec![0, 1, 2],
            output: PathBuf::from("runs/default"),
            overlays: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target_shift.resolve()?;
        self.train.validate()?;
        self.follow.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.source_scenes == 0 || self.target_train_scenes == 0 || self.target_test_scenes == 0 {
            return Err(Error::Config("every dataset split needs at least one scene".into()));
        }
        if self.eval_overlap >= self.train.tile {
            return Err(Error::Config("evaluation overlap must be smaller than the tile".into()));
        }
        if self.k_values.contains(&0) {
            return Err(Error::Config("K values must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub type Dataset = Vec<(ImageGrid, LabelMask)>;

#[derive(Debug, Clone)]
pub struct Datasets {
    pub source: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

const SPLIT_SOURCE: u64 = 11;
const SPLIT_SOURCE_TEST: u64 = 12;
const SPLIT_TARGET_TRAIN: u64 = 13;
const SPLIT_TARGET_TEST: u64 = 14;

/// Scene seeds of one split; splits never share a seed stream.
pub fn scene_seeds(run_seed: u64, split: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| stream(run_seed, &[split, i as u64]).random()).collect()
}

fn generate_split(
    cfg: &ExperimentConfig,
    run_seed: u64,
    split: u64,
    n: usize,
    shift: Option<&ShiftParams>,
) -> Result<Dataset> {
    scene_seeds(run_seed, split, n)
        .into_iter()
        .map(|seed| {
            let (img, mask) = generate_scene(&SceneConfig { seed, ..cfg.source.clone() })?;
            let img = match shift {
                Some(p) => apply_domain_shift(&img, p, seed ^ 0xd0_5eed)?,
                None => img,
            };
            Ok((img, mask))
        })
        .collect()
}

pub fn generate_datasets(cfg: &ExperimentConfig, run_seed: u64) -> Result<Datasets> {
    let shift = cfg.target_shift.resolve()?;
    Ok(Datasets {
        source: generate_split(cfg, run_seed, SPLIT_SOURCE, cfg.source_scenes, None)?,
        source_test: generate_split(cfg, run_seed, SPLIT_SOURCE_TEST, cfg.source_test_scenes, None)?,
        target_train: generate_split(cfg, run_seed, SPLIT_TARGET_TRAIN, cfg.target_train_scenes, Some(&shift))?,
        target_test: generate_split(cfg, run_seed, SPLIT_TARGET_TEST, cfg.target_test_scenes, Some(&shift))?,
    })
}

/// Whole-image prediction from overlapping tiles.
pub fn predict_tiled(params: &ModelParams, img: &ImageGrid, tile: usize, min_overlap: usize) -> Result<FeatureMap> {
    let layout = TileLayout::new(img.height(), img.width(), tile, min_overlap)?;
    let tiles = layout
        .extract(img)?
        .iter()
        .map(|t| forward_sized(params, t, tile).map(|(z, _)| z))
        .collect::<Result<Vec<_>>>()?;
    stitch(&tiles, &layout)
}

/// Segments every scene and scores it against its ground truth.
pub fn evaluate_model(
    params: &ModelParams,
    data: &[(ImageGrid, LabelMask)],
    cfg: &ExperimentConfig,
) -> Result<(Vec<ImageMetrics>, Vec<LabelMask>)> {
    let thresholds = default_thresholds();
    let mut metrics = Vec::with_capacity(data.len());
    let mut preds = Vec::with_capacity(data.len());
    for (img, gt) in data {
        let z = predict_tiled(params, img, cfg.train.tile, cfg.eval_overlap)?;
        let pred = segment(&z, &cfg.follow)?;
        metrics.push(evaluate(&pred, gt, &thresholds)?);
        preds.push(pred);
    }
    Ok((metrics, preds))
}

/// Model variant compared in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub k: usize,
    /// `None` evaluates the pretrained model as is.
    pub train: Option<TrainConfig>,
}

impl Variant {
    pub fn unadapted(base: &TrainConfig) -> Self {
        Self { name: "unadapted".into(), k: base.k, train: None }
    }

    fn with_losses(name: &str, base: &TrainConfig, gamma_mask: f64, gamma_flow: f64) -> Self {
        let contrastive = ContrastiveConfig { gamma_mask, gamma_flow, ..base.contrastive };
        Self { name: name.into(), k: base.k, train: Some(TrainConfig { contrastive, ..base.clone() }) }
    }

    pub fn adapted(base: &TrainConfig) -> Self {
        Self { name: "adapted".into(), k: base.k, train: Some(base.clone()) }
    }

    /// The five ablation rows: full method, each contrastive term removed,
    /// both removed (same schedule), and the unadapted model.
    pub fn ablation(base: &TrainConfig) -> Vec<Self> {
        let c = &base.contrastive;
        vec![
            Self::with_losses("full", base, c.gamma_mask, c.gamma_flow),
            Self::with_losses("no_cf", base, c.gamma_mask, 0.0),
            Self::with_losses("no_cm", base, 0.0, c.gamma_flow),
            Self::with_losses("no_adaptation_losses", base, 0.0, 0.0),
            Self::unadapted(base),
        ]
    }

    pub fn k_shot(base: &TrainConfig, k: usize) -> Self {
        Self { name: format!("k{k}"), k, train: Some(TrainConfig { k, ..base.clone() }) }
    }
}

/// Aggregate row of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub seed: u64,
    pub variant: String,
    pub k: usize,
    pub metrics: ImageMetrics,
}

impl ReportRow {
    pub fn ap50(&self) -> f64 {
        self.metrics.ap_at(0.5).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SeedOutcome {
    pub rows: Vec<ReportRow>,
    /// Training logs keyed by variant name.
    pub logs: BTreeMap<String, TrainLog>,
    pub pretrain_log: TrainLog,
    /// Mean metrics of the pretrained model on held-out source scenes.
    pub source_metrics: Option<ImageMetrics>,
    /// Shot cells as `(scene, id)` in draw order for the largest K used.
    pub shot_cells: Vec<(usize, u32)>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every variant for one seed on a shared pretrained model. Variants
/// with identical training configurations are trained once.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, variants: &[Variant], out: Option<&Path>) -> Result<SeedOutcome> {
    let data = stage("data", generate_datasets(cfg, seed))?;
    let base = TrainConfig { seed, ..cfg.train.clone() };
    let (params0, pretrain_log) = stage("pretrain", pretrain(&data.source, &base))?;
    if let Some(dir) = out {
        let ck = pretrained_checkpoint(dir, seed);
        stage("pretrain", save_checkpoint(&ck, &params0, seed, base.pretrain_epochs))?;
    }
    let mut outcome = SeedOutcome { pretrain_log, ..Default::default() };
    if !data.source_test.is_empty() {
        let (m, _) = stage("evaluate", evaluate_model(&params0, &data.source_test, cfg))?;
        outcome.source_metrics = Some(stage("evaluate", mean_metrics(&m))?);
    }
    let max_k = variants.iter().filter(|v| v.train.is_some()).map(|v| v.k).max().unwrap_or(0);
    let (shots, pool) = if max_k > 0 {
        let shots = stage("shots", select_shots(&data.target_train, max_k, &base))?;
        outcome.shot_cells = stage("shots", trainer::shot_cells(&data.target_train, max_k, &base))?;
        (shots, stage("pool", build_source_pool(&data.source, &base))?)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut trained: Vec<(TrainConfig, ModelParams)> = Vec::new();
    for v in variants {
        let params = match &v.train {
            None => params0.clone(),
            Some(t) => {
                let t = TrainConfig { seed, ..t.clone() };
                if let Some((_, p)) = trained.iter().find(|(c, _)| *c == t) {
                    p.clone()
                } else {
                    let shots = &shots[..v.k];
                    let (p, mut log) = stage("adapt", adapt(&params0, &pool, shots, &t))?;
                    let (p, ft_log) = stage("finetune", finetune(&p, shots, &t))?;
                    log.extend(ft_log);
                    outcome.logs.insert(v.name.clone(), log);
                    trained.push((t, p.clone()));
                    p
                }
            }
        };
        let (per_image, preds) = stage("evaluate", evaluate_model(&params, &data.target_test, cfg))?;
        if let (Some(dir), true) = (out, cfg.overlays) {
            let (img, _) = &data.target_test[0];
            stage("overlay", write_overlay_set(dir, seed, &v.name, img, &preds[0]))?;
        }
        outcome.rows.push(ReportRow {
            seed,
            variant: v.name.clone(),
            k: v.k,
            metrics: stage("evaluate", mean_metrics(&per_image))?,
        });
    }
    Ok(outcome)
}

/// Where [`run_seed`] stores the pretrained model of a seed.
pub fn pretrained_checkpoint(dir: &Path, seed: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("seed{seed}_pretrained"))
}

/// Stable color of an instance id.
fn instance_color(id: u32) -> [u8; 3] {
    let mut x = (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 29;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 32;
    [64 + (x & 0xbf) as u8, 64 + ((x >> 8) & 0xbf) as u8, 64 + ((x >> 16) & 0xbf) as u8]
}

/// Grayscale image with each instance tinted by its id color and instance
/// borders drawn fully saturated. Returns packed RGB bytes.
pub fn render_overlay(img: &ImageGrid, mask: &LabelMask) -> Result<Vec<u8>> {
    let (h, w) = (img.height(), img.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape("overlay image and mask differ in size".into()));
    }
    let mut rgb = Vec::with_capacity(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            let g = (img.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
            let id = mask.get(r, c);
            if id == 0 {
                rgb.extend([g; 3]);
                continue;
            }
            let border = [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dr, dc)| {
                let (rr, cc) = ((r + dr).wrapping_sub(1), (c + dc).wrapping_sub(1));
                rr >= h || cc >= w || mask.get(rr, cc) != id
            });
            let col = instance_color(id);
            if border {
                rgb.extend(col);
            } else {
                rgb.extend(col.map(|v| ((v as u16 + g as u16) / 2) as u8));
            }
        }
    }
    Ok(rgb)
}

fn overlay_paths(dir: &Path, seed: u64, variant: &str) -> (PathBuf, PathBuf, PathBuf) {
    let stem = dir.join("overlays").join(format!("seed{seed}_{variant}"));
    (stem.with_extension("image.png"), stem.with_extension("mask.png"), stem.with_extension("overlay.png"))
}

fn write_overlay_set(dir: &Path, seed: u64, variant: &str, img: &ImageGrid, mask: &LabelMask) -> Result<()> {
    let (img_path, mask_path, overlay_path) = overlay_paths(dir, seed, variant);
    let parent = img_path.parent().expect("overlay path has a parent");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    write_image(&img_path, img)?;
    write_mask(&mask_path, mask)?;
    write_rgb(&overlay_path, img.width(), img.height(), &render_overlay(img, mask)?)
}

/// Re-renders an overlay PNG from the stored image and mask files.
pub fn rerender_overlay(dir: &Path, seed: u64, variant: &str) -> Result<()> {
    let (img_path, mask_path, overlay_path) = overlay_paths(dir, seed, variant);
    let img = crate::pngio::read_image(&img_path)?;
    let mask = crate::pngio::read_mask(&mask_path)?;
    write_rgb(&overlay_path, img.width(), img.height(), &render_overlay(&img, &mask)?)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
}

pub fn write_manifest(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash()?,
        seeds: &cfg.seeds,
        config: cfg,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))
}

fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    let thresholds = rows.first().map(|r| r.metrics.thresholds.clone()).unwrap_or_else(default_thresholds);
    let mut header: Vec<String> = vec!["seed".into(), "variant".into(), "k".into()];
    header.extend(thresholds.iter().map(|t| format!("ap@{t:.2}")));
    header.extend(["aji", "pixel_f1", "object_f1"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.seed.to_string(), r.variant.clone(), r.k.to_string()];
        rec.extend(r.metrics.ap.iter().map(|v| v.to_string()));
        rec.extend([r.metrics.aji, r.metrics.pixel_f1, r.metrics.object_f1].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Per-image metric rows followed by a `mean` row over all images.
pub fn write_metrics_csv(path: &Path, rows: &[(String, ImageMetrics)]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no images to report".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header: Vec<String> = vec!["image".into()];
    header.extend(rows[0].1.thresholds.iter().map(|t| format!("ap@{t:.2}")));
    header.extend(["aji", "pixel_f1", "object_f1"].map(String::from));
    w.write_record(&header)?;
    let items: Vec<ImageMetrics> = rows.iter().map(|r| r.1.clone()).collect();
    let mean = mean_metrics(&items)?;
    for (name, m) in rows.iter().map(|(n, m)| (n.as_str(), m)).chain(std::iter::once(("mean", &mean))) {
        let mut rec = vec![name.to_string()];
        rec.extend(m.ap.iter().map(|v| v.to_string()));
        rec.extend([m.aji, m.pixel_f1, m.object_f1].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Median of a nonempty list; mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds of AP at every threshold, one row per variant.
fn write_curve(
    path: &Path,
    rows: &[ReportRow],
    key: &str,
    select: impl Fn(&ReportRow) -> Option<String>,
) -> Result<()> {
    let mut groups: Vec<(String, Vec<&ReportRow>)> = Vec::new();
    for r in rows {
        let Some(label) = select(r) else { continue };
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, g)) => g.push(r),
            None => groups.push((label, vec![r])),
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record([key, "iou_threshold", "ap_median", "ap_mean", "seeds"])?;
    for (label, g) in &groups {
        for (i, t) in g[0].metrics.thresholds.iter().enumerate() {
            let aps: Vec<f64> = g.iter().map(|r| r.metrics.ap[i]).collect();
            let mean = aps.iter().sum::<f64>() / aps.len() as f64;
            w.write_record([
                label.clone(),
                format!("{t:.2}"),
                median(&aps).to_string(),
                mean.to_string(),
                aps.len().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_logs(dir: &Path, seed: u64, o: &SeedOutcome) -> Result<()> {
    let logs = dir.join("logs");
    fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
    o.pretrain_log.write_epoch_csv(&logs.join(format!("seed{seed}_pretrain.csv")))?;
    for (name, log) in &o.logs {
        log.write_csv(&logs.join(format!("seed{seed}_{name}.csv")))?;
    }
    Ok(())
}

/// Everything a report run produced.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub rows: Vec<ReportRow>,
    pub seeds: Vec<SeedOutcome>,
}

impl RunSummary {
    /// Median AP@0.5 over seeds of one variant.
    pub fn median_ap50(&self, variant: &str) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(ReportRow::ap50).collect();
        median(&v)
    }
}

/// Runs `variants` for every seed and writes `report.csv`, `ap_curve.csv`,
/// `ap_vs_K.csv` (when any `k*` variant ran), training logs, overlays and
/// `manifest.json` under the configured output directory.
pub fn run_variants(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(cfg, dir)?;
    let mut summary = RunSummary::default();
    for &seed in &cfg.seeds {
        let o = run_seed(cfg, seed, variants, Some(dir))?;
        write_logs(dir, seed, &o)?;
        summary.rows.extend(o.rows.iter().cloned());
        summary.seeds.push(o);
        write_report(dir, &summary.rows)?;
    }
    let is_k = |r: &ReportRow| r.variant.starts_with('k') && r.variant[1..].parse::<usize>().is_ok();
    write_curve(&dir.join("ap_curve.csv"), &summary.rows, "variant", |r| (!is_k(r)).then(|| r.variant.clone()))?;
    if summary.rows.iter().any(is_k) {
        write_curve(&dir.join("ap_vs_K.csv"), &summary.rows, "k", |r| is_k(r).then(|| r.k.to_string()))?;
    }
    Ok(summary)
}

pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_variants(cfg, &[Variant::unadapted(&cfg.train), Variant::adapted(&cfg.train)])
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_variants(cfg, &Variant::ablation(&cfg.train))
}

pub fn run_kshot_sweep(cfg: &ExperimentConfig, k_values: &[usize]) -> Result<RunSummary> {
    if k_values.is_empty() {
        return Err(Error::Config("K sweep needs at least one K".into()));
    }
    let variants: Vec<Variant> = k_values.iter().map(|&k| Variant::k_shot(&cfg.train, k)).collect();
    run_variants(cfg, &variants)
}

/// Persists scenes as PNG images, 16-bit PNG masks and CTT tensors plus a
/// JSON manifest of seeds and shift parameters.
pub fn save_scenes(dir: &Path, cfg: &ExperimentConfig, run_seed: u64) -> Result<Datasets> {
    use crate::ctt::Tensor;
    let data = generate_datasets(cfg, run_seed)?;
    let shift = cfg.target_shift.resolve()?;
    let splits = [
        ("source", SPLIT_SOURCE, &data.source, None),
        ("source_test", SPLIT_SOURCE_TEST, &data.source_test, None),
        ("target_train", SPLIT_TARGET_TRAIN, &data.target_train, Some(shift)),
        ("target_test", SPLIT_TARGET_TEST, &data.target_test, Some(shift)),
    ];
    let mut manifest = Vec::new();
    for (name, split, scenes, shift) in splits {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let seeds = scene_seeds(run_seed, split, scenes.len());
        for (i, (img, mask)) in scenes.iter().enumerate() {
            write_image(sub.join(format!("{i:03}_image.png")), img)?;
            write_mask(sub.join(format!("{i:03}_mask.png")), mask)?;
            Tensor::from(img).write(sub.join(format!("{i:03}_image.ctt")))?;
            Tensor::from(mask).write(sub.join(format!("{i:03}_mask.ctt")))?;
        }
        manifest.push(serde_json::json!({ "split": name, "scene_seeds": seeds, "shift": shift }));
    }
    let doc = serde_json::json!({ "run_seed": run_seed, "scene": cfg.source, "splits": manifest });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(data)
}
