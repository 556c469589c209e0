//! Pretraining, K-shot adaptation and fine-tuning.
//!
//! Every random draw comes from a ChaCha stream keyed by the master seed and
//! the position of the draw (stage, epoch, step, slot), so results depend
//! only on the configuration and data.

mod patch;

pub use patch::{
    augment, augment_with, extract_shot, random_crop, resample_image, resample_mask, shot_crop_side, AugmentParams,
    Patch, ShotPatch, Window,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, ImageGrid, LabelMask};
use crate::losses::{loss_is, loss_isa, ContrastiveConfig, PairBatch, Reduction};
use crate::model::{backward, forward_sized, sgd_step, ModelParams, OptimizerState, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Patch side `w`.
    pub tile: usize,
    /// Nominal cell size `m_n`.
    pub nominal_size: f64,
    pub beta_max: f64,
    pub crop_range: [f64; 2],
    pub sgd: SgdConfig,
    /// Pairs (adaptation) or patches (pretraining, fine-tuning) per step.
    pub batch_size: usize,
    pub adapt_epochs: usize,
    pub finetune_epochs: usize,
    /// Learning-rate divisor applied after each adaptation epoch.
    pub lr_decay: f64,
    pub k: usize,
    pub seed: u64,
    /// Number of fixed source crops paired with the shots.
    pub pool_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_steps_per_epoch: usize,
    pub contrastive: ContrastiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tile: 112,
            nominal_size: 30.0,
            beta_max: 1.25,
            crop_range: [0.75, 1.25],
            sgd: SgdConfig::default(),
            batch_size: 2,
            adapt_epochs: 5,
            finetune_epochs: 5,
            lr_decay: 10.0,
            k: 3,
            seed: 0,
            pool_size: 512,
            pretrain_epochs: 20,
            pretrain_steps_per_epoch: 32,
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.tile < 2 || !self.tile.is_multiple_of(2) {
            return bad("tile must be even and at least 2");
        }
        if !(self.nominal_size > 0.0 && self.beta_max > 0.0) {
            return bad("nominal size and beta_max must be positive");
        }
        if !(self.crop_range[0] > 0.0 && self.crop_range[0] <= self.crop_range[1]) {
            return bad("crop range must satisfy 0 < lo <= hi");
        }
        if self.batch_size == 0 || self.k == 0 || self.pool_size == 0 {
            return bad("batch size, K and pool size must be positive");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr decay must be positive");
        }
        if !(self.sgd.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        self.contrastive.validate()
    }

    /// Learning rate of every adaptation epoch followed by every
    /// fine-tuning epoch. Fine-tuning keeps the last adaptation rate.
    pub fn lr_schedule(&self) -> Vec<f64> {
        let adapt: Vec<f64> = (0..self.adapt_epochs).map(|e| self.sgd.lr / self.lr_decay.powi(e as i32)).collect();
        let ft = adapt.last().copied().unwrap_or(self.sgd.lr);
        adapt.into_iter().chain(std::iter::repeat_n(ft, self.finetune_epochs)).collect()
    }
}

/// Stage tags for random streams.
const PRETRAIN: u64 = 1;
const POOL: u64 = 2;
const ADAPT: u64 = 3;
const FINETUNE: u64 = 4;
const SHOTS: u64 = 5;
const INIT: u64 = 6;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent random stream for a draw identified by `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Adapt,
    Finetune,
}

/// One optimizer step; losses are means over the step's batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_is: f64,
    pub l_cf: f64,
    pub l_cm: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_total: f64,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    /// Mean total loss per (stage, epoch) in log order.
    pub fn epoch_means(&self) -> Vec<EpochRecord> {
        let mut out: Vec<EpochRecord> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(e) if e.stage == r.stage && e.epoch == r.epoch => {
                    e.mean_total += r.total;
                    e.steps += 1;
                }
                _ => out.push(EpochRecord { stage: r.stage, epoch: r.epoch, lr: r.lr, steps: 1, mean_total: r.total }),
            }
        }
        out.iter_mut().for_each(|e| e.mean_total /= e.steps as f64);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.records)
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.epoch_means())
    }
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Adds `scale * grad(loss)` for one patch to `acc` and returns the loss.
fn accumulate_is(
    params: &ModelParams,
    patch: &Patch,
    cfg: &TrainConfig,
    scale: f64,
    acc: &mut ModelParams,
) -> Result<f64> {
    let (z, cache) = forward_sized(params, &patch.image, cfg.tile)?;
    let (loss, grad) = loss_is(&z, &patch.labels, cfg.contrastive.nu)?;
    let grad = reduce(grad, patch, cfg.contrastive.is_reduction);
    let g = backward(params, &cache, &grad.scaled(scale))?;
    acc.axpy(1.0, &g);
    Ok(match cfg.contrastive.is_reduction {
        Reduction::Sum => loss,
        Reduction::Mean => loss / patch.labels.pixels() as f64,
    })
}

fn reduce(grad: FeatureMap, patch: &Patch, r: Reduction) -> FeatureMap {
    match r {
        Reduction::Sum => grad,
        Reduction::Mean => grad.scaled(1.0 / patch.labels.pixels() as f64),
    }
}

pub type Dataset = [(ImageGrid, LabelMask)];

/// Trains from a seeded initialization on random source crops with flips,
/// minimizing the instance-segmentation loss at a constant learning rate.
pub fn pretrain(source: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config("pretraining needs at least one source scene".into()));
    }
    let mut params = ModelParams::init(stream(cfg.seed, &[INIT]).random());
    let mut opt = OptimizerState::new(cfg.sgd)?;
    let mut log = TrainLog::default();
    let scale = 1.0 / cfg.batch_size as f64;
    let mut step = 0;
    for epoch in 1..=cfg.pretrain_epochs {
        for _ in 0..cfg.pretrain_steps_per_epoch {
            let mut grads = ModelParams::zeros();
            let mut total = 0.0;
            for slot in 0..cfg.batch_size {
                let mut rng = stream(cfg.seed, &[PRETRAIN, epoch as u64, step as u64, slot as u64]);
                let (img, mask) = &source[rng.random_range(0..source.len())];
                let crop = random_crop(img, mask, cfg.tile, &mut rng)?;
                let a =
                    AugmentParams { factor: 1.0, offset: (0.0, 0.0), ..AugmentParams::sample(&mut rng, [1.0, 1.0]) };
                let patch = augment_with(&crop, 1.0, &a)?;
                total += accumulate_is(&params, &patch, cfg, scale, &mut grads)? * scale;
            }
            sgd_step(&mut params, &grads, &mut opt)?;
            step += 1;
            log.records.push(StepRecord {
                stage: Stage::Pretrain,
                step,
                epoch,
                lr: opt.lr,
                l_is: total,
                l_cf: 0.0,
                l_cm: 0.0,
                total,
            });
        }
    }
    Ok((params, log))
}

/// Fixed pool of native-scale source crops used during adaptation.
pub fn build_source_pool(source: &Dataset, cfg: &TrainConfig) -> Result<Vec<Patch>> {
    if source.is_empty() {
        return Err(Error::Config("source pool needs at least one scene".into()));
    }
    (0..cfg.pool_size)
        .map(|i| {
            let mut rng = stream(cfg.seed, &[POOL, i as u64]);
            let (img, mask) = &source[rng.random_range(0..source.len())];
            random_crop(img, mask, cfg.tile, &mut rng)
        })
        .collect()
}

/// Draws `k` distinct annotated cells from the target training scenes as
/// `(scene, id)`. The draw order is fixed per seed, so the cells for `k`
/// are a prefix of the cells for any larger `k`.
pub fn shot_cells(target: &Dataset, k: usize, cfg: &TrainConfig) -> Result<Vec<(usize, u32)>> {
    let mut cells: Vec<(usize, u32)> = target
        .iter()
        .enumerate()
        .flat_map(|(s, (_, m))| (1..=m.max_id()).filter(|&id| m.contains(id)).map(move |id| (s, id)))
        .collect();
    if k == 0 || k > cells.len() {
        return Err(Error::Config(format!("K = {k} but {} annotated cells are available", cells.len())));
    }
    cells.shuffle(&mut stream(cfg.seed, &[SHOTS]));
    cells.truncate(k);
    Ok(cells)
}

/// Shot patches for the cells chosen by [`shot_cells`].
pub fn select_shots(target: &Dataset, k: usize, cfg: &TrainConfig) -> Result<Vec<ShotPatch>> {
    shot_cells(target, k, cfg)?.into_iter().map(|(s, id)| extract_shot(&target[s].0, &target[s].1, id, cfg)).collect()
}

/// Splits a shuffled pool into `k` groups of near-equal size and pairs each
/// crop with its group's shot. Returns `(shot, crop)` pairs in random order.
pub fn pair_epoch<R: Rng>(pool_len: usize, k: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..pool_len).collect();
    order.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> =
        order.iter().enumerate().map(|(pos, &crop)| (pos * k / pool_len, crop)).collect();
    pairs.shuffle(rng);
    pairs
}

/// Contrastive adaptation: every source crop is paired with one shot per
/// epoch and each pair contributes one adaptation loss term.
pub fn adapt(
    params: &ModelParams,
    pool: &[Patch],
    shots: &[ShotPatch],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::Config("adaptation needs at least one shot".into()));
    }
    if pool.is_empty() {
        return Err(Error::Config("adaptation needs a nonempty source pool".into()));
    }
    let k = shots.len();
    let schedule = cfg.lr_schedule();
    let contrastive = cfg.contrastive.gamma_flow != 0.0 || cfg.contrastive.gamma_mask != 0.0;
    let mut params = params.clone();
    let mut opt = OptimizerState::new(cfg.sgd)?;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.adapt_epochs {
        opt.lr = schedule[epoch - 1];
        let pairs = pair_epoch(pool.len(), k, &mut stream(cfg.seed, &[ADAPT, epoch as u64]));
        for (b, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = ModelParams::zeros();
            let mut sums = [0.0; 4];
            for (slot, &(shot, crop)) in batch.iter().enumerate() {
                let mut rng = stream(cfg.seed, &[ADAPT, epoch as u64, b as u64, slot as u64]);
                let target = augment(&shots[shot].patch, cfg.beta_max, cfg.crop_range, &mut rng)?;
                let source = &pool[crop];
                let (zt, cache) = forward_sized(&params, &target.image, cfg.tile)?;
                let zs = if contrastive {
                    forward_sized(&params, &source.image, cfg.tile)?.0
                } else {
                    FeatureMap::zeros(cfg.tile, cfg.tile)
                };
                let out = loss_isa(
                    &PairBatch { target_z: &zt, target: &target.labels, source_z: &zs, source: &source.labels },
                    &cfg.contrastive,
                )?;
                let g = backward(&params, &cache, &out.grad.scaled(scale))?;
                grads.axpy(1.0, &g);
                for (s, v) in sums.iter_mut().zip([out.is * out.scale, out.cf, out.cm, out.total]) {
                    *s += v * scale;
                }
            }
            sgd_step(&mut params, &grads, &mut opt)?;
            step += 1;
            log.records.push(StepRecord {
                stage: Stage::Adapt,
                step,
                epoch,
                lr: opt.lr,
                l_is: sums[0],
                l_cf: sums[1],
                l_cm: sums[2],
                total: sums[3],
            });
        }
    }
    Ok((params, log))
}

/// Instance-segmentation loss on augmented shots only, at the constant
/// rate that ends the adaptation schedule.
pub fn finetune(params: &ModelParams, shots: &[ShotPatch], cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let mut params = params.clone();
    let mut log = TrainLog::default();
    if cfg.finetune_epochs == 0 || shots.is_empty() {
        return Ok((params, log));
    }
    let schedule = cfg.lr_schedule();
    let mut opt = OptimizerState::new(cfg.sgd)?;
    let batch_size = cfg.batch_size.min(shots.len());
    let mut step = 0;
    for e in 0..cfg.finetune_epochs {
        let epoch = cfg.adapt_epochs + e + 1;
        opt.lr = schedule[epoch - 1];
        let mut order: Vec<usize> = (0..shots.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[FINETUNE, epoch as u64]));
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = ModelParams::zeros();
            let mut total = 0.0;
            for (slot, &shot) in batch.iter().enumerate() {
                let mut rng = stream(cfg.seed, &[FINETUNE, epoch as u64, b as u64, slot as u64]);
                let patch = augment(&shots[shot].patch, cfg.beta_max, cfg.crop_range, &mut rng)?;
                total += accumulate_is(&params, &patch, cfg, scale, &mut grads)? * scale;
            }
            sgd_step(&mut params, &grads, &mut opt)?;
            step += 1;
            log.records.push(StepRecord {
                stage: Stage::Finetune,
                step,
                epoch,
                lr: opt.lr,
                l_is: total,
                l_cf: 0.0,
                l_cm: 0.0,
                total,
            });
        }
    }
    Ok((params, log))
}

/// Mean instance-segmentation loss of `params` on the unaugmented shots.
pub fn shot_loss(params: &ModelParams, shots: &[ShotPatch], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in shots {
        let (z, _) = forward_sized(params, &s.patch.image, cfg.tile)?;
        let (l, _) = loss_is(&z, &s.patch.labels, cfg.contrastive.nu)?;
        total += l / s.patch.labels.pixels() as f64;
    }
    Ok(total / shots.len().max(1) as f64)
}
