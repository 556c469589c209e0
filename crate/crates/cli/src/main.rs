//! `ct`: synthetic data, training, segmentation, evaluation and experiment
//! runs from the command line.
//!
//! Exit codes: 0 on success, 2 on invalid arguments or configuration, 3 on
//! any failure while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ct_core::ctt::Tensor;
use ct_core::flowfollow::segment;
use ct_core::harness::{
    generate_datasets, predict_tiled, render_overlay, run_ablation, run_benchmark, run_kshot_sweep, save_scenes,
    write_metrics_csv, ExperimentConfig, RunSummary,
};
use ct_core::metrics::{default_thresholds, evaluate};
use ct_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use ct_core::pngio::{read_image, read_mask, write_mask, write_rgb};
use ct_core::trainer::{adapt, build_source_pool, finetune, pretrain, select_shots, TrainConfig, TrainLog};
use ct_core::{Error, FeatureMap};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "ct", version, about = "Few-shot adaptation of flow-based cell segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed. Replaces the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Replaces the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of target shots; overrides `train.k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source and shifted target scenes as PNG and CTT files.
    Synth(Common),
    /// Pretrain on source scenes and save a checkpoint.
    Pretrain(Common),
    /// Contrastive adaptation of a checkpoint to K target shots.
    Adapt(FromCheckpoint),
    /// Fine-tune a checkpoint on K target shots.
    Finetune(FromCheckpoint),
    /// Segment an image with a checkpoint, or a stored feature map.
    Segment {
        #[command(flatten)]
        common: Common,
        /// Checkpoint used to predict features from `--image`.
        #[arg(long, requires = "image")]
        checkpoint: Option<PathBuf>,
        /// Grayscale PNG to segment.
        #[arg(long, conflicts_with = "features")]
        image: Option<PathBuf>,
        /// CTT feature map with two flow channels and one logit channel.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Also write a color overlay (needs `--image`).
        #[arg(long, requires = "image")]
        overlay: bool,
    },
    /// Score predicted masks against ground truth masks of the same names.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of predicted 16-bit PNG masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground truth 16-bit PNG masks.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Unadapted versus adapted model on the shifted target.
    Benchmark(Common),
    /// Full method, each adaptation loss removed, and the unadapted model.
    Ablation(Common),
    /// Adaptation with several numbers of shots.
    Ksweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated K values; defaults to `k_values` of the config.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
}

/// Marks errors that come from the configuration rather than the run.
fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => config_error(e.to_string()),
            e => e.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &c.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn train_config(cfg: &ExperimentConfig, k: Option<usize>) -> Result<TrainConfig> {
    let t = TrainConfig { seed: cfg.seeds[0], k: k.unwrap_or(cfg.train.k), ..cfg.train.clone() };
    t.validate()?;
    Ok(t)
}

fn save_run(
    dir: &Path,
    name: &str,
    params: &ModelParams,
    log: &TrainLog,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    save_checkpoint(dir.join("checkpoint"), params, cfg.seed, epoch)?;
    log.write_csv(&dir.join(format!("{name}_log.csv")))?;
    println!("wrote {}", dir.join("checkpoint").display());
    Ok(())
}

fn run_from_checkpoint(a: &FromCheckpoint, finetuning: bool) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let train = train_config(&cfg, a.k)?;
    let (params, index) = load_checkpoint(&a.checkpoint)?;
    let data = generate_datasets(&cfg, train.seed)?;
    let shots = select_shots(&data.target_train, train.k, &train)?;
    let dir = out_dir(&cfg)?;
    if finetuning {
        let (p, log) = finetune(&params, &shots, &train)?;
        save_run(dir, "finetune", &p, &log, &train, index.epoch + train.finetune_epochs)
    } else {
        let pool = build_source_pool(&data.source, &train)?;
        let (p, log) = adapt(&params, &pool, &shots, &train)?;
        save_run(dir, "adapt", &p, &log, &train, index.epoch + train.adapt_epochs)
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = load_config(&c)?;
            let dir = out_dir(&cfg)?;
            save_scenes(dir, &cfg, cfg.seeds[0])?;
            println!("wrote scenes to {}", dir.display());
        }
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            let train = train_config(&cfg, None)?;
            let data = generate_datasets(&cfg, train.seed)?;
            let (params, log) = pretrain(&data.source, &train)?;
            save_run(out_dir(&cfg)?, "pretrain", &params, &log, &train, train.pretrain_epochs)?;
        }
        Command::Adapt(a) => run_from_checkpoint(&a, false)?,
        Command::Finetune(a) => run_from_checkpoint(&a, true)?,
        Command::Segment { common, checkpoint, image, features, overlay } => {
            let cfg = load_config(&common)?;
            let (z, img) = match (&image, &features) {
                (Some(path), _) => {
                    let Some(ck) = &checkpoint else { return Err(config_error("--image needs --checkpoint")) };
                    let img = read_image(path)?;
                    let (params, _) = load_checkpoint(ck)?;
                    (predict_tiled(&params, &img, cfg.train.tile, cfg.eval_overlap)?, Some(img))
                }
                (None, Some(path)) => (FeatureMap::try_from(Tensor::read(path)?)?, None),
                (None, None) => return Err(config_error("segment needs --image or --features")),
            };
            let mask = segment(&z, &cfg.follow)?;
            let dir = out_dir(&cfg)?;
            write_mask(dir.join("mask.png"), &mask)?;
            if let (true, Some(img)) = (overlay, &img) {
                write_rgb(dir.join("overlay.png"), img.width(), img.height(), &render_overlay(img, &mask)?)?;
            }
            println!("{} instances written to {}", mask.instance_count(), dir.join("mask.png").display());
        }
        Command::Eval { common, pred, gt } => {
            let cfg = load_config(&common)?;
            let thresholds = default_thresholds();
            let mut rows = Vec::new();
            for name in png_names(&pred)? {
                let g = gt.join(&name);
                if !g.exists() {
                    bail!("no ground truth mask {}", g.display());
                }
                let m = evaluate(&read_mask(pred.join(&name))?, &read_mask(&g)?, &thresholds)?;
                rows.push((name, m));
            }
            let path = out_dir(&cfg)?.join("eval.csv");
            write_metrics_csv(&path, &rows)?;
            println!("scored {} images into {}", rows.len(), path.display());
        }
        Command::Benchmark(c) => {
            let cfg = load_config(&c)?;
            report(&run_benchmark(&cfg)?, &cfg.output);
        }
        Command::Ablation(c) => {
            let cfg = load_config(&c)?;
            report(&run_ablation(&cfg)?, &cfg.output);
        }
        Command::Ksweep { common, k } => {
            let cfg = load_config(&common)?;
            let k_values = if k.is_empty() { cfg.k_values.clone() } else { k };
            if k_values.contains(&0) {
                return Err(config_error("K values must be positive"));
            }
            report(&run_kshot_sweep(&cfg, &k_values)?, &cfg.output);
        }
    }
    Ok(())
}

fn report(summary: &RunSummary, out: &Path) {
    let mut names: Vec<&str> = Vec::new();
    for r in &summary.rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    for n in names {
        println!("{n:>22}  median AP@0.5 {:.3}", summary.median_ap50(n));
    }
    println!("reports in {}", out.display());
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_config() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
