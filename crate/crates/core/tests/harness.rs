use std::fs;
use std::path::Path;

use ct_core::harness::*;
use ct_core::synth::SceneConfig;
use ct_core::trainer::{shot_cells, Stage, TrainConfig};
use ct_core::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        source: SceneConfig { canvas: 128, count: [6, 10], ..Default::default() },
        source_scenes: 3,
        source_test_scenes: 1,
        target_train_scenes: 1,
        target_test_scenes: 1,
        train: TrainConfig {
            tile: 64,
            pool_size: 4,
            pretrain_epochs: 2,
            pretrain_steps_per_epoch: 2,
            adapt_epochs: 2,
            finetune_epochs: 2,
            k: 2,
            ..Default::default()
        },
        eval_overlap: 16,
        k_values: vec![1, 2],
        seeds: vec![0, 1],
        output: out.to_path_buf(),
        ..Default::default()
    }
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn benchmark_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = run_benchmark(&tiny(a.path())).unwrap();
    run_benchmark(&tiny(b.path())).unwrap();
    assert_eq!(s.rows.len(), 4);
    assert!(s.rows.iter().all(|r| r.metrics.ap.iter().all(|v| (0.0..=1.0).contains(v))));

    let (la, lb) = (listing(a.path()), listing(b.path()));
    assert_eq!(la.len(), lb.len());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!(x.0, y.0);
        // The manifest records the output directory, which differs here.
        if x.0 != "manifest.json" {
            assert!(x.1 == y.1, "{} differs", x.0);
        }
    }
    let names: Vec<&str> = la.iter().map(|f| f.0.as_str()).collect();
    for f in ["report.csv", "ap_curve.csv", "manifest.json", "logs/seed1_adapted.csv", "logs/seed0_pretrain.csv"] {
        assert!(names.contains(&f), "missing {f}");
    }
    assert!(!names.contains(&"ap_vs_K.csv"));
    let report = fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(report.starts_with("seed,variant,k,ap@0.50,"));
}

#[test]
fn ablation_rows_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![3], ..tiny(dir.path()) };
    let s = run_ablation(&cfg).unwrap();
    let names: Vec<&str> = s.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_cf", "no_cm", "no_adaptation_losses", "unadapted"]);

    let o = &s.seeds[0];
    assert_eq!(o.logs.len(), 4);
    let plain = o.logs["no_adaptation_losses"].epoch_means();
    assert_eq!(plain.len(), 4);
    assert_eq!(plain.iter().filter(|e| e.stage == Stage::Adapt).count(), 2);
    let full = &o.logs["full"];
    assert!(full.records.iter().filter(|r| r.stage == Stage::Adapt).any(|r| r.l_cm > 0.0));
    assert!(o.logs["no_adaptation_losses"].records.iter().all(|r| r.l_cf == 0.0 && r.l_cm == 0.0));

    let curve = fs::read_to_string(dir.path().join("ap_curve.csv")).unwrap();
    assert!(curve.starts_with("variant,iou_threshold,ap_median,ap_mean,seeds"));
    assert_eq!(curve.lines().count(), 1 + 5 * 9);
}

#[test]
fn kshot_sweep_writes_curve_and_nested_shots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![0], ..tiny(dir.path()) };
    let s = run_kshot_sweep(&cfg, &[1, 2]).unwrap();
    assert_eq!(s.rows.iter().map(|r| r.k).collect::<Vec<_>>(), [1, 2]);
    let curve = fs::read_to_string(dir.path().join("ap_vs_K.csv")).unwrap();
    assert!(curve.starts_with("k,iou_threshold"));

    let data = generate_datasets(&cfg, 0).unwrap();
    let train = TrainConfig { seed: 0, ..cfg.train.clone() };
    let cells = &s.seeds[0].shot_cells;
    assert_eq!(cells, &shot_cells(&data.target_train, 2, &train).unwrap());
    assert_eq!(shot_cells(&data.target_train, 1, &train).unwrap(), cells[..1]);
}

#[test]
fn overlays_rerender_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![0], ..tiny(dir.path()) };
    run_variants(&cfg, &[Variant::unadapted(&cfg.train)]).unwrap();
    let path = dir.path().join("overlays/seed0_unadapted.overlay.png");
    let before = fs::read(&path).unwrap();
    fs::remove_file(&path).unwrap();
    rerender_overlay(dir.path(), 0, "unadapted").unwrap();
    assert_eq!(fs::read(&path).unwrap(), before);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash().unwrap());
}

#[test]
fn oversized_k_fails_in_the_shot_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![0], ..tiny(dir.path()) };
    let err = run_kshot_sweep(&cfg, &[500]).unwrap_err();
    match err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "shots");
            assert!(matches!(*source, Error::Config(_)));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn config_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let path = dir.path().join("cfg.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());

    fs::write(&path, r#"{"seeds": [0], "bogus": 1}"#).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config(_))));
    fs::write(&path, r#"{"eval_overlap": 200}"#).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config(_))));
}
