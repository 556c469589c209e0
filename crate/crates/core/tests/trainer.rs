use ct_core::harness::median;
use ct_core::model::ModelParams;
use ct_core::synth::{generate_scene, SceneConfig};
use ct_core::trainer::*;
use ct_core::{ImageGrid, LabelMask};

fn scenes(seed: u64, n: u64) -> Vec<(ImageGrid, LabelMask)> {
    (0..n)
        .map(|i| {
            let cfg = SceneConfig { canvas: 128, count: [6, 10], seed: seed * 100 + i, ..Default::default() };
            generate_scene(&cfg).unwrap()
        })
        .collect()
}

fn small(seed: u64) -> TrainConfig {
    TrainConfig { tile: 64, pool_size: 8, pretrain_epochs: 3, pretrain_steps_per_epoch: 6, seed, ..Default::default() }
}

fn rel_change(a: &ModelParams, b: &ModelParams) -> f64 {
    let (fa, fb) = (a.flat(), b.flat());
    let diff: f64 = fa.iter().zip(&fb).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
    diff / a.l2_norm()
}

#[test]
fn training_is_deterministic() {
    let data = scenes(1, 3);
    let cfg = TrainConfig { pretrain_epochs: 1, ..small(4) };
    let (p1, l1) = pretrain(&data, &cfg).unwrap();
    let (p2, l2) = pretrain(&data, &cfg).unwrap();
    assert_eq!(p1.flat(), p2.flat());
    assert_eq!(l1.records, l2.records);

    let shots = select_shots(&data, 2, &cfg).unwrap();
    let pool = build_source_pool(&data, &cfg).unwrap();
    let (a1, _) = adapt(&p1, &pool, &shots, &cfg).unwrap();
    let (a2, _) = adapt(&p1, &pool, &shots, &cfg).unwrap();
    assert_eq!(a1.flat(), a2.flat());

    let (other, _) = pretrain(&data, &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(p1.flat(), other.flat());
}

#[test]
fn single_shot_log_shape() {
    let data = scenes(2, 2);
    let cfg = TrainConfig { k: 1, pretrain_epochs: 1, pretrain_steps_per_epoch: 1, ..small(0) };
    let (p, _) = pretrain(&data, &cfg).unwrap();
    let shots = select_shots(&data, 1, &cfg).unwrap();
    let pool = build_source_pool(&data, &cfg).unwrap();
    let (p, mut log) = adapt(&p, &pool, &shots, &cfg).unwrap();
    let (_, ft) = finetune(&p, &shots, &cfg).unwrap();
    log.extend(ft);

    // 8 crops in pairs of two give 4 adaptation steps per epoch; a single
    // shot gives one fine-tuning step per epoch.
    let schedule = cfg.lr_schedule();
    let epochs = log.epoch_means();
    assert_eq!(epochs.len(), 10);
    for (e, r) in epochs.iter().enumerate() {
        let adapt_stage = e < 5;
        assert_eq!(r.epoch, e + 1);
        assert_eq!(r.stage, if adapt_stage { Stage::Adapt } else { Stage::Finetune });
        assert_eq!(r.steps, if adapt_stage { 4 } else { 1 });
        assert_eq!(r.lr, schedule[e]);
        assert!(r.mean_total.is_finite());
    }
    assert_eq!(log.records.len(), 25);
    assert!(log.records.iter().filter(|r| r.stage == Stage::Adapt).all(|r| r.l_cf >= 0.0 && r.l_cm >= 0.0));
}

#[test]
fn finetuning_barely_moves_the_model() {
    let data = scenes(3, 2);
    let cfg = small(1);
    let (p, _) =
        pretrain(&data, &TrainConfig { pretrain_epochs: 1, pretrain_steps_per_epoch: 2, ..cfg.clone() }).unwrap();
    let shots = select_shots(&data, 3, &cfg).unwrap();

    let (same, log) = finetune(&p, &shots, &TrainConfig { finetune_epochs: 0, ..cfg.clone() }).unwrap();
    assert_eq!(same.flat(), p.flat());
    assert!(log.records.is_empty());

    let (q, log) = finetune(&p, &shots, &cfg).unwrap();
    let change = rel_change(&p, &q);
    assert!(change > 0.0 && change < 1e-2, "relative change {change}");
    assert!(log.records.iter().all(|r| r.lr == 1e-6 && r.stage == Stage::Finetune));
}

#[test]
fn adaptation_does_not_increase_shot_loss() {
    let mut deltas = Vec::new();
    for seed in 0..3 {
        let data = scenes(10 + seed, 3);
        let cfg = TrainConfig { pool_size: 16, ..small(seed) };
        let (p, _) = pretrain(&data, &cfg).unwrap();
        let shots = select_shots(&data, 3, &cfg).unwrap();
        let pool = build_source_pool(&data, &cfg).unwrap();
        let before = shot_loss(&p, &shots, &cfg).unwrap();
        let (q, _) = adapt(&p, &pool, &shots, &cfg).unwrap();
        let (q, _) = finetune(&q, &shots, &cfg).unwrap();
        let after = shot_loss(&q, &shots, &cfg).unwrap();
        println!("seed {seed}: shot loss {before:.4} -> {after:.4}");
        deltas.push(after - before);
    }
    assert!(median(&deltas) <= 0.0, "shot loss changes {deltas:?}");
}

#[test]
fn shots_are_nested_and_bounded() {
    let data = scenes(4, 2);
    let cfg = small(7);
    let cells = shot_cells(&data, 5, &cfg).unwrap();
    for k in 1..5 {
        assert_eq!(shot_cells(&data, k, &cfg).unwrap(), cells[..k]);
    }
    let total: usize = data.iter().map(|(_, m)| m.instance_count()).sum();
    assert!(shot_cells(&data, total, &cfg).is_ok());
    assert!(shot_cells(&data, total + 1, &cfg).is_err());
    assert!(shot_cells(&data, 0, &cfg).is_err());
}
