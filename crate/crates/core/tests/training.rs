//! Training loop behaviour: overfitting a tiny episode, determinism, resume
//! and divergence handling.

mod common;

use std::sync::OnceLock;

use atac_core::data::synth::{self, Split};
use atac_core::data::{cutmix, CutMixConfig, Origin, Sample, SynthConfig};
use atac_core::training::{train, AdamConfig, Checkpoint, EpochLog, Schedule, TrainConfig};
use atac_core::{Error, ExecMode, InputNorm, ModelConfig, ModelParams, Rng, ScoringConfig, Tensor};
use common::*;

fn synthetic(cfg: &SynthConfig, label: u8, index: usize) -> Sample {
    Sample {
        id: format!("{label}-{index}"),
        image: synth::render(cfg, Split::Train, label, index).image,
        label,
        origin: Origin::Synthetic,
    }
}

/// Four normals and four Cut-Mix anomalies made from them.
fn overfit_episode() -> Vec<Sample> {
    let sc = SynthConfig::default();
    let normals: Vec<Sample> = (0..4).map(|i| synthetic(&sc, 0, i)).collect();
    let mut rng = Rng::new(9);
    let mut episode = normals.clone();
    for i in 0..4 {
        let (mut s, _) = cutmix(&normals[i], Some(&normals[(i + 1) % 4]), &CutMixConfig::default(), &mut rng).unwrap();
        s.id = format!("mix-{i}");
        episode.push(s);
    }
    episode
}

/// 200 full-batch epochs at a constant learning rate, no on-the-fly Cut-Mix.
fn overfit_log() -> &'static [EpochLog] {
    static LOG: OnceLock<Vec<EpochLog>> = OnceLock::new();
    LOG.get_or_init(|| {
        let episode = overfit_episode();
        let mut model = ModelConfig::default();
        let normals = episode.iter().filter(|s| !s.is_anomaly()).map(|s| &s.image);
        model.input_norm = Some(InputNorm::fit(normals).unwrap());
        let params = ModelParams::init(&model, 1).unwrap();
        let start = Checkpoint::initial(model, ScoringConfig::default(), params, AdamConfig::default(), 1);
        let cfg = TrainConfig {
            schedule: Schedule {
                base_lr: 1e-3,
                decay_factor: 0.1,
                step_epochs: 1000,
                epochs: 200,
                batch_size: 8,
            },
            cutmix: None,
            ..TrainConfig::default()
        };
        train(start, &episode, &cfg, |_, _| Ok(())).unwrap().log
    })
}

fn separation(r: &EpochLog) -> f64 {
    r.mean_score_anomaly - r.mean_score_normal
}

#[test]
fn overfits_a_tiny_episode() {
    let log = overfit_log();
    let last = log.last().unwrap();
    assert_eq!(log.len(), 200);
    assert!(last.mean_loss < 0.5, "final loss {}", last.mean_loss);
    assert!(separation(last) >= 5.0, "final separation {}", separation(last));
}

#[test]
fn overfit_separation_is_monotone_after_burn_in() {
    let log = overfit_log();
    let worst = log[5..]
        .windows(2)
        .map(|w| (w[1].epoch, separation(&w[0]) - separation(&w[1])))
        .fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    assert!(worst.1 <= 0.05, "separation drops by {:.4} at epoch {}", worst.1, worst.0);
}

// ---------------------------------------------------------------- tiny runs

fn tiny_episode() -> Vec<Sample> {
    let sc = SynthConfig {
        resolution: 16,
        ..SynthConfig::default()
    };
    (0..10).map(|i| synthetic(&sc, 0, i)).chain((0..3).map(|i| synthetic(&sc, 1, i))).collect()
}

fn tiny_start(seed: u64) -> Checkpoint {
    let model = tiny_model();
    let params = ModelParams::init(&model, seed).unwrap();
    Checkpoint::initial(model, ScoringConfig::default(), params, AdamConfig::default(), seed)
}

fn tiny_config(epochs: usize, mode: ExecMode) -> TrainConfig {
    TrainConfig {
        schedule: Schedule {
            base_lr: 1e-3,
            decay_factor: 0.5,
            step_epochs: 4,
            epochs,
            batch_size: 4,
        },
        mode,
        ..TrainConfig::default()
    }
}

fn run(start: Checkpoint, cfg: &TrainConfig) -> (Checkpoint, Vec<EpochLog>) {
    let out = train(start, &tiny_episode(), cfg, |_, _| Ok(())).unwrap();
    (out.checkpoint, out.log)
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let mut cfg = tiny_config(3, ExecMode::Strict);
    cfg.schedule.base_lr = 0.0;
    let start = tiny_start(4);
    let (end, log) = run(start.clone(), &cfg);
    assert_eq!(end.params, start.params);
    assert_eq!(end.epoch, 3);
    assert!(log.iter().all(|r| r.lr == 0.0 && r.mean_loss.is_finite()));
}

#[test]
fn same_seed_gives_identical_runs_in_either_mode() {
    let (a, log_a) = run(tiny_start(3), &tiny_config(6, ExecMode::Strict));
    let (b, log_b) = run(tiny_start(3), &tiny_config(6, ExecMode::Strict));
    let (c, log_c) = run(tiny_start(3), &tiny_config(6, ExecMode::Parallel));
    assert_eq!(log_a, log_b);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a, log_c);
    assert_eq!(a.to_bytes(), c.to_bytes());
    let (d, _) = run(tiny_start(8), &tiny_config(6, ExecMode::Strict));
    assert_ne!(a.params, d.params);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (full, full_log) = run(tiny_start(5), &tiny_config(30, ExecMode::Strict));
    let (half, first) = run(tiny_start(5), &tiny_config(15, ExecMode::Strict));
    let reloaded = Checkpoint::from_bytes(&half.to_bytes()).unwrap();
    assert_eq!(reloaded, half);
    let (resumed, second) = run(reloaded, &tiny_config(30, ExecMode::Strict));
    assert_eq!(resumed, full);
    assert_eq!([first, second].concat(), full_log);
    // a finished checkpoint has nothing left to do
    let (again, none) = run(full.clone(), &tiny_config(30, ExecMode::Strict));
    assert!(none.is_empty());
    assert_eq!(again, full);
}

#[test]
fn every_epoch_is_reported_with_the_running_checkpoint() {
    let mut seen = Vec::new();
    let out = train(tiny_start(2), &tiny_episode(), &tiny_config(4, ExecMode::Strict), |row, ck| {
        seen.push((row.epoch, ck.epoch));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [(0, 1), (1, 2), (2, 3), (3, 4)]);
    assert_eq!(out.log.iter().map(|r| r.lr).collect::<Vec<_>>(), [1e-3; 4]);
}

#[test]
fn callback_errors_stop_training() {
    let mut calls = 0;
    let err = train(tiny_start(2), &tiny_episode(), &tiny_config(5, ExecMode::Strict), |_, _| {
        calls += 1;
        Err(Error::Checkpoint("disk full".into()))
    });
    assert!(matches!(err, Err(Error::Checkpoint(_))));
    assert_eq!(calls, 1);
}

#[test]
fn cutmix_alone_supplies_the_anomaly_class() {
    let normals: Vec<Sample> = tiny_episode().into_iter().filter(|s| !s.is_anomaly()).collect();
    let mut cfg = tiny_config(2, ExecMode::Strict);
    cfg.cutmix = Some(CutMixConfig {
        rate: 0.5,
        ..CutMixConfig::default()
    });
    let out = train(tiny_start(1), &normals, &cfg, |_, _| Ok(())).unwrap();
    assert!(out.log.iter().all(|r| r.mean_score_anomaly.is_finite()));

    cfg.cutmix = None;
    assert!(matches!(train(tiny_start(1), &normals, &cfg, |_, _| Ok(())), Err(Error::InvalidArgument { .. })));
    assert!(train(tiny_start(1), &[], &tiny_config(1, ExecMode::Strict), |_, _| Ok(())).is_err());
}

#[test]
fn non_finite_inputs_abort_with_divergence() {
    let mut episode = tiny_episode();
    episode[0].image = Tensor::full(episode[0].image.shape(), f32::NAN);
    let cfg = tiny_config(2, ExecMode::Strict);
    match train(tiny_start(1), &episode, &cfg, |_, _| Ok(())) {
        Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn tiny_params_helper_keeps_shapes() {
    let cfg = tiny_model();
    let p = tiny_params(&cfg, 0);
    let q = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let shapes = |p: &ModelParams<f64>| p.leaves().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&p), shapes(&q));
}
