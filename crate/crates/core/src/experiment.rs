//! End-to-end run on a generated dataset: synthesise, sample an episode,
//! train, score the test split.

use std::path::Path;
use std::time::{Duration, Instant};

use crate::data::{generate_synthetic, load_dataset, sample_episode, Sample, SynthConfig};
use crate::error::Result;
use crate::eval::{auroc, ScoreRow, ScoredSample};
use crate::model::{InputNorm, ModelConfig, ModelParams};
use crate::scoring::{score_images, ScoringConfig};
use crate::training::{train, Checkpoint, EpochLog, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub scoring: ScoringConfig,
    pub train: TrainConfig,
    /// Replace `model.input_norm` with statistics of the episode's normals.
    pub fit_input_norm: bool,
    /// Labelled anomalies in the training episode.
    pub anomalies: usize,
    /// Seeds the episode draw, initialisation and training streams.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            scoring: ScoringConfig::default(),
            train: TrainConfig::default(),
            fit_input_norm: true,
            anomalies: 10,
            seed: 0,
        }
    }
}

pub struct ExperimentResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub rows: Vec<ScoreRow>,
    pub scored: Vec<ScoredSample>,
    pub auroc: f64,
    pub train_time: Duration,
}

/// Normals and anomalies of a loaded split.
pub fn split_by_label(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| !s.is_anomaly())
}

/// Write the synthetic dataset into `dir` and load both splits.
pub fn prepare_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let out = generate_synthetic(&cfg.synth, dir)?;
    let res = cfg.model.input_resolution;
    let ch = cfg.model.input_channels;
    Ok((load_dataset(&out.train, res, ch)?, load_dataset(&out.test, res, ch)?))
}

/// Training episode of `train_set` and the fresh checkpoint to train from,
/// with input statistics fitted on the episode's normals when enabled.
pub fn prepare_training(cfg: &ExperimentConfig, train_set: &[Sample]) -> Result<(Vec<Sample>, Checkpoint)> {
    let (normals, anomalies) = split_by_label(train_set.to_vec());
    let episode = sample_episode(&normals, &anomalies, cfg.anomalies, cfg.seed)?;
    let mut model = cfg.model.clone();
    if cfg.fit_input_norm {
        let normal_images = episode.iter().filter(|s| !s.is_anomaly()).map(|s| &s.image);
        model.input_norm = Some(InputNorm::fit(normal_images)?);
    }
    let params = ModelParams::init(&model, cfg.seed)?;
    let start = Checkpoint::initial(model, cfg.scoring.clone(), params, cfg.train.adam, cfg.seed);
    Ok((episode, start))
}

/// Score `samples` with a checkpoint; rows and labelled scores in input order.
pub fn score_samples(ck: &Checkpoint, samples: &[Sample], batch: usize) -> Result<(Vec<ScoreRow>, Vec<ScoredSample>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let records = score_images(&ck.model, &ck.scoring, &ck.params, &images, batch)?;
    Ok(samples
        .iter()
        .zip(records)
        .map(|(s, r)| {
            let row = ScoreRow {
                id: s.id.clone(),
                score: r.score,
                crop_box: r.crop_box,
            };
            let scored = ScoredSample {
                id: s.id.clone(),
                label: s.label,
                score: r.score.value,
            };
            (row, scored)
        })
        .unzip())
}

/// Train on an episode of `train_set` and score `test_set`.
pub fn run_on(cfg: &ExperimentConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<ExperimentResult> {
    let (episode, start) = prepare_training(cfg, train_set)?;
    let t0 = Instant::now();
    let outcome = train(start, &episode, &cfg.train, |_, _| Ok(()))?;
    let train_time = t0.elapsed();
    let ck = outcome.checkpoint;
    let (rows, scored) = score_samples(&ck, test_set, cfg.train.schedule.batch_size)?;
    Ok(ExperimentResult {
        auroc: auroc(&scored)?,
        checkpoint: ck,
        log: outcome.log,
        rows,
        scored,
        train_time,
    })
}
