//! Epoch loop: shuffled batches, on-the-fly Cut-Mix, two-pass scoring,
//! deviation loss, Adam.

use std::fmt::Write as _;

use super::adam::{clip_global_norm, AdamConfig};
use super::checkpoint::Checkpoint;
use super::schedule::Schedule;
use crate::config::Doc;
use crate::data::{cutmix, CutMixConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{batch_loss_graph, LossConfig, ReferenceDistribution};
use crate::rng::Rng;
use crate::scoring::atac_forward;
use crate::tensor::{ExecMode, Graph, Tensor};

const SHUFFLE_DOMAIN: u32 = 0x5348;
const CUTMIX_DOMAIN: u32 = 0x434d;
const REFERENCE_DOMAIN: u32 = 0x5245;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// `None` disables on-the-fly pseudo-anomalies.
    pub cutmix: Option<CutMixConfig>,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub mode: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            cutmix: Some(CutMixConfig::default()),
            grad_clip: None,
            mode: ExecMode::Strict,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        if let Some(c) = &self.cutmix {
            c.validate()?;
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("train config", "grad_clip must be positive"));
        }
        Ok(())
    }

    /// Write every section except the execution mode.
    pub fn write(&self, doc: &mut Doc) {
        self.schedule.write(doc);
        self.loss.write(doc);
        doc.set("adam", "beta1", self.adam.beta1);
        doc.set("adam", "beta2", self.adam.beta2);
        doc.set("adam", "eps", self.adam.eps);
        doc.set("adam", "weight_decay", self.adam.weight_decay);
        doc.set("adam", "grad_clip", self.grad_clip.map_or("none".to_string(), |c| c.to_string()));
        doc.set("cutmix", "enabled", self.cutmix.is_some());
        self.cutmix.clone().unwrap_or_default().write(doc);
    }

    pub fn read(doc: &mut Doc) -> Result<Self> {
        let mut c = Self {
            schedule: Schedule::read(doc)?,
            loss: LossConfig::read(doc)?,
            ..Self::default()
        };
        doc.take_parse("adam", "beta1", &mut c.adam.beta1)?;
        doc.take_parse("adam", "beta2", &mut c.adam.beta2)?;
        doc.take_parse("adam", "eps", &mut c.adam.eps)?;
        doc.take_parse("adam", "weight_decay", &mut c.adam.weight_decay)?;
        if let Some(v) = doc.take("adam", "grad_clip") {
            c.grad_clip = match v.as_str() {
                "none" => None,
                other => Some(crate::config::parse_value(other, "adam.grad_clip")?),
            };
        }
        let mut enabled = true;
        doc.take_parse("cutmix", "enabled", &mut enabled)?;
        let cm = CutMixConfig::read(doc)?;
        c.cutmix = enabled.then_some(cm);
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_score_normal: f64,
    pub mean_score_anomaly: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,mean_loss,mean_score_normal,mean_score_anomaly";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.lr, r.mean_loss, r.mean_score_normal, r.mean_score_anomaly
        );
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Shuffled sample order of one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    Rng::derive(seed, SHUFFLE_DOMAIN, epoch as u64, 0).shuffle(&mut order);
    order
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Train from `start` (fresh or resumed) up to `cfg.schedule.epochs`
/// completed epochs. `on_epoch` sees every finished epoch.
pub fn train(
    start: Checkpoint,
    episode: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let normals: Vec<usize> = (0..episode.len()).filter(|&i| !episode[i].is_anomaly()).collect();
    let has_anomaly = episode.iter().any(Sample::is_anomaly);
    if episode.is_empty() || (!has_anomaly && (cfg.cutmix.is_none() || normals.is_empty())) {
        return Err(Error::invalid(
            "train",
            "episode needs both classes (labelled anomalies or Cut-Mix on normal samples)",
        ));
    }
    let mut ck = start;
    let seed = ck.seed;
    let names = ck.params.names();
    let mut log = Vec::new();

    for epoch in ck.epoch as usize..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at_epoch(epoch);
        let order = epoch_order(seed, epoch, episode.len());
        let mut mix_rng = Rng::derive(seed, CUTMIX_DOMAIN, epoch as u64, 0);
        let (mut losses, mut normal_scores, mut anomaly_scores) = (Vec::new(), Vec::new(), Vec::new());

        for (b, chunk) in order.chunks(cfg.schedule.batch_size).enumerate() {
            let mut batch: Vec<Sample> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &episode[i];
                match &cfg.cutmix {
                    Some(cm) if !s.is_anomaly() && mix_rng.bernoulli(cm.rate) => {
                        let others: Vec<usize> = normals.iter().copied().filter(|&j| j != i).collect();
                        let donor = (!others.is_empty()).then(|| &episode[others[mix_rng.below(others.len())]]);
                        batch.push(cutmix(s, donor, cm, &mut mix_rng)?.0);
                    }
                    _ => batch.push(s.clone()),
                }
            }
            let images = Tensor::stack_batch(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
            let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
            let reference = ReferenceDistribution::resolve(
                cfg.loss.reference,
                &mut Rng::derive(seed, REFERENCE_DOMAIN, epoch as u64, b as u64),
            )?;

            let diverged = |loss: f64| Error::Diverged { epoch, batch: b, loss };
            let mut g = Graph::with_mode(cfg.mode);
            let bound = ck.params.bind(&mut g)?;
            let step = (|| {
                let out = atac_forward(&mut g, &ck.model, &ck.scoring, &bound, &images, None)?;
                let loss = batch_loss_graph(&mut g, out.score, &labels, &reference, &cfg.loss)?;
                g.backward(loss)?;
                Ok((out.scores, g.value(loss).data()[0] as f64))
            })();
            let (scores, loss) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }

            let mut grads: Vec<Tensor<f32>> = bound
                .leaves()
                .iter()
                .zip(ck.params.leaves())
                .map(|(&&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if let Some(max) = cfg.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            let mut leaves: Vec<Tensor<f32>> = ck.params.leaves().into_iter().cloned().collect();
            ck.adam.step(&mut leaves, &grads, &names, lr)?;
            ck.params = ck.params.with_leaves(leaves)?;

            losses.push(loss);
            for (s, &y) in scores.iter().zip(&labels) {
                if y == 1 { &mut anomaly_scores } else { &mut normal_scores }.push(s.value);
            }
        }

        ck.epoch = epoch as u64 + 1;
        let row = EpochLog {
            epoch,
            lr,
            mean_loss: mean(&losses),
            mean_score_normal: mean(&normal_scores),
            mean_score_anomaly: mean(&anomaly_scores),
        };
        on_epoch(&row, &ck)?;
        log.push(row);
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}
