//! Deviation loss against a Gaussian prior on normal-sample scores.
//!
//! A score's deviation is its z-value under the reference distribution.
//! Normal samples pay `|dev|`, pulling them to the prior mean; anomalies pay
//! `max(0, k - |dev|)`, pushing them at least `k` standard deviations out.

use crate::config::Doc;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReferenceMode {
    /// Fixed standard normal: `mu = 0`, `sigma = 1`.
    Analytic,
    /// Mean and standard deviation of `count` fresh standard-normal draws.
    Sampled { count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceDistribution {
    pub mu: f64,
    pub sigma: f64,
}

impl ReferenceDistribution {
    pub const STANDARD: Self = Self { mu: 0.0, sigma: 1.0 };

    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::invalid("reference distribution", format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }

    /// Resolve a reference for one batch.
    pub fn resolve(mode: ReferenceMode, rng: &mut Rng) -> Result<Self> {
        match mode {
            ReferenceMode::Analytic => Ok(Self::STANDARD),
            ReferenceMode::Sampled { count } => {
                if count < 2 {
                    return Err(Error::invalid("reference distribution", "sampled mode needs at least 2 draws"));
                }
                let draws: Vec<f64> = (0..count).map(|_| rng.normal()).collect();
                let mu = draws.iter().sum::<f64>() / count as f64;
                let var = draws.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (count - 1) as f64;
                Self::new(mu, var.sqrt())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Deviation cut-off anomalies are pushed beyond.
    pub k: f64,
    /// Clamp the anomaly term at zero. Without it the anomaly term is the
    /// unbounded `k - |dev|`.
    pub hinge: bool,
    pub reference: ReferenceMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: 10.0,
            hinge: true,
            reference: ReferenceMode::Analytic,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::invalid("loss config", "k must be positive"));
        }
        Ok(())
    }

    pub fn write(&self, doc: &mut Doc) {
        doc.set("loss", "k", self.k);
        doc.set("loss", "hinge", self.hinge);
        match self.reference {
            ReferenceMode::Analytic => doc.set("loss", "reference", "analytic"),
            ReferenceMode::Sampled { count } => doc.set("loss", "reference", format!("sampled:{count}")),
        }
    }

    pub fn read(doc: &mut Doc) -> Result<Self> {
        let mut cfg = Self::default();
        doc.take_parse("loss", "k", &mut cfg.k)?;
        doc.take_parse("loss", "hinge", &mut cfg.hinge)?;
        if let Some(v) = doc.take("loss", "reference") {
            cfg.reference = match v.split_once(':') {
                None if v == "analytic" => ReferenceMode::Analytic,
                Some(("sampled", n)) => ReferenceMode::Sampled {
                    count: crate::config::parse_value(n, "loss.reference")?,
                },
                _ => return Err(Error::Config(format!("loss.reference: expected analytic or sampled:N, got `{v}`"))),
            };
        }
        Ok(cfg)
    }
}

pub fn deviation(score: f64, reference: &ReferenceDistribution) -> Result<f64> {
    if !(reference.sigma > 0.0) {
        return Err(Error::invalid("deviation", format!("sigma must be positive, got {}", reference.sigma)));
    }
    Ok((score - reference.mu) / reference.sigma)
}

pub fn deviation_loss(score: f64, label: u8, reference: &ReferenceDistribution, cfg: &LossConfig) -> Result<f64> {
    let dev = deviation(score, reference)?.abs();
    match label {
        0 => Ok(dev),
        1 if cfg.hinge => Ok((cfg.k - dev).max(0.0)),
        1 => Ok(cfg.k - dev),
        other => Err(Error::invalid("deviation_loss", format!("label must be 0 or 1, got {other}"))),
    }
}

/// Mean per-sample loss.
pub fn batch_loss(scores: &[f64], labels: &[u8], reference: &ReferenceDistribution, cfg: &LossConfig) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("batch_loss", "labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::invalid("batch_loss", "empty batch"));
    }
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        total += deviation_loss(s, y, reference, cfg)?;
    }
    Ok(total / scores.len() as f64)
}

/// [`batch_loss`] on the graph for an `[N]` score vector.
pub fn batch_loss_graph<T: Real>(
    g: &mut Graph<T>,
    scores: Var,
    labels: &[u8],
    reference: &ReferenceDistribution,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = g.value(scores).numel();
    if n != labels.len() {
        return Err(Error::shape("batch_loss", "labels", n, labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::invalid("batch_loss", format!("label must be 0 or 1, got {bad}")));
    }
    if !(reference.sigma > 0.0) {
        return Err(Error::invalid("batch_loss", "sigma must be positive"));
    }
    let dev = g.affine(scores, 1.0 / reference.sigma, -reference.mu / reference.sigma)?;
    let dev = g.abs(dev)?;
    let pushed = g.affine(dev, -1.0, cfg.k)?;
    let pushed = if cfg.hinge { g.relu(pushed)? } else { pushed };
    let normal_w = g.constant(Tensor::from_fn(&[n], |i| T::of(1.0 - labels[i] as f64)))?;
    let anomal_w = g.constant(Tensor::from_fn(&[n], |i| T::of(labels[i] as f64)))?;
    let a = g.mul(dev, normal_w)?;
    let b = g.mul(pushed, anomal_w)?;
    let per_sample = g.add(a, b)?;
    g.mean(per_sample)
}
