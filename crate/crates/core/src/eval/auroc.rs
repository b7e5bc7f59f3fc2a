//! Area under the ROC curve and score histograms.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().find(|s| !s.score.is_finite()) {
        Some(s) => Err(Error::NonFinite(format!("score of `{}`", s.id))),
        None => Ok(()),
    }
}

/// Mann–Whitney estimate of P(anomaly score > normal score), ties counting
/// one half, from midranks.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let n_pos = samples.iter().filter(|s| s.label == 1).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auroc", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].score.total_cmp(&samples[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && samples[order[j]].score == samples[order[i]].score {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| samples[k].label == 1).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Shared equal-width bins over the joint score range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomaly: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,normal,anomaly\n");
        for i in 0..self.normal.len() {
            let _ = writeln!(out, "{},{},{},{}", self.edges[i], self.edges[i + 1], self.normal[i], self.anomaly[i]);
        }
        out
    }
}

pub fn score_histogram(samples: &[ScoredSample], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("score_histogram", "need at least one bin"));
    }
    check_finite(samples)?;
    let lo = samples.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if samples.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut h = Histogram {
        edges,
        normal: vec![0; bins],
        anomaly: vec![0; bins],
    };
    for s in samples {
        let b = (((s.score - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1);
        let counts = if s.label == 1 { &mut h.anomaly } else { &mut h.normal };
        counts[b] += 1;
    }
    Ok(h)
}

/// Scores sorted descending with ties by id, for stable reports.
pub fn ranked(samples: &[ScoredSample]) -> Vec<&ScoredSample> {
    let mut v: Vec<&ScoredSample> = samples.iter().collect();
    v.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    v
}
