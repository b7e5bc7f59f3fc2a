//! Independent oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use atac_core::eval::ScoredSample;
use atac_core::model::{AttentionParams, ConvParams};
use atac_core::{Graph, ModelConfig, ModelParams, Result, Rng, Tensor, Var};

/// Mean of the `k` largest values by full descending sort.
pub fn topk_oracle(row: &[f64], k: usize) -> f64 {
    let mut v = row.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// Direct nested-loop convolution with zero padding; returns shape and data.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += xv * wdat[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

/// Smallest rectangle `(r0, c0, r1, c1)` (exclusive ends) holding every set
/// cell, found by trying every rectangle.
pub fn bbox_brute(cells: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut best: Option<((usize, usize, usize, usize), usize)> = None;
    for r0 in 0..h {
        for r1 in r0 + 1..=h {
            for c0 in 0..w {
                for c1 in c0 + 1..=w {
                    let covers = (0..h * w).all(|i| !cells[i] || (r0..r1).contains(&(i / w)) && (c0..c1).contains(&(i % w)));
                    let area = (r1 - r0) * (c1 - c0);
                    if covers && best.is_none_or(|(_, a)| area < a) {
                        best = Some(((r0, c0, r1, c1), area));
                    }
                }
            }
        }
    }
    if cells.iter().any(|&c| c) {
        best.map(|(b, _)| b)
    } else {
        None
    }
}

/// Fraction of (anomaly, normal) pairs the anomaly wins, ties counting half.
pub fn auroc_pairwise(samples: &[ScoredSample]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in samples.iter().filter(|s| s.label == 1) {
        for n in samples.iter().filter(|s| s.label == 0) {
            pairs += 1.0;
            if a.score > n.score {
                wins += 1.0;
            } else if a.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Self-attention from explicit per-position sums:
/// `out_i = f_i + gain · Σ_j softmax_j(q_i·k_j) v_j`.
pub fn attention_oracle(f: &Tensor<f64>, p: &AttentionParams<Tensor<f64>>) -> Vec<f64> {
    let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let positions = h * w;
    let fd = f.data();
    let project = |cp: &ConvParams<Tensor<f64>>, s: usize, i: usize| -> Vec<f64> {
        let out = cp.weight.shape()[0];
        (0..out)
            .map(|o| cp.bias.data()[o] + (0..c).map(|ic| cp.weight.data()[o * c + ic] * fd[(s * c + ic) * positions + i]).sum::<f64>())
            .collect()
    };
    let gain = p.gain.data()[0];
    let mut out = fd.to_vec();
    for s in 0..n {
        let q: Vec<Vec<f64>> = (0..positions).map(|i| project(&p.query, s, i)).collect();
        let k: Vec<Vec<f64>> = (0..positions).map(|i| project(&p.key, s, i)).collect();
        let v: Vec<Vec<f64>> = (0..positions).map(|i| project(&p.value, s, i)).collect();
        for i in 0..positions {
            let logits: Vec<f64> = (0..positions).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum()).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let agg: f64 = (0..positions).map(|j| e[j] / z * v[j][ch]).sum();
                out[(s * c + ch) * positions + i] += gain * agg;
            }
        }
    }
    out
}

/// Small model with a 4×4 feature map on 16×16 inputs.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_resolution: 16,
        stage_channels: vec![3, 4],
        attention_channels: vec![4],
        qk_channels: Some(2),
        ..ModelConfig::default()
    }
}

/// Initialised weights with a non-zero attention gain, so the attention
/// path carries gradient.
pub fn tiny_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    p.attention.gain = Tensor::full(p.attention.gain.shape(), 0.7);
    p
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// `Σ y ⊙ r` for a fixed random `r`: a scalar whose gradient probes the full
/// Jacobian of `y` in a random direction.
pub fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = random_tensor(g.shape(y), &mut Rng::new(seed ^ 0x5eed));
    let r = g.constant(r)?;
    let m = g.mul(y, r)?;
    g.sum(m)
}
