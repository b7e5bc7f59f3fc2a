//! The three learnable stages: backbone feature extractor, attention
//! augmentation block, and the 1×1 anomaly mapper.
//!
//! Parameters are held in [`Params<P>`], generic over the leaf type: with
//! `P = Tensor<T>` it owns the weights, with `P = Var` it is the same set of
//! weights bound onto a [`Graph`]. The stage functions only ever see the
//! bound form, so every forward pass through the network reads exactly the
//! variables produced by one [`ModelParams::bind`] call.

use crate::config::{self, Doc};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Optional per-channel input standardisation applied after pixels are
/// scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    /// Per-channel pixel mean and population std over `N×C×H×W` images.
    /// A flat channel gets std 1 so the map stays finite.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for img in images {
            let (_, c, h, w) = img.dims4("InputNorm::fit")?;
            if sums.is_empty() {
                sums = vec![(0.0, 0.0, 0); c];
            } else if sums.len() != c {
                return Err(Error::shape("InputNorm::fit", "channels (dim 1)", sums.len(), c));
            }
            for (i, plane) in img.data().chunks(h * w).enumerate() {
                let acc = &mut sums[i % c];
                for &v in plane {
                    acc.0 += v as f64;
                    acc.1 += (v as f64) * (v as f64);
                }
                acc.2 += plane.len();
            }
        }
        if sums.is_empty() {
            return Err(Error::invalid("InputNorm::fit", "no images"));
        }
        let (mean, std) = sums
            .iter()
            .map(|&(s, sq, n)| {
                let m = s / n as f64;
                let var = (sq / n as f64 - m * m).max(0.0);
                (m, if var > 1e-12 { var.sqrt() } else { 1.0 })
            })
            .unzip();
        Ok(Self { mean, std })
    }
}

/// Network description. Serialised verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Square input side length in pixels.
    pub input_resolution: usize,
    /// Output channels of each stride-2 backbone stage.
    pub stage_channels: Vec<usize>,
    pub kernel_size: usize,
    /// Output channels of each convolution in the attention block, applied
    /// before self-attention.
    pub attention_channels: Vec<usize>,
    /// Query/key width of self-attention; `None` means `C / 8`, at least 1.
    pub qk_channels: Option<usize>,
    pub input_norm: Option<InputNorm>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_resolution: 64,
            stage_channels: vec![16, 32, 64, 64],
            kernel_size: 3,
            attention_channels: vec![64],
            qk_channels: None,
            input_norm: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "model config";
        if self.stage_channels.len() < 2 {
            return Err(Error::invalid(OP, "backbone needs at least 2 stages"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(OP, "kernel_size must be odd"));
        }
        if self.input_channels == 0 || self.stage_channels.contains(&0) || self.attention_channels.contains(&0) {
            return Err(Error::invalid(OP, "channel counts must be positive"));
        }
        if self.attention_channels.is_empty() {
            return Err(Error::invalid(OP, "attention block needs at least one convolution"));
        }
        if self.qk_channels == Some(0) {
            return Err(Error::invalid(OP, "qk_channels must be positive"));
        }
        let side = self.feature_resolution();
        if side < 4 {
            return Err(Error::invalid(
                OP,
                format!("final feature map is {side}x{side}; at least 4x4 is required"),
            ));
        }
        if let Some(norm) = &self.input_norm {
            if norm.mean.len() != self.input_channels || norm.std.len() != self.input_channels {
                return Err(Error::invalid(OP, "input_norm needs one mean and std per channel"));
            }
            if norm.std.iter().any(|s| *s <= 0.0) {
                return Err(Error::invalid(OP, "input_norm std must be positive"));
            }
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// Spatial side of the backbone output.
    pub fn feature_resolution(&self) -> usize {
        let (k, p) = (self.kernel_size, self.padding());
        self.stage_channels.iter().fold(self.input_resolution, |side, _| {
            if side + 2 * p < k {
                0
            } else {
                (side + 2 * p - k) / 2 + 1
            }
        })
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated: at least two stages")
    }

    /// Channels of the attention block output (and its value projection).
    pub fn attended_channels(&self) -> usize {
        *self.attention_channels.last().expect("validated: non-empty")
    }

    pub fn qk(&self) -> usize {
        self.qk_channels.unwrap_or((self.attended_channels() / 8).max(1))
    }

    /// Shapes of every parameter in canonical order.
    pub fn param_shapes(&self) -> Params<Vec<usize>> {
        let k = self.kernel_size;
        let conv = |o: usize, i: usize, k: usize| ConvParams {
            weight: vec![o, i, k, k],
            bias: vec![o],
        };
        let mut prev = self.input_channels;
        let backbone = self
            .stage_channels
            .iter()
            .map(|&c| {
                let p = conv(c, prev, k);
                prev = c;
                p
            })
            .collect();
        let convs = self
            .attention_channels
            .iter()
            .map(|&c| {
                let p = conv(c, prev, k);
                prev = c;
                p
            })
            .collect();
        let (c, q) = (self.attended_channels(), self.qk());
        Params {
            backbone,
            attention: AttentionParams {
                convs,
                query: conv(q, c, 1),
                key: conv(q, c, 1),
                value: conv(c, c, 1),
                gain: vec![1],
            },
            mapper: conv(1, c, 1),
        }
    }

    pub fn write(&self, doc: &mut Doc) {
        let s = "model";
        doc.set(s, "input_channels", self.input_channels);
        doc.set(s, "input_resolution", self.input_resolution);
        doc.set(s, "stage_channels", config::join(&self.stage_channels));
        doc.set(s, "kernel_size", self.kernel_size);
        doc.set(s, "attention_channels", config::join(&self.attention_channels));
        doc.set(s, "qk_channels", self.qk_channels.map_or("auto".to_string(), |v| v.to_string()));
        match &self.input_norm {
            None => {
                doc.set(s, "input_mean", "none");
                doc.set(s, "input_std", "none");
            }
            Some(n) => {
                doc.set(s, "input_mean", config::join(&n.mean));
                doc.set(s, "input_std", config::join(&n.std));
            }
        }
    }

    pub fn read(doc: &mut Doc) -> Result<Self> {
        let s = "model";
        let mut cfg = Self::default();
        doc.take_parse(s, "input_channels", &mut cfg.input_channels)?;
        doc.take_parse(s, "input_resolution", &mut cfg.input_resolution)?;
        if let Some(v) = doc.take(s, "stage_channels") {
            cfg.stage_channels = config::split(&v, "model.stage_channels")?;
        }
        doc.take_parse(s, "kernel_size", &mut cfg.kernel_size)?;
        if let Some(v) = doc.take(s, "attention_channels") {
            cfg.attention_channels = config::split(&v, "model.attention_channels")?;
        }
        if let Some(v) = doc.take(s, "qk_channels") {
            cfg.qk_channels = match v.as_str() {
                "auto" => None,
                other => Some(config::parse_value(other, "model.qk_channels")?),
            };
        }
        let mean = doc.take(s, "input_mean");
        let std = doc.take(s, "input_std");
        cfg.input_norm = match (mean.as_deref(), std.as_deref()) {
            (None | Some("none"), None | Some("none")) => None,
            (Some(m), Some(sd)) => Some(InputNorm {
                mean: config::split(m, "model.input_mean")?,
                std: config::split(sd, "model.input_std")?,
            }),
            _ => return Err(Error::Config("input_mean and input_std must be given together".into())),
        };
        Ok(cfg)
    }

    /// Apply [`InputNorm`] to an image batch (identity without one).
    pub fn normalize_input<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(norm) = &self.input_norm else {
            return Ok(x.clone());
        };
        let (_, c, h, w) = x.dims4("normalize_input")?;
        if c != norm.mean.len() {
            return Err(Error::shape("normalize_input", "channels (dim 1)", norm.mean.len(), c));
        }
        let mut out = x.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (m, s) = (T::of(norm.mean[i % c]), T::of(norm.std[i % c]));
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P> {
    pub weight: P,
    pub bias: P,
}

/// Attention block σ: a convolution stack followed by single-head spatial
/// self-attention with a residual gain.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub convs: Vec<ConvParams<P>>,
    pub query: ConvParams<P>,
    pub key: ConvParams<P>,
    pub value: ConvParams<P>,
    pub gain: P,
}

/// Complete parameter set; `P` is the leaf type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub backbone: Vec<ConvParams<P>>,
    pub attention: AttentionParams<P>,
    pub mapper: ConvParams<P>,
}

/// Owned weights.
pub type ModelParams<T> = Params<Tensor<T>>;
/// Weights bound to a graph.
pub type BoundParams = Params<Var>;

impl<P> Params<P> {
    /// Visit every leaf with its canonical name, in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a P)) {
        let mut conv = |prefix: String, c: &'a ConvParams<P>| {
            f(format!("{prefix}.weight"), &c.weight);
            f(format!("{prefix}.bias"), &c.bias);
        };
        for (i, c) in self.backbone.iter().enumerate() {
            conv(format!("backbone.{i}"), c);
        }
        for (i, c) in self.attention.convs.iter().enumerate() {
            conv(format!("attention.conv.{i}"), c);
        }
        conv("attention.query".into(), &self.attention.query);
        conv("attention.key".into(), &self.attention.key);
        conv("attention.value".into(), &self.attention.value);
        conv("mapper".into(), &self.mapper);
        f("attention.gain".into(), &self.attention.gain);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(|_, p| out.push(p));
        out
    }

    pub fn len(&self) -> usize {
        self.leaves().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Map every leaf, preserving structure.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Result<Q>) -> Result<Params<Q>> {
        let mut conv = |prefix: String, c: &ConvParams<P>| -> Result<ConvParams<Q>> {
            Ok(ConvParams {
                weight: f(&format!("{prefix}.weight"), &c.weight)?,
                bias: f(&format!("{prefix}.bias"), &c.bias)?,
            })
        };
        let backbone = self
            .backbone
            .iter()
            .enumerate()
            .map(|(i, c)| conv(format!("backbone.{i}"), c))
            .collect::<Result<_>>()?;
        let convs = self
            .attention
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| conv(format!("attention.conv.{i}"), c))
            .collect::<Result<_>>()?;
        let query = conv("attention.query".into(), &self.attention.query)?;
        let key = conv("attention.key".into(), &self.attention.key)?;
        let value = conv("attention.value".into(), &self.attention.value)?;
        let mapper = conv("mapper".into(), &self.mapper)?;
        let gain = f("attention.gain", &self.attention.gain)?;
        Ok(Params {
            backbone,
            attention: AttentionParams {
                convs,
                query,
                key,
                value,
                gain,
            },
            mapper,
        })
    }

    /// Rebuild from leaves in canonical order, using `self` as the template.
    pub fn with_leaves<Q>(&self, leaves: Vec<Q>) -> Result<Params<Q>> {
        if leaves.len() != self.len() {
            return Err(Error::shape("params", "leaf count", self.len(), leaves.len()));
        }
        let mut it = leaves.into_iter();
        self.map(|_, _| Ok(it.next().expect("length checked")))
    }
}

impl<T: Real> ModelParams<T> {
    /// Kaiming-uniform (fan-in) weights, fan-in uniform biases, gain 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        // canonical order visits each weight right before its bias
        let mut fan_in = 1usize;
        cfg.param_shapes().map(|name, shape| {
            Ok(if name == "attention.gain" {
                Tensor::zeros(shape)
            } else if name.ends_with(".weight") {
                fan_in = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, &mut rng)
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, &mut rng)
            })
        })
    }

    /// Register every tensor as a gradient-requiring leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundParams> {
        self.map(|_, t| g.param(t.clone()))
    }

    /// Register every tensor as a constant on `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Result<BoundParams> {
        self.map(|_, t| g.constant(t.clone()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.map(|_, t| Ok(t.cast())).expect("cast is infallible")
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        let names = self.names();
        for ((name, t), shape) in names.iter().zip(self.leaves()).zip(expected.leaves()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(
                    "params",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        if self.len() != expected.len() {
            return Err(Error::shape("params", "leaf count", expected.len(), self.len()));
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }
}

fn conv_relu(g: &mut Graph<impl Real>, x: Var, c: &ConvParams<Var>, stride: usize, pad: usize) -> Result<Var> {
    let y = g.conv2d(x, c.weight, c.bias, stride, pad)?;
    g.relu(y)
}

/// Backbone φ: stride-2 convolution stages with ReLU.
pub fn feature_extract<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &BoundParams, x: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(x).dims4("feature_extract")?;
    if h != cfg.input_resolution || w != cfg.input_resolution {
        return Err(Error::invalid(
            "feature_extract",
            format!(
                "input is {h}x{w}, model expects {r}x{r}",
                r = cfg.input_resolution
            ),
        ));
    }
    if c != cfg.input_channels {
        return Err(Error::shape("feature_extract", "input channels (dim 1)", cfg.input_channels, c));
    }
    let mut f = x;
    for stage in &p.backbone {
        f = conv_relu(g, f, stage, 2, cfg.kernel_size / 2)?;
    }
    Ok(f)
}

/// Single-head dot-product attention over all `h·w` positions with a
/// residual gain: `out = f + gain · V·softmax(QᵀK)ᵀ`.
pub fn self_attention<T: Real>(g: &mut Graph<T>, p: &AttentionParams<Var>, f: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(f).dims4("self_attention")?;
    let positions = h * w;
    let q = g.conv2d(f, p.query.weight, p.query.bias, 1, 0)?;
    let k = g.conv2d(f, p.key.weight, p.key.bias, 1, 0)?;
    let v = g.conv2d(f, p.value.weight, p.value.bias, 1, 0)?;
    let qk = g.shape(q)[1];
    let vc = g.shape(v)[1];
    if vc != c {
        return Err(Error::shape("self_attention", "value channels", c, vc));
    }
    let q = g.reshape(q, &[n, qk, positions])?;
    let k = g.reshape(k, &[n, qk, positions])?;
    let v = g.reshape(v, &[n, c, positions])?;
    let qt = g.transpose(q)?;
    let affinity = g.matmul(qt, k)?;
    let weights = g.softmax(affinity, 2)?;
    let wt = g.transpose(weights)?;
    let aggregated = g.matmul(v, wt)?;
    let aggregated = g.reshape(aggregated, &[n, c, h, w])?;
    let scaled = g.scale_by(aggregated, p.gain)?;
    g.add(f, scaled)
}

/// Attention block σ: convolution stack then self-attention.
pub fn attention_augment<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &BoundParams, f: Var) -> Result<Var> {
    let mut a = f;
    for conv in &p.attention.convs {
        a = conv_relu(g, a, conv, 1, cfg.kernel_size / 2)?;
    }
    self_attention(g, &p.attention, a)
}

/// Mapper τ: 1×1 convolution to a single-channel, unsquashed score map.
pub fn anomaly_map<T: Real>(g: &mut Graph<T>, p: &BoundParams, att: Var) -> Result<Var> {
    g.conv2d(att, p.mapper.weight, p.mapper.bias, 1, 0)
}

/// One pass `τ(σ(φ(x)))`, also returning the backbone features and the
/// attended features.
pub struct PassOutput {
    pub features: Var,
    pub attended: Var,
    pub map: Var,
}

pub fn score_pass<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &BoundParams, x: Var) -> Result<PassOutput> {
    let features = feature_extract(g, cfg, p, x)?;
    let attended = attention_augment(g, cfg, p, features)?;
    let map = anomaly_map(g, p, attended)?;
    Ok(PassOutput {
        features,
        attended,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_norm_fit_matches_direct_moments() {
        let a = Tensor::new(vec![1, 2, 1, 2], vec![0.0f32, 1.0, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![1, 2, 1, 2], vec![0.5f32, 0.5, 0.5, 0.5]).unwrap();
        let n = InputNorm::fit([&a, &b]).unwrap();
        assert!((n.mean[0] - 0.5).abs() < 1e-12);
        assert!((n.std[0] - 0.125f64.sqrt()).abs() < 1e-12);
        assert_eq!((n.mean[1], n.std[1]), (0.5, 1.0));
        assert!(InputNorm::fit(std::iter::empty()).is_err());
    }

    fn small() -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            input_resolution: 16,
            stage_channels: vec![4, 8],
            kernel_size: 3,
            attention_channels: vec![8],
            qk_channels: None,
            input_norm: None,
        }
    }

    #[test]
    fn default_feature_map_is_4x4() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_resolution(), 4);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let bp = p.bind_frozen(&mut g).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        let f = feature_extract(&mut g, &cfg, &bp, x).unwrap();
        assert_eq!(g.shape(f), &[1, 64, 4, 4]);
        let a = attention_augment(&mut g, &cfg, &bp, f).unwrap();
        assert_eq!(g.shape(a), &[1, 64, 4, 4]);
    }

    #[test]
    fn rejects_too_small_feature_map() {
        let cfg = ModelConfig {
            input_resolution: 8,
            ..small()
        };
        assert!(cfg.validate().is_err());
        let one_stage = ModelConfig {
            stage_channels: vec![4],
            ..small()
        };
        assert!(one_stage.validate().is_err());
    }

    #[test]
    fn resolution_mismatch_is_reported() {
        let cfg = small();
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let bp = p.bind(&mut g).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 1, 20, 20])).unwrap();
        let err = feature_extract(&mut g, &cfg, &bp, x).unwrap_err();
        assert!(err.to_string().contains("20x20"), "{err}");
    }

    #[test]
    fn zero_image_isolates_biases() {
        // 1x1 kernels avoid zero-padding borders, so every stage sees a
        // per-channel constant and the output is pure bias propagation
        let cfg = ModelConfig {
            kernel_size: 1,
            ..small()
        };
        let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let bp = p.bind_frozen(&mut g).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        let f = feature_extract(&mut g, &cfg, &bp, x).unwrap();
        let v = g.value(f);
        let mut expected = vec![0.0f64; 1];
        for stage in &p.backbone {
            let w = stage.weight.data();
            let b = stage.bias.data();
            let inputs = expected.len();
            expected = (0..b.len())
                .map(|o| {
                    let s: f64 = (0..inputs).map(|i| w[o * inputs + i] * expected[i]).sum();
                    (s + b[o]).max(0.0)
                })
                .collect();
        }
        for (c, plane) in v.data().chunks(16).enumerate() {
            for &e in plane {
                assert!((e - expected[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_batch_items_match() {
        let cfg = small();
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let mut rng = Rng::new(9);
        let one = Tensor::<f32>::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let both = Tensor::stack_batch(&[one.clone(), one]).unwrap();
        let mut g = Graph::new();
        let bp = p.bind_frozen(&mut g).unwrap();
        let x = g.constant(both).unwrap();
        let out = score_pass(&mut g, &cfg, &bp, x).unwrap();
        let m = g.value(out.map).data();
        assert_eq!(&m[..16], &m[16..]);
    }

    #[test]
    fn canonical_names_are_unique() {
        let names = ModelConfig::default().param_shapes().names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names.last().unwrap(), "attention.gain");
    }

    #[test]
    fn mapper_is_single_channel() {
        let shapes = ModelConfig::default().param_shapes();
        assert_eq!(shapes.mapper.weight, vec![1, 64, 1, 1]);
        assert_eq!(shapes.attention.query.weight, vec![8, 64, 1, 1]);
        assert_eq!(shapes.attention.value.weight, vec![64, 64, 1, 1]);
    }
}
