//! Attention-guided cropping and the fused two-pass anomaly score.
//!
//! Pass one scores the raw image and yields the attended features. Their
//! channel mean, min-max normalised per sample and thresholded at `omega`,
//! selects the active map cells; the bounding box of those cells (with a
//! margin and a minimum size) is cut out of the input image and resampled
//! back to full resolution. Pass two scores that crop with the same
//! parameters. Each score map is pooled by the mean of its top-K cells and
//! the final score is the mean of the two pooled values.
//!
//! The crop box is a discrete function of the parameters and is treated as a
//! constant: gradients reach the parameters only through the two score maps.

use crate::config::Doc;
use crate::error::{Error, Result};
use crate::model::{self, BoundParams, ModelConfig, ModelParams, PassOutput};
use crate::tensor::{kernels, Graph, Real, Tensor, Var};

/// Channel-mean attention map of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    /// Raw channel mean, row-major.
    pub pre_norm: Vec<f64>,
    /// Min-max normalised to `[0, 1]`; all zero when `pre_norm` is constant.
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn from_pre_norm(height: usize, width: usize, pre_norm: Vec<f64>) -> Self {
        let min = pre_norm.iter().copied().fold(f64::INFINITY, f64::min);
        let max = pre_norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let values = if max > min {
            pre_norm.iter().map(|v| (v - min) / (max - min)).collect()
        } else {
            vec![0.0; pre_norm.len()]
        };
        Self {
            height,
            width,
            pre_norm,
            values,
        }
    }
}

/// Binary map of active cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Cell rectangle on the map, inclusive-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

/// Pixel rectangle in the input image, inclusive-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Tight cell box the crop was scaled from; `None` for the empty-mask
    /// fallback.
    pub source_cells: Option<CellBox>,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
            source_cells: None,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn is_full(&self, height: usize, width: usize) -> bool {
        self.x0 == 0 && self.y0 == 0 && self.x1 == width && self.y1 == height
    }

    pub fn same_pixels(&self, other: &CropBox) -> bool {
        (self.x0, self.y0, self.x1, self.y1) == (other.x0, other.y0, other.x1, other.y1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPolicy {
    /// Expansion of the tight cell box on each side, as a fraction of the
    /// map extent.
    pub margin_fraction: f64,
    /// Minimum crop size as a fraction of each image dimension.
    pub min_fraction: f64,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            margin_fraction: 0.1,
            min_fraction: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopKConfig {
    pub fraction: f64,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self { fraction: 0.10 }
    }
}

impl TopKConfig {
    /// `max(1, floor(fraction · cells))`.
    pub fn k(&self, cells: usize) -> usize {
        ((self.fraction * cells as f64).floor() as usize).clamp(1, cells.max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringConfig {
    pub omega: f64,
    pub topk: TopKConfig,
    pub crop: CropPolicy,
    /// `false` scores the raw pass only (ablation).
    pub two_pass: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            omega: 0.4,
            topk: TopKConfig::default(),
            crop: CropPolicy::default(),
            two_pass: true,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "scoring config";
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::invalid(OP, "omega must lie in (0, 1)"));
        }
        if !(self.topk.fraction > 0.0 && self.topk.fraction <= 1.0) {
            return Err(Error::invalid(OP, "topk fraction must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.crop.margin_fraction) || !(0.0..=1.0).contains(&self.crop.min_fraction) {
            return Err(Error::invalid(OP, "crop fractions must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn write(&self, doc: &mut Doc) {
        let s = "scoring";
        doc.set(s, "omega", self.omega);
        doc.set(s, "topk_fraction", self.topk.fraction);
        doc.set(s, "crop_margin", self.crop.margin_fraction);
        doc.set(s, "crop_min_fraction", self.crop.min_fraction);
        doc.set(s, "two_pass", self.two_pass);
    }

    pub fn read(doc: &mut Doc) -> Result<Self> {
        let s = "scoring";
        let mut cfg = Self::default();
        doc.take_parse(s, "omega", &mut cfg.omega)?;
        doc.take_parse(s, "topk_fraction", &mut cfg.topk.fraction)?;
        doc.take_parse(s, "crop_margin", &mut cfg.crop.margin_fraction)?;
        doc.take_parse(s, "crop_min_fraction", &mut cfg.crop.min_fraction)?;
        doc.take_parse(s, "two_pass", &mut cfg.two_pass)?;
        Ok(cfg)
    }
}

/// Per-sample channel mean of an `N×C×h×w` attended tensor.
pub fn channel_mean_map<T: Real>(att: &Tensor<T>) -> Result<Vec<AttentionMap>> {
    let (n, c, h, w) = att.dims4("channel_mean_map")?;
    if c == 0 {
        return Err(Error::invalid("channel_mean_map", "need at least one channel"));
    }
    let plane = h * w;
    Ok(att
        .data()
        .chunks(c * plane)
        .take(n)
        .map(|sample| {
            let mut acc = vec![0.0f64; plane];
            for ch in sample.chunks(plane) {
                acc.iter_mut().zip(ch).for_each(|(a, v)| *a += v.f64());
            }
            let pre_norm = acc.into_iter().map(|s| s / c as f64).collect();
            AttentionMap::from_pre_norm(h, w, pre_norm)
        })
        .collect())
}

/// Cells whose normalised value is strictly above `omega`.
pub fn threshold_mask(map: &AttentionMap, omega: f64) -> Mask {
    Mask {
        height: map.height,
        width: map.width,
        cells: map.values.iter().map(|&v| v > omega).collect(),
    }
}

/// Clamp `[lo, hi)` into `[0, extent)` and grow it to at least `min_len`,
/// shifting rather than shrinking when it hits an edge.
fn fit_span(lo: i64, hi: i64, min_len: i64, extent: i64) -> (usize, usize) {
    let (mut lo, mut hi) = (lo.max(0), hi.min(extent));
    if hi - lo < min_len {
        let deficit = min_len - (hi - lo);
        lo -= deficit / 2;
        hi += deficit - deficit / 2;
        if lo < 0 {
            hi -= lo;
            lo = 0;
        }
        if hi > extent {
            lo -= hi - extent;
            hi = extent;
        }
        lo = lo.max(0);
    }
    (lo as usize, hi as usize)
}

/// Bounding box of the active cells, expanded by the policy margin, scaled to
/// pixels, clamped, and grown to the minimum size. An empty mask yields the
/// full image.
pub fn extract_crop_box(mask: &Mask, image_dims: (usize, usize), policy: &CropPolicy) -> Result<CropBox> {
    let (img_h, img_w) = image_dims;
    let (h, w) = (mask.height, mask.width);
    if h == 0 || w == 0 || img_h == 0 || img_w == 0 || mask.cells.len() != h * w {
        return Err(Error::invalid("extract_crop_box", "inconsistent mask or image dimensions"));
    }
    let rows: Vec<usize> = (0..h).filter(|&r| mask.cells[r * w..(r + 1) * w].iter().any(|&c| c)).collect();
    let (Some(&r0), Some(&r1)) = (rows.first(), rows.last()) else {
        return Ok(CropBox::full(img_h, img_w));
    };
    let cols: Vec<usize> = (0..w).filter(|&c| (0..h).any(|r| mask.cells[r * w + c])).collect();
    let (c0, c1) = (cols[0], cols[cols.len() - 1]);
    let cells = CellBox {
        r0,
        c0,
        r1: r1 + 1,
        c1: c1 + 1,
    };

    let (sy, sx) = (img_h as f64 / h as f64, img_w as f64 / w as f64);
    let (my, mx) = (policy.margin_fraction * h as f64, policy.margin_fraction * w as f64);
    let y0 = ((cells.r0 as f64 - my) * sy).floor() as i64;
    let y1 = ((cells.r1 as f64 + my) * sy).ceil() as i64;
    let x0 = ((cells.c0 as f64 - mx) * sx).floor() as i64;
    let x1 = ((cells.c1 as f64 + mx) * sx).ceil() as i64;
    let min_h = ((policy.min_fraction * img_h as f64).ceil() as i64).max(1);
    let min_w = ((policy.min_fraction * img_w as f64).ceil() as i64).max(1);
    let (y0, y1) = fit_span(y0, y1, min_h, img_h as i64);
    let (x0, x1) = fit_span(x0, x1, min_w, img_w as i64);
    Ok(CropBox {
        x0,
        y0,
        x1,
        y1,
        source_cells: Some(cells),
    })
}

/// Cut `bx` out of every image in the batch and resample it bilinearly back
/// to the full `H×W`.
pub fn crop_and_resize<T: Real>(x: &Tensor<T>, bx: &CropBox) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("crop_and_resize")?;
    if bx.x1 > w || bx.y1 > h || bx.x0 >= bx.x1 || bx.y0 >= bx.y1 {
        return Err(Error::invalid(
            "crop_and_resize",
            format!("box {bx:?} is not inside a {h}x{w} image"),
        ));
    }
    if bx.is_full(h, w) {
        return Ok(x.clone());
    }
    let (bh, bw) = (bx.height(), bx.width());
    let mut patch = vec![T::zero(); bh * bw];
    let mut out = vec![T::zero(); n * c * h * w];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for r in 0..bh {
            let row = (bx.y0 + r) * w;
            patch[r * bw..(r + 1) * bw].copy_from_slice(&src[row + bx.x0..row + bx.x1]);
        }
        kernels::resize_plane(&patch, bh, bw, dst, h, w);
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Per-sample crop with one box per batch element.
pub fn crop_batch<T: Real>(x: &Tensor<T>, boxes: &[CropBox]) -> Result<Tensor<T>> {
    let (n, ..) = x.dims4("crop_batch")?;
    if boxes.len() != n {
        return Err(Error::shape("crop_batch", "box count", n, boxes.len()));
    }
    let parts = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| crop_and_resize(&x.slice_batch(i), b))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&parts)
}

/// Top-K mean of an `N×1×h×w` score map, as a graph op yielding `[N]`.
pub fn topk_mean<T: Real>(g: &mut Graph<T>, map: Var, cfg: &TopKConfig) -> Result<Var> {
    let cells: usize = g.shape(map)[1..].iter().product();
    if cells == 0 {
        return Err(Error::invalid("topk_mean", "empty map"));
    }
    g.topk_mean(map, cfg.k(cells))
}

/// Final score of one sample with both pooled components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyScore {
    pub value: f64,
    /// Top-K mean of the raw-pass map.
    pub raw: f64,
    /// Top-K mean of the crop-pass map; equals `raw` in single-pass mode.
    pub crop: f64,
}

pub struct AtacOutput<T> {
    /// `[N]` scores on the graph.
    pub score: Var,
    pub scores: Vec<AnomalyScore>,
    pub raw: PassOutput,
    pub cropped: Option<PassOutput>,
    pub attention: Vec<AttentionMap>,
    pub boxes: Vec<CropBox>,
    /// Second-pass input images, before input normalisation.
    pub crops: Option<Tensor<T>>,
}

/// Crop boxes pass one chooses from its attended features.
pub fn crop_boxes<T: Real>(
    attended: &Tensor<T>,
    image_dims: (usize, usize),
    cfg: &ScoringConfig,
) -> Result<(Vec<AttentionMap>, Vec<CropBox>)> {
    let maps = channel_mean_map(attended)?;
    let boxes = maps
        .iter()
        .map(|m| extract_crop_box(&threshold_mask(m, cfg.omega), image_dims, &cfg.crop))
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, boxes))
}

/// Two-pass forward on a batch of raw `[0, 1]` images.
///
/// `frozen_boxes` overrides the attention-derived crop boxes (used to hold
/// the box fixed while probing gradients).
pub fn atac_forward<T: Real>(
    g: &mut Graph<T>,
    model_cfg: &ModelConfig,
    cfg: &ScoringConfig,
    params: &BoundParams,
    images: &Tensor<T>,
    frozen_boxes: Option<&[CropBox]>,
) -> Result<AtacOutput<T>> {
    let (n, _, h, w) = images.dims4("atac_forward")?;
    let x = g.constant(model_cfg.normalize_input(images)?)?;
    let raw = model::score_pass(g, model_cfg, params, x)?;
    let (attention, natural) = crop_boxes(g.value(raw.attended), (h, w), cfg)?;
    let boxes = match frozen_boxes {
        Some(b) if b.len() != n => return Err(Error::shape("atac_forward", "frozen box count", n, b.len())),
        Some(b) => b.to_vec(),
        None => natural,
    };
    let t_raw = topk_mean(g, raw.map, &cfg.topk)?;

    let (score, cropped, crops, t_crop) = if cfg.two_pass {
        let crops = crop_batch(images, &boxes)?;
        let xc = g.constant(model_cfg.normalize_input(&crops)?)?;
        let second = model::score_pass(g, model_cfg, params, xc)?;
        let t_crop = topk_mean(g, second.map, &cfg.topk)?;
        let both = g.add(t_raw, t_crop)?;
        let score = g.affine(both, 0.5, 0.0)?;
        (score, Some(second), Some(crops), t_crop)
    } else {
        (t_raw, None, None, t_raw)
    };

    let scores = (0..n)
        .map(|i| AnomalyScore {
            value: g.value(score).data()[i].f64(),
            raw: g.value(t_raw).data()[i].f64(),
            crop: g.value(t_crop).data()[i].f64(),
        })
        .collect();
    Ok(AtacOutput {
        score,
        scores,
        raw,
        cropped,
        attention,
        boxes,
        crops,
    })
}

/// Per-sample record of an inference run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub score: AnomalyScore,
    pub crop_box: CropBox,
}

/// Score images without recording gradients, in chunks of `batch` samples.
pub fn score_images<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &ScoringConfig,
    params: &ModelParams<T>,
    images: &[Tensor<T>],
    batch: usize,
) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = Tensor::stack_batch(chunk)?;
        let mut g = Graph::new();
        let bp = params.bind_frozen(&mut g)?;
        let fwd = atac_forward(&mut g, model_cfg, cfg, &bp, &x, None)?;
        out.extend(fwd.scores.iter().zip(&fwd.boxes).map(|(s, b)| ScoreRecord {
            score: *s,
            crop_box: *b,
        }));
    }
    Ok(out)
}
