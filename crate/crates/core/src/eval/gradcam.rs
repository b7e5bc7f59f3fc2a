//! Grad-CAM saliency: channel weights are the spatial mean of the target's
//! gradient, the map is the ReLU of the weighted channel sum.

use crate::data::synth::DefectBox;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scoring::{atac_forward, CropBox, ScoringConfig};
use crate::tensor::{kernels, Graph, Real, Tensor, Var};
use crate::ModelConfig;

/// Saliency of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// `α_k`, one per channel.
    pub weights: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Non-negative, row-major.
    pub map: Vec<f64>,
}

impl GradCam {
    /// Bilinear upsample of the map to `out_h × out_w`.
    pub fn upsample(&self, out_h: usize, out_w: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_h * out_w];
        kernels::resize_plane(&self.map, self.height, self.width, &mut out, out_h, out_w);
        out
    }
}

/// Grad-CAM of the scalar `target` with respect to the `N×C×h×w`
/// activations `acts`, one result per sample. Clears and then overwrites the
/// graph's gradients.
pub fn gradcam<T: Real>(g: &mut Graph<T>, acts: Var, target: Var) -> Result<Vec<GradCam>> {
    let (n, c, h, w) = g.value(acts).dims4("gradcam")?;
    if !g.requires_grad(acts) {
        return Err(Error::invalid("gradcam", "activations do not carry gradients"));
    }
    if !g.requires_grad(target) {
        return Err(Error::invalid("gradcam", "target is detached from the activations"));
    }
    g.zero_grad();
    g.backward(target)?;
    let grad = g.grad(acts).unwrap_or_else(|| Tensor::zeros(&[n, c, h, w]));
    let (a, dg) = (g.value(acts).data(), grad.data());
    let plane = h * w;
    Ok((0..n)
        .map(|s| {
            let base = s * c * plane;
            let weights: Vec<f64> = (0..c)
                .map(|k| dg[base + k * plane..base + (k + 1) * plane].iter().map(|v| v.f64()).sum::<f64>() / plane as f64)
                .collect();
            let map = (0..plane)
                .map(|p| {
                    let v: f64 = (0..c).map(|k| weights[k] * a[base + k * plane + p].f64()).sum();
                    v.max(0.0)
                })
                .collect();
            GradCam {
                weights,
                height: h,
                width: w,
                map,
            }
        })
        .collect())
}

/// Share of the total saliency that falls inside `gt`, with the saliency
/// spread over `view` (the image region the scored input shows, resampled
/// to its pixel size). Parts of `gt` outside `view` carry no mass; an
/// all-zero map gives 0.
pub fn box_mass(cam: &GradCam, view: &CropBox, gt: &DefectBox) -> f64 {
    let (vw, vh) = (view.width(), view.height());
    let up = cam.upsample(vh, vw);
    let total: f64 = up.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for y in gt.y0.max(view.y0)..gt.y1.min(view.y1) {
        for x in gt.x0.max(view.x0)..gt.x1.min(view.x1) {
            inside += up[(y - view.y0) * vw + (x - view.x0)];
        }
    }
    inside / total
}

/// Saliency mass inside `gt` for the raw view and for the attention crop of
/// one image. The target is the pooled score of each pass; the activations
/// are that pass's backbone features.
pub fn zoom_masses(
    model: &ModelConfig,
    scoring: &ScoringConfig,
    params: &ModelParams<f32>,
    image: &Tensor<f32>,
    gt: &DefectBox,
) -> Result<(f64, f64)> {
    let (_, _, h, w) = image.dims4("zoom_masses")?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let two_pass = ScoringConfig {
        two_pass: true,
        ..scoring.clone()
    };
    let out = atac_forward(&mut g, model, &two_pass, &bound, image, None)?;
    let cropped = out.cropped.as_ref().expect("two-pass forward");
    let raw_target = crate::scoring::topk_mean(&mut g, out.raw.map, &scoring.topk)?;
    let crop_target = crate::scoring::topk_mean(&mut g, cropped.map, &scoring.topk)?;
    let raw_cam = gradcam(&mut g, out.raw.features, raw_target)?.remove(0);
    let crop_cam = gradcam(&mut g, cropped.features, crop_target)?.remove(0);
    Ok((
        box_mass(&raw_cam, &CropBox::full(h, w), gt),
        box_mass(&crop_cam, &out.boxes[0], gt),
    ))
}
