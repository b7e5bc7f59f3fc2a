//! Datasets: image files, manifests, training episodes, Cut-Mix
//! pseudo-anomalies and a synthetic defect generator.

pub mod cutmix;
pub mod episode;
pub mod manifest;
pub mod pnm;
pub mod synth;

use rayon::prelude::*;

pub use cutmix::{cutmix, paste, CutMixConfig, DonorSource, PasteRect};
pub use episode::sample_episode;
pub use manifest::{Manifest, ManifestEntry};
pub use synth::{generate_synthetic, DefectKind, SynthConfig, SynthOutput, Texture};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Real,
    CutMix,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1×C×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: u8,
    pub origin: Origin,
}

impl Sample {
    pub fn is_anomaly(&self) -> bool {
        self.label == 1
    }
}

/// Convert between grey and RGB by replication or channel mean.
fn match_channels(img: Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let (_, c, h, w) = img.dims4("load_dataset")?;
    let plane = h * w;
    match (c, channels) {
        (a, b) if a == b => Ok(img),
        (1, b) => Tensor::new(vec![1, b, h, w], img.data().repeat(b)),
        (a, 1) => {
            let d = img.data();
            let mean = (0..plane)
                .map(|p| (0..a).map(|ch| d[ch * plane + p]).sum::<f32>() / a as f32)
                .collect();
            Tensor::new(vec![1, 1, h, w], mean)
        }
        (a, b) => Err(Error::shape("load_dataset", "channels", b, a)),
    }
}

/// Decode every manifest entry, converted to `channels` and resized to
/// `resolution × resolution`. Output order equals manifest order.
pub fn load_dataset(manifest: &Manifest, resolution: usize, channels: usize) -> Result<Vec<Sample>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let img = pnm::read_image(manifest.resolve(e))?;
            let img = match_channels(img, channels)?;
            let img = kernels::bilinear_resize(&img, resolution, resolution)?;
            Ok(Sample {
                id: e.path.clone(),
                image: img,
                label: e.label,
                origin: Origin::Real,
            })
        })
        .collect()
}

/// Stack sample images into one `N×C×H×W` batch.
pub fn stack(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack_batch(&parts)
}
