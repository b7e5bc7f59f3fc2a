//! Shared fixtures for the benchmarks in `benches/`.

use atac_core::data::synth::{self, Split};
use atac_core::data::{Origin, Sample, SynthConfig};
use atac_core::training::{AdamConfig, Checkpoint};
use atac_core::{InputNorm, ModelConfig, ModelParams, ScoringConfig};

/// `normals` texture images followed by `anomalies` defective ones, at the
/// default resolution.
pub fn samples(normals: usize, anomalies: usize) -> Vec<Sample> {
    let cfg = SynthConfig::default();
    let make = |label: u8, i: usize| Sample {
        id: format!("{label}-{i}"),
        image: synth::render(&cfg, Split::Train, label, i).image,
        label,
        origin: Origin::Synthetic,
    };
    (0..normals).map(|i| make(0, i)).chain((0..anomalies).map(|i| make(1, i))).collect()
}

/// Freshly initialised default model with input statistics fitted on `data`.
pub fn checkpoint(data: &[Sample], scoring: ScoringConfig) -> Checkpoint {
    let model = ModelConfig {
        input_norm: Some(InputNorm::fit(data.iter().map(|s| &s.image)).expect("non-empty data")),
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&model, 0).expect("default model initialises");
    Checkpoint::initial(model, scoring, params, AdamConfig::default(), 0)
}
