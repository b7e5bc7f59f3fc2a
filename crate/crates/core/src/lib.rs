//! Weakly supervised image anomaly detection with attention-guided
//! two-pass scoring.
//!
//! The crate holds the whole pipeline: a small reverse-mode autodiff engine,
//! the CNN with its self-attention block, attention-driven cropping and top-k
//! scoring, the deviation loss, data handling, training and evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use loss::{LossConfig, ReferenceDistribution, ReferenceMode};
pub use model::{BoundParams, InputNorm, ModelConfig, ModelParams, Params};
pub use rng::Rng;
pub use scoring::{atac_forward, score_images, AnomalyScore, AtacOutput, CropBox, ScoringConfig};
pub use tensor::{ExecMode, Graph, ReduceKind, Real, Tensor, Var};
