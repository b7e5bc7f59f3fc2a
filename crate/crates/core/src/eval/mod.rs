//! Metrics, saliency and report files.

pub mod auroc;
pub mod gradcam;
pub mod heatmap;
pub mod report;

pub use auroc::{auroc, ranked, score_histogram, Histogram, ScoredSample};
pub use gradcam::{box_mass, gradcam, zoom_masses, GradCam};
pub use heatmap::{export_heatmap, HeatmapFiles};
pub use report::{join_labels, parse_scores, read_scores, scores_to_csv, ScoreRow, SCORE_HEADER};
