//! `atac`: synthesise datasets, train, score, evaluate and export heatmaps.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use atac_core::config::Doc;
use clap::{Args, Parser, Subcommand};

use config::{preset, set_override, RunConfig};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "atac", version, about = "Attention-cropped two-pass anomaly detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Layers apply in order: defaults,
/// presets, config file, then flags.
#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Named overlay (blobs, stripes, noise, one-anomaly, smoke); repeatable.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Vec<String>,
    /// Seed for data generation, episode sampling and training. Falls back
    /// to ATAC_SEED when neither a flag nor the config sets it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force the serial numeric path.
    #[arg(long, global = true)]
    strict: bool,
    /// Override any config value; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic textured dataset with train/test manifests.
    Synth(SynthArgs),
    /// Train on a manifest and write a checkpoint plus a per-epoch log.
    Train(TrainArgs),
    /// Score images with a checkpoint and write a per-sample CSV.
    Score(ScoreArgs),
    /// AUROC and score histogram of a score CSV against labels.
    Eval(EvalArgs),
    /// Export attention and anomaly heatmaps for images.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Existing directory to write the dataset into.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// stripes, blobs or noise.
    #[arg(long)]
    texture: Option<String>,
    /// scratch, blot or patch-swap.
    #[arg(long)]
    defect: Option<String>,
    /// Defect strength in [0, 1].
    #[arg(long)]
    intensity: Option<f64>,
    /// Image side length in pixels.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training manifest (`path<TAB>label` lines).
    #[arg(long, value_name = "MANIFEST")]
    train: Option<PathBuf>,
    /// Existing directory for the checkpoint and log.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Labelled anomalies in the training episode.
    #[arg(long)]
    anomalies: Option<usize>,
    /// Total epochs; 0 writes the initial checkpoint.
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per optimiser step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Train the raw pass only.
    #[arg(long)]
    single_pass: bool,
    /// Disable on-the-fly Cut-Mix pseudo-anomalies.
    #[arg(long)]
    no_cutmix: bool,
    /// Continue from a checkpoint written with the same seed.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Manifest, image directory or single image.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// CSV to write; its directory must exist.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Score CSV written by `score`.
    #[arg(long, value_name = "FILE")]
    scores: Option<PathBuf>,
    /// Manifest holding the ground-truth labels.
    #[arg(long, value_name = "MANIFEST")]
    labels: Option<PathBuf>,
    /// Histogram CSV to write (default: histogram.csv next to the scores).
    #[arg(long, value_name = "FILE")]
    histogram: Option<PathBuf>,
    /// Histogram bin count.
    #[arg(long)]
    bins: Option<usize>,
    /// Also export heatmaps of every labelled image into this directory.
    #[arg(long, value_name = "DIR", requires = "checkpoint")]
    heatmaps: Option<PathBuf>,
    /// Checkpoint used for heatmaps.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Manifest, image directory or single image.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Existing directory for the images.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn set(doc: &mut Doc, section: &str, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        doc.set(section, key, v.to_string());
    }
}

fn set_path(doc: &mut Doc, key: &str, value: &Option<PathBuf>) {
    set(doc, "paths", key, value.as_ref().map(|p| p.display()));
}

impl Command {
    fn apply(&self, doc: &mut Doc) {
        match self {
            Command::Synth(a) => {
                set_path(doc, "output", &a.out);
                set(doc, "synth", "texture", a.texture.as_ref());
                set(doc, "synth", "defect", a.defect.as_ref());
                set(doc, "synth", "intensity", a.intensity);
                set(doc, "synth", "resolution", a.resolution);
            }
            Command::Train(a) => {
                set_path(doc, "train", &a.train);
                set_path(doc, "output", &a.out);
                set_path(doc, "resume", &a.resume);
                set(doc, "episode", "anomalies", a.anomalies);
                set(doc, "schedule", "epochs", a.epochs);
                set(doc, "schedule", "batch_size", a.batch_size);
                set(doc, "schedule", "base_lr", a.lr);
                if a.single_pass {
                    doc.set("scoring", "two_pass", false);
                }
                if a.no_cutmix {
                    doc.set("cutmix", "enabled", false);
                }
            }
            Command::Score(a) => {
                set_path(doc, "checkpoint", &a.checkpoint);
                set_path(doc, "input", &a.input);
                set_path(doc, "output", &a.out);
            }
            Command::Eval(a) => {
                set_path(doc, "scores", &a.scores);
                set_path(doc, "test", &a.labels);
                set_path(doc, "output", &a.histogram);
                set_path(doc, "heatmaps", &a.heatmaps);
                set_path(doc, "checkpoint", &a.checkpoint);
                set(doc, "eval", "bins", a.bins);
            }
            Command::Heatmap(a) => {
                set_path(doc, "checkpoint", &a.checkpoint);
                set_path(doc, "input", &a.input);
                set_path(doc, "output", &a.out);
            }
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let c = &cli.common;
    let mut doc = Doc::new();
    for name in &c.preset {
        doc.merge(&preset(name)?);
    }
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file = Doc::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        doc.merge(&file);
    }
    cli.command.apply(&mut doc);
    set(&mut doc, "run", "seed", c.seed);
    if c.strict {
        doc.set("run", "strict", true);
    }
    for assignment in &c.overrides {
        set_override(&mut doc, assignment)?;
    }
    if doc.get("run", "seed").is_none() {
        if let Ok(v) = std::env::var("ATAC_SEED") {
            doc.set("run", "seed", v);
        }
    }
    RunConfig::from_doc(doc)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Score(_) => commands::score(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Heatmap(_) => commands::heatmap(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
