//! Run configuration: built-in defaults, then presets, then a config file,
//! then command-line flags. The resolved result prints canonically, so a
//! written config reproduces the run exactly.

use std::path::{Path, PathBuf};

use atac_core::config::Doc;
use atac_core::data::SynthConfig;
use atac_core::experiment::ExperimentConfig;
use atac_core::training::TrainConfig;
use atac_core::{ExecMode, ModelConfig, ScoringConfig};

use crate::error::{CliError, CliResult};

/// Optional file locations; empty means unset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub train: String,
    pub test: String,
    pub checkpoint: String,
    pub resume: String,
    pub input: String,
    pub scores: String,
    pub heatmaps: String,
    pub output: String,
}

impl Paths {
    const KEYS: [&'static str; 8] = ["train", "test", "checkpoint", "resume", "input", "scores", "heatmaps", "output"];

    fn slot(&mut self, key: &str) -> &mut String {
        match key {
            "train" => &mut self.train,
            "test" => &mut self.test,
            "checkpoint" => &mut self.checkpoint,
            "resume" => &mut self.resume,
            "input" => &mut self.input,
            "scores" => &mut self.scores,
            "heatmaps" => &mut self.heatmaps,
            "output" => &mut self.output,
            _ => unreachable!("unknown path key {key}"),
        }
    }

    fn get(&self, key: &str) -> &str {
        match key {
            "train" => &self.train,
            "test" => &self.test,
            "checkpoint" => &self.checkpoint,
            "resume" => &self.resume,
            "input" => &self.input,
            "scores" => &self.scores,
            "heatmaps" => &self.heatmaps,
            "output" => &self.output,
            _ => unreachable!("unknown path key {key}"),
        }
    }

    /// The path under `key`, or a usage error naming the flag to set.
    pub fn require(&self, key: &str, flag: &str) -> CliResult<PathBuf> {
        Self::optional(self.get(key)).ok_or_else(|| CliError::Usage(format!("missing {flag} (or paths.{key} in the config)")))
    }

    pub fn get_optional(&self, key: &str) -> Option<PathBuf> {
        Self::optional(self.get(key))
    }

    pub fn optional(value: &str) -> Option<PathBuf> {
        (!value.is_empty()).then(|| PathBuf::from(value))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Force the serial numeric path.
    pub strict: bool,
    pub paths: Paths,
    pub experiment: ExperimentConfig,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            strict: false,
            paths: Paths::default(),
            experiment: ExperimentConfig::default(),
            bins: 20,
        };
        c.sync();
        c
    }
}

/// Named overlays selectable with `--preset`.
pub const PRESETS: [(&str, &str); 5] = [
    ("blobs", "[synth]\ntexture = blobs\ndefect = blot\nintensity = 0.8\n"),
    ("stripes", "[synth]\ntexture = stripes\ndefect = scratch\nintensity = 1\n"),
    ("noise", "[synth]\ntexture = noise\ndefect = patch-swap\nintensity = 1\n"),
    ("one-anomaly", "[episode]\nanomalies = 1\n"),
    ("smoke", "[episode]\nanomalies = 2\n\n[synth]\ntrain_normal = 12\ntrain_anomalous = 2\ntest_normal = 6\ntest_anomalous = 6\n\n[schedule]\nepochs = 2\nbatch_size = 8\n"),
];

pub fn preset(name: &str) -> CliResult<Doc> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::Usage(format!("unknown preset `{name}` (available: {})", names.join(", ")))
    })?;
    Ok(Doc::parse(text)?)
}

impl RunConfig {
    pub fn to_doc(&self) -> Doc {
        let mut doc = Doc::new();
        doc.set("run", "seed", self.seed);
        doc.set("run", "strict", self.strict);
        for key in Paths::KEYS {
            doc.set("paths", key, self.paths.get(key));
        }
        let e = &self.experiment;
        doc.set("episode", "anomalies", e.anomalies);
        doc.set("episode", "fit_input_norm", e.fit_input_norm);
        e.synth.write(&mut doc);
        // the run seed drives generation too
        doc.take("synth", "seed");
        e.model.write(&mut doc);
        e.scoring.write(&mut doc);
        e.train.write(&mut doc);
        doc.set("eval", "bins", self.bins);
        doc
    }

    /// Read every known key over the defaults; anything left is an error.
    pub fn from_doc(mut doc: Doc) -> CliResult<Self> {
        let mut c = Self::default();
        doc.take_parse("run", "seed", &mut c.seed)?;
        doc.take_parse("run", "strict", &mut c.strict)?;
        for key in Paths::KEYS {
            if let Some(v) = doc.take("paths", key) {
                *c.paths.slot(key) = v;
            }
        }
        let e = &mut c.experiment;
        doc.take_parse("episode", "anomalies", &mut e.anomalies)?;
        doc.take_parse("episode", "fit_input_norm", &mut e.fit_input_norm)?;
        e.synth = SynthConfig::read(&mut doc)?;
        e.model = ModelConfig::read(&mut doc)?;
        e.scoring = ScoringConfig::read(&mut doc)?;
        e.train = TrainConfig::read(&mut doc)?;
        doc.take_parse("eval", "bins", &mut c.bins)?;
        doc.ensure_consumed()?;
        c.sync();
        c.validate()?;
        Ok(c)
    }

    /// Propagate run-level settings into the component configs.
    fn sync(&mut self) {
        self.experiment.seed = self.seed;
        self.experiment.synth.seed = self.seed;
        self.experiment.train.mode = if self.strict { ExecMode::Strict } else { ExecMode::Parallel };
    }

    pub fn validate(&self) -> CliResult<()> {
        let e = &self.experiment;
        let usage = |err: atac_core::Error| CliError::Usage(err.to_string());
        e.synth.validate().map_err(usage)?;
        e.model.validate().map_err(usage)?;
        e.scoring.validate().map_err(usage)?;
        e.train.validate().map_err(usage)?;
        if self.bins == 0 {
            return Err(CliError::Usage("eval.bins must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_doc().to_string()
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> CliResult<Self> {
        Self::from_doc(Doc::parse(text)?)
    }

    /// Write the resolved config as `<dir>/<command>.resolved.ini`.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> CliResult<PathBuf> {
        let path = dir.join(format!("{command}.resolved.ini"));
        std::fs::write(&path, self.to_text()).map_err(|e| atac_core::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

/// Apply a `section.key=value` override.
pub fn set_override(doc: &mut Doc, assignment: &str) -> CliResult<()> {
    let bad = || CliError::Usage(format!("override `{assignment}` is not of the form section.key=value"));
    let (lhs, value) = assignment.split_once('=').ok_or_else(bad)?;
    let (section, key) = lhs.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || key.is_empty() {
        return Err(bad());
    }
    doc.set(section.trim(), key.trim(), value.trim());
    Ok(())
}
