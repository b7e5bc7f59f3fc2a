use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use atac_core::data::{generate_synthetic, load_dataset, Manifest, ManifestEntry, Sample};
use atac_core::eval::{auroc, export_heatmap, join_labels, read_scores, score_histogram, scores_to_csv};
use atac_core::experiment::{prepare_training, score_samples};
use atac_core::scoring::AttentionMap;
use atac_core::training::{log_csv, train as train_loop, Checkpoint};
use atac_core::{atac_forward, Graph, ModelConfig, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

fn existing_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("output directory {} does not exist", dir.display())))
    }
}

/// Directory holding `file`; `.` for a bare file name.
fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Run(atac_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    let io = |e| {
        CliError::Run(atac_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    };
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if is_image(&path) {
            let rel = path.strip_prefix(root).expect("walk stays below root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

/// Samples from a manifest, an image directory (recursive, sorted) or one
/// image file. Unlabelled inputs get label 0.
fn load_inputs(input: &Path, model: &ModelConfig) -> CliResult<Vec<Sample>> {
    let manifest = if input.is_dir() {
        let mut files = Vec::new();
        collect_images(input, input, &mut files)?;
        files.sort();
        let mut m = Manifest::new(input);
        m.entries = files.into_iter().map(|path| ManifestEntry { path, label: 0 }).collect();
        m
    } else if is_image(input) {
        let mut m = Manifest::new(parent_dir(input));
        let name = input.file_name().expect("image path has a file name").to_string_lossy().into_owned();
        m.entries.push(ManifestEntry { path: name, label: 0 });
        m
    } else {
        Manifest::read(input)?
    };
    Ok(load_dataset(&manifest, model.input_resolution, model.input_channels)?)
}

/// File-name stem for a sample id.
fn stem(id: &str) -> String {
    let no_ext = match id.rsplit_once('.') {
        Some((head, ext)) if !ext.contains('/') => head,
        _ => id,
    };
    no_ext.replace(['/', '\\'], "__")
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.paths.require("output", "--out")?;
    existing_dir(&out)?;
    let data = generate_synthetic(&cfg.experiment.synth, &out)?;
    cfg.write_resolved(&out, "synth")?;
    println!("train manifest: {}", data.train_manifest.display());
    println!("test manifest: {}", data.test_manifest.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let manifest_path = cfg.paths.require("train", "--train")?;
    let out = cfg.paths.require("output", "--out")?;
    existing_dir(&out)?;
    let exp = &cfg.experiment;
    let manifest = Manifest::read(&manifest_path)?;
    let samples = load_dataset(&manifest, exp.model.input_resolution, exp.model.input_channels)?;
    let (episode, fresh) = prepare_training(exp, &samples)?;
    let start = match cfg.paths.get_optional("resume") {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            if ck.seed != cfg.seed {
                return Err(CliError::Usage(format!(
                    "{} was trained with seed {}, not {}",
                    path.display(),
                    ck.seed,
                    cfg.seed
                )));
            }
            ck
        }
        None => fresh,
    };
    cfg.write_resolved(&out, "train")?;
    let outcome = train_loop(start, &episode, &exp.train, |row, _| {
        println!(
            "epoch {:>3}  lr {:.0e}  loss {:.4}  normal {:.4}  anomaly {:.4}",
            row.epoch, row.lr, row.mean_loss, row.mean_score_normal, row.mean_score_anomaly
        );
        Ok(())
    })?;
    let ck_path = out.join("checkpoint.atac");
    outcome.checkpoint.save(&ck_path)?;
    write_file(&out.join("train_log.csv"), &log_csv(&outcome.log))?;
    println!("checkpoint: {}", ck_path.display());

    let (_, scored) = score_samples(&outcome.checkpoint, &episode, exp.train.schedule.batch_size)?;
    let normal = mean(scored.iter().filter(|s| s.label == 0).map(|s| s.score));
    let anomaly = mean(scored.iter().filter(|s| s.label == 1).map(|s| s.score));
    match (normal, anomaly) {
        (Some(n), Some(a)) => println!("train separation: {:.4} (anomaly mean {a:.4}, normal mean {n:.4})", a - n),
        _ => println!("train separation: n/a (episode holds one class)"),
    }
    Ok(())
}

pub fn score(cfg: &RunConfig) -> CliResult<()> {
    let ck = Checkpoint::load(cfg.paths.require("checkpoint", "--checkpoint")?)?;
    let input = cfg.paths.require("input", "--input")?;
    let out = cfg.paths.require("output", "--out")?;
    let dir = parent_dir(&out);
    existing_dir(&dir)?;
    let samples = load_inputs(&input, &ck.model)?;
    let (rows, _) = score_samples(&ck, &samples, cfg.experiment.train.schedule.batch_size)?;
    write_file(&out, &scores_to_csv(&rows)?)?;
    cfg.write_resolved(&dir, "score")?;
    println!("scored {} images: {}", rows.len(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let scores_path = cfg.paths.require("scores", "--scores")?;
    let labels = Manifest::read(cfg.paths.require("test", "--labels")?)?;
    let rows = read_scores(&scores_path)?;
    let joined = join_labels(&rows, &labels)?;
    let value = auroc(&joined)?;
    let hist_path = cfg
        .paths
        .get_optional("output")
        .unwrap_or_else(|| parent_dir(&scores_path).join("histogram.csv"));
    let dir = parent_dir(&hist_path);
    existing_dir(&dir)?;
    write_file(&hist_path, &score_histogram(&joined, cfg.bins)?.to_csv())?;
    cfg.write_resolved(&dir, "eval")?;

    let normals = joined.iter().filter(|s| s.label == 0).count();
    println!("AUROC: {value:.4}");
    println!("samples: {normals} normal, {} anomalous", joined.len() - normals);
    println!("histogram: {}", hist_path.display());

    if let Some(heat_dir) = cfg.paths.get_optional("heatmaps") {
        existing_dir(&heat_dir)?;
        let ck = Checkpoint::load(cfg.paths.require("checkpoint", "--checkpoint")?)?;
        let samples = load_dataset(&labels, ck.model.input_resolution, ck.model.input_channels)?;
        let n = export_all(&ck, &samples, &heat_dir, cfg.experiment.train.schedule.batch_size)?;
        println!("heatmaps: {n} images in {}", heat_dir.display());
    }
    Ok(())
}

pub fn heatmap(cfg: &RunConfig) -> CliResult<()> {
    let ck = Checkpoint::load(cfg.paths.require("checkpoint", "--checkpoint")?)?;
    let input = cfg.paths.require("input", "--input")?;
    let out = cfg.paths.require("output", "--out")?;
    existing_dir(&out)?;
    let samples = load_inputs(&input, &ck.model)?;
    let n = export_all(&ck, &samples, &out, cfg.experiment.train.schedule.batch_size)?;
    cfg.write_resolved(&out, "heatmap")?;
    println!("heatmaps: {n} images in {}", out.display());
    Ok(())
}

/// Per sample: the attention map with its ω mask, and the raw-pass anomaly
/// map, each as map, overlay and (attention only) mask images.
fn export_all(ck: &Checkpoint, samples: &[Sample], dir: &Path, batch: usize) -> CliResult<usize> {
    let mut index = String::from("id,attention_map,anomaly_map\n");
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let x = Tensor::stack_batch(&images)?;
        let mut g = Graph::new();
        let bound = ck.params.bind_frozen(&mut g)?;
        let out = atac_forward(&mut g, &ck.model, &ck.scoring, &bound, &x, None)?;
        let map = g.value(out.raw.map);
        let (_, _, h, w) = map.dims4("heatmap")?;
        for (i, s) in chunk.iter().enumerate() {
            let name = stem(&s.id);
            let att = export_heatmap(&out.attention[i], &s.image, &dir.join(format!("{name}_attention")), Some(ck.scoring.omega))?;
            let values = map.data()[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f64).collect();
            let anomaly = AttentionMap::from_pre_norm(h, w, values);
            let an = export_heatmap(&anomaly, &s.image, &dir.join(format!("{name}_anomaly")), None)?;
            let _ = writeln!(index, "{},{},{}", s.id, att.map.display(), an.map.display());
        }
    }
    write_file(&dir.join("heatmaps.csv"), &index)?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_flatten_directories_and_drop_extensions() {
        assert_eq!(stem("test/anomaly/00001.pgm"), "test__anomaly__00001");
        assert_eq!(stem("a.b/c"), "a.b__c");
        assert_eq!(stem("plain"), "plain");
    }

    #[test]
    fn directory_inputs_are_sorted_and_recursive() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        let img = Tensor::full(&[1, 1, 4, 4], 0.5f32);
        for name in ["b.pgm", "a.pgm", "sub/c.PGM"] {
            atac_core::data::pnm::write_image(dir.path().join(name), &img).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let model = ModelConfig {
            input_resolution: 8,
            ..Default::default()
        };
        let s = load_inputs(dir.path(), &model).unwrap();
        let ids: Vec<&str> = s.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a.pgm", "b.pgm", "sub/c.PGM"]);
        assert_eq!(s[0].image.shape(), &[1, 1, 8, 8]);
    }
}
