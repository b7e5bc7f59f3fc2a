use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atac_core::training::Checkpoint;
use atac_core::ModelParams;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

fn atac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atac"))
        .current_dir(dir)
        .env_remove("ATAC_SEED")
        .args(args)
        .output()
        .expect("spawn atac")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = atac(dir, args);
    assert!(
        out.status.success(),
        "atac {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Every file below `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Like `tree`, minus the resolved configs (they echo the output path).
fn outputs(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut t = tree(root);
    t.retain(|k, _| !k.to_string_lossy().ends_with(".resolved.ini"));
    t
}

/// Smoke-sized dataset in `<tmp>/data`.
fn dataset(seed: &str) -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("data")).unwrap();
    ok(tmp.path(), &["synth", "--preset", "smoke", "--seed", seed, "--out", "data"]);
    tmp
}

fn mkdir(root: &Path, name: &str) {
    std::fs::create_dir_all(root.join(name)).unwrap();
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["train", "--help"], &["eval", "--help"]] {
        assert_eq!(code(&atac(tmp.path(), args)), 0, "{args:?}");
    }
    assert_eq!(code(&atac(tmp.path(), &["--bogus"])), 2);
    assert_eq!(code(&atac(tmp.path(), &["train", "--epochs", "lots"])), 2);
    assert_eq!(code(&atac(tmp.path(), &["synth", "--preset", "nope", "--out", "."])), 2);
    assert_eq!(code(&atac(tmp.path(), &["synth", "--set", "seed=1", "--out", "."])), 2);
    assert_eq!(code(&atac(tmp.path(), &["synth", "--set", "synth.colour=red", "--out", "."])), 2);
    assert_eq!(code(&atac(tmp.path(), &["synth", "--intensity", "2", "--out", "."])), 2);
    assert_eq!(code(&atac(tmp.path(), &["synth"])), 2);

    let missing = tmp.path().join("not-here");
    let out = atac(tmp.path(), &["synth", "--out", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(missing.to_str().unwrap()), "{stderr}");

    // a readable but missing input is a runtime failure, not a usage error
    let out = atac(tmp.path(), &["score", "--checkpoint", "nope.atac", "--input", ".", "--out", "s.csv"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = dataset("5");
    let b = dataset("5");
    let c = dataset("6");
    let ta = outputs(&a.path().join("data"));
    assert!(ta.len() > 20);
    assert_eq!(ta, outputs(&b.path().join("data")));
    assert_ne!(ta, outputs(&c.path().join("data")));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    mkdir(tmp.path(), "env");
    mkdir(tmp.path(), "flag");
    let out = Command::new(env!("CARGO_BIN_EXE_atac"))
        .current_dir(tmp.path())
        .env("ATAC_SEED", "9")
        .args(["synth", "--preset", "smoke", "--out", "env"])
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(tmp.path(), &["synth", "--preset", "smoke", "--seed", "9", "--out", "flag"]);
    assert_eq!(outputs(&tmp.path().join("env")), outputs(&tmp.path().join("flag")));
}

#[test]
fn presets_and_overrides_are_echoed_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    mkdir(tmp.path(), "a");
    mkdir(tmp.path(), "b");
    let base = ["synth", "--preset", "smoke", "--preset", "stripes", "--set", "synth.intensity=0.3"];
    ok(tmp.path(), &[&base[..], &["--out", "a"]].concat());
    let text = std::fs::read_to_string(tmp.path().join("a/synth.resolved.ini")).unwrap();
    assert!(text.contains("texture = stripes\n"), "{text}");
    assert!(text.contains("defect = scratch\n"), "{text}");
    assert!(text.contains("intensity = 0.3\n"), "{text}");
    assert!(text.contains("train_normal = 12\n"), "{text}");

    // replaying the resolved file alone reproduces config and data
    ok(tmp.path(), &["synth", "--config", "a/synth.resolved.ini", "--out", "b"]);
    let replay = std::fs::read_to_string(tmp.path().join("b/synth.resolved.ini")).unwrap();
    assert_eq!(replay.replace("output = b", "output = a"), text);
    assert_eq!(outputs(&tmp.path().join("a")), outputs(&tmp.path().join("b")));
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let tmp = dataset("2");
    mkdir(tmp.path(), "run");
    ok(tmp.path(), &["train", "--preset", "smoke", "--seed", "2", "--train", "data/train.tsv", "--out", "run", "--epochs", "0"]);
    let ck = Checkpoint::load(tmp.path().join("run/checkpoint.atac")).unwrap();
    assert_eq!(ck.epoch, 0);
    assert_eq!(ck.seed, 2);
    assert!(ck.model.input_norm.is_some());
    assert_eq!(ck.params, ModelParams::init(&ck.model, 2).unwrap());
    let log = std::fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "{log}");
}

#[test]
fn default_schedule_with_one_anomaly_logs_thirty_epochs() {
    let tmp = dataset("4");
    mkdir(tmp.path(), "run");
    let stdout = ok(
        tmp.path(),
        &["train", "--preset", "smoke", "--seed", "4", "--train", "data/train.tsv", "--out", "run", "--epochs", "30", "--anomalies", "1"],
    );
    assert!(stdout.contains("train separation:"), "{stdout}");
    let log = std::fs::read_to_string(tmp.path().join("run/train_log.csv")).unwrap();
    let rows: Vec<Vec<f64>> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 30);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i as f64);
        let lr = 1e-3 * 0.1f64.powi(i as i32 / 10);
        assert!((r[1] - lr).abs() < 1e-12, "epoch {i}: lr {}", r[1]);
        assert!(r[2].is_finite());
    }
    assert_eq!(Checkpoint::load(tmp.path().join("run/checkpoint.atac")).unwrap().epoch, 30);
}

#[test]
fn strict_reruns_are_byte_identical() {
    let tmp = dataset("1");
    for run in ["r1", "r2"] {
        mkdir(tmp.path(), run);
        ok(tmp.path(), &["train", "--preset", "smoke", "--strict", "--seed", "1", "--train", "data/train.tsv", "--out", run, "--epochs", "3"]);
        let ck = format!("{run}/checkpoint.atac");
        let scores = format!("{run}/scores.csv");
        ok(tmp.path(), &["score", "--strict", "--checkpoint", &ck, "--input", "data/test.tsv", "--out", &scores]);
    }
    let r1 = outputs(&tmp.path().join("r1"));
    let names: Vec<_> = r1.keys().map(|k| k.to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["checkpoint.atac", "scores.csv", "train_log.csv"]);
    assert_eq!(r1, outputs(&tmp.path().join("r2")));
}

#[test]
fn resume_requires_the_same_seed() {
    let tmp = dataset("1");
    mkdir(tmp.path(), "run");
    mkdir(tmp.path(), "more");
    ok(tmp.path(), &["train", "--preset", "smoke", "--seed", "1", "--train", "data/train.tsv", "--out", "run", "--epochs", "1"]);
    let args = ["train", "--preset", "smoke", "--train", "data/train.tsv", "--out", "more", "--resume", "run/checkpoint.atac", "--epochs", "2"];
    assert_eq!(code(&atac(tmp.path(), &[&args[..], &["--seed", "7"]].concat())), 2);
    ok(tmp.path(), &[&args[..], &["--seed", "1"]].concat());
    assert_eq!(Checkpoint::load(tmp.path().join("more/checkpoint.atac")).unwrap().epoch, 2);
}

fn score_map(csv: &str) -> BTreeMap<String, String> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let (id, rest) = l.split_once(',').unwrap();
            (id.to_string(), rest.to_string())
        })
        .collect()
}

#[test]
fn scoring_inputs_and_order() {
    let tmp = dataset("3");
    mkdir(tmp.path(), "run");
    mkdir(tmp.path(), "empty");
    ok(tmp.path(), &["train", "--preset", "smoke", "--seed", "3", "--train", "data/train.tsv", "--out", "run", "--epochs", "1"]);
    let ck = ["--checkpoint", "run/checkpoint.atac"];

    ok(tmp.path(), &[&["score"][..], &ck, &["--input", "empty", "--out", "run/empty.csv"]].concat());
    let empty = std::fs::read_to_string(tmp.path().join("run/empty.csv")).unwrap();
    assert_eq!(empty, "id,score,a_mp1,a_mp2,x0,y0,x1,y1\n");

    // manifest in file order, reversed manifest, directory walk, single file
    let manifest = std::fs::read_to_string(tmp.path().join("data/test.tsv")).unwrap();
    let mut lines: Vec<&str> = manifest.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    std::fs::write(tmp.path().join("data/reversed.tsv"), format!("{header}\n{}\n", lines.join("\n"))).unwrap();
    ok(tmp.path(), &[&["score"][..], &ck, &["--input", "data/test.tsv", "--out", "run/a.csv"]].concat());
    ok(tmp.path(), &[&["score"][..], &ck, &["--input", "data/reversed.tsv", "--out", "run/b.csv"]].concat());
    ok(tmp.path(), &[&["score"][..], &ck, &["--input", "data", "--out", "run/c.csv"]].concat());
    let read = |f: &str| std::fs::read_to_string(tmp.path().join("run").join(f)).unwrap();
    let a = read("a.csv");
    let b = read("b.csv");
    assert_ne!(a, b);
    assert_eq!(score_map(&a), score_map(&b));
    assert_eq!(a.lines().nth(1).unwrap(), b.lines().last().unwrap());
    let all = score_map(&read("c.csv"));
    for (id, rest) in score_map(&a) {
        assert_eq!(all[&id], rest);
    }

    let first = score_map(&a).into_iter().next().unwrap();
    let file = format!("data/{}", first.0);
    ok(tmp.path(), &[&["score"][..], &ck, &["--input", &file, "--out", "run/d.csv"]].concat());
    let single = read("d.csv");
    let name = Path::new(&first.0).file_name().unwrap().to_str().unwrap().to_string();
    assert_eq!(score_map(&single), BTreeMap::from([(name, first.1)]));

    mkdir(tmp.path(), "heat");
    let stdout = ok(tmp.path(), &[&["heatmap"][..], &ck, &["--input", &file, "--out", "heat"]].concat());
    assert!(stdout.contains("heatmaps: 1 images"), "{stdout}");
    assert!(tmp.path().join("heat/heatmap.resolved.ini").exists());
    assert!(tree(&tmp.path().join("heat")).keys().any(|k| k.to_string_lossy().ends_with("_attention_mask.pgm")));
}

fn write_eval_inputs(dir: &Path, rows: &[(String, u8, f64)]) {
    let mut csv = String::from("id,score,a_mp1,a_mp2,x0,y0,x1,y1\n");
    let mut tsv = String::from("# path\tlabel\n");
    for (id, label, s) in rows {
        csv.push_str(&format!("{id},{s},{s},{s},0,0,8,8\n"));
        tsv.push_str(&format!("{id}\t{label}\n"));
    }
    std::fs::write(dir.join("scores.csv"), csv).unwrap();
    std::fs::write(dir.join("labels.tsv"), tsv).unwrap();
}

fn auroc_line(dir: &Path) -> String {
    let out = ok(dir, &["eval", "--scores", "scores.csv", "--labels", "labels.tsv"]);
    out.lines().find(|l| l.starts_with("AUROC: ")).expect("AUROC line").to_string()
}

/// Mann-Whitney pair count with half credit for ties.
fn pairwise(rows: &[(String, u8, f64)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in rows.iter().filter(|r| r.1 == 1) {
        for n in rows.iter().filter(|r| r.1 == 0) {
            pairs += 1.0;
            wins += if a.2 > n.2 {
                1.0
            } else if a.2 == n.2 {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

#[test]
fn eval_reports_auroc_and_histogram() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rows: Vec<(String, u8, f64)> = (0..6)
        .map(|i| (format!("n{i}.pgm"), 0, i as f64 * 0.1))
        .chain((0..4).map(|i| (format!("a{i}.pgm"), 1, 5.0 + i as f64)))
        .collect();
    write_eval_inputs(tmp.path(), &rows);
    assert_eq!(auroc_line(tmp.path()), "AUROC: 1.0000");
    let hist = std::fs::read_to_string(tmp.path().join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
    assert!(tmp.path().join("eval.resolved.ini").exists());

    rows.reverse();
    rows.rotate_left(3);
    write_eval_inputs(tmp.path(), &rows);
    assert_eq!(auroc_line(tmp.path()), "AUROC: 1.0000");

    // random scores with ties against the pairwise oracle
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<(String, u8, f64)> = (0..40)
        .map(|i| (format!("s{i}"), rng.random_range(0..2u8), rng.random_range(0..8) as f64 / 4.0))
        .collect();
    write_eval_inputs(tmp.path(), &rows);
    assert_eq!(auroc_line(tmp.path()), format!("AUROC: {:.4}", pairwise(&rows)));

    // ids absent from the labels are an error
    std::fs::write(tmp.path().join("labels.tsv"), "# path\tlabel\ns0\t0\n").unwrap();
    assert_eq!(code(&atac(tmp.path(), &["eval", "--scores", "scores.csv", "--labels", "labels.tsv"])), 1);
}
