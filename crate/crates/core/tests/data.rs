//! Dataset plumbing against hand-built fixtures on disk.

use std::collections::BTreeMap;
use std::path::Path;

use atac_core::data::synth::{self, Sidecar, Split};
use atac_core::data::{
    cutmix, generate_synthetic, load_dataset, sample_episode, CutMixConfig, DefectKind, DonorSource, Manifest, ManifestEntry,
    Origin, Sample, SynthConfig, Texture,
};
use atac_core::{Error, Rng, Tensor};
use proptest::prelude::*;

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        resolution: 24,
        texture: Texture::Blobs,
        defect: DefectKind::Scratch,
        train_normal: 3,
        train_anomalous: 2,
        test_normal: 2,
        test_anomalous: 3,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_files_depend_only_on_the_config() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&small_synth(7), a.path()).unwrap();
    generate_synthetic(&small_synth(7), b.path()).unwrap();
    generate_synthetic(&small_synth(8), c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta, tb);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tc.keys().collect::<Vec<_>>());
    assert_ne!(ta, tc);
    // 10 images, 10 sidecars, 2 manifests
    assert_eq!(ta.len(), 22);
}

#[test]
fn sidecars_record_the_defect_of_each_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(7);
    let out = generate_synthetic(&cfg, dir.path()).unwrap();
    for e in &out.test.entries {
        let side = Sidecar::read(synth::sidecar_path(&out.test.resolve(e))).unwrap();
        assert_eq!(side.defect.is_some(), e.label == 1, "{}", e.path);
        assert_eq!(side.defect_kind, (e.label == 1).then_some(DefectKind::Scratch));
        let again = synth::render_seed(&cfg, side.seed, e.label == 1);
        assert_eq!(again.defect, side.defect);
    }
}

#[test]
fn zero_counts_give_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train_normal: 0,
        train_anomalous: 0,
        test_normal: 0,
        test_anomalous: 0,
        ..SynthConfig::default()
    };
    let out = generate_synthetic(&cfg, dir.path()).unwrap();
    assert!(out.train.is_empty() && out.test.is_empty());
    assert!(Manifest::read(&out.train_manifest).unwrap().is_empty());
    assert!(load_dataset(&out.test, 16, 1).unwrap().is_empty());
}

#[test]
fn missing_output_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = generate_synthetic(&small_synth(0), dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn zero_intensity_defects_leave_the_texture() {
    let cfg = SynthConfig {
        intensity: 0.0,
        ..small_synth(3)
    };
    for i in 0..5 {
        let r = synth::render(&cfg, Split::Test, 1, i);
        assert!(r.defect.is_some());
        assert_eq!(r.image, r.clean);
    }
}

#[test]
fn solid_grey_file_loads_at_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = b"P5\n# grey fixture\n40 30\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(128u8, 40 * 30));
    std::fs::write(dir.path().join("grey.pgm"), bytes).unwrap();
    let mut m = Manifest::new(dir.path());
    m.entries.push(ManifestEntry {
        path: "grey.pgm".into(),
        label: 0,
    });
    for (res, ch) in [(64, 1), (16, 3)] {
        let s = load_dataset(&m, res, ch).unwrap();
        assert_eq!(s[0].image.shape(), &[1, ch, res, res]);
        assert!(s[0].image.data().iter().all(|&v| (v - 0.5).abs() <= 1.0 / 255.0));
    }
}

#[test]
fn manifest_order_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["c.pgm", "a.pgm", "b.ppm"];
    for (i, name) in names.iter().enumerate() {
        let img = Tensor::full(&[1, if name.ends_with("ppm") { 3 } else { 1 }, 8, 8], i as f32 / 4.0);
        atac_core::data::pnm::write_image(dir.path().join(name), &img).unwrap();
    }
    let text = "# id\tlabel\nc.pgm\t0\na.pgm\t1\n\nb.ppm\t0\n";
    std::fs::write(dir.path().join("set.tsv"), text).unwrap();
    let m = Manifest::read(dir.path().join("set.tsv")).unwrap();
    let s = load_dataset(&m, 8, 1).unwrap();
    assert_eq!(s.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), names);
    assert_eq!(s.iter().map(|s| s.label).collect::<Vec<_>>(), [0, 1, 0]);
    for (i, sample) in s.iter().enumerate() {
        assert!(sample.image.data().iter().all(|&v| (v - i as f32 / 4.0).abs() <= 1.0 / 255.0));
    }
}

#[test]
fn load_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("fake.pgm"), b"GIF89a....").unwrap();
    let mut m = Manifest::new(dir.path());
    m.entries.push(ManifestEntry {
        path: "fake.pgm".into(),
        label: 0,
    });
    match load_dataset(&m, 8, 1).unwrap_err() {
        Error::UnsupportedFormat { path, magic } => {
            assert!(path.ends_with("fake.pgm"));
            assert_eq!(&magic[..2], b"GI");
        }
        other => panic!("unexpected {other}"),
    }
    m.entries[0].path = "missing.pgm".into();
    let err = load_dataset(&m, 8, 1).unwrap_err();
    assert!(matches!(&err, Error::Io { path, .. } if path.ends_with("missing.pgm")), "{err}");
    assert!(err.to_string().contains("missing.pgm"));
}

fn labelled(id: String, label: u8) -> Sample {
    Sample {
        id,
        image: Tensor::full(&[1, 1, 2, 2], 0.5),
        label,
        origin: Origin::Real,
    }
}

#[test]
fn episodes_draw_anomalies_uniformly() {
    let normals: Vec<Sample> = (0..3).map(|i| labelled(format!("n{i}"), 0)).collect();
    let pool: Vec<Sample> = (0..10).map(|i| labelled(format!("a{i}"), 1)).collect();
    for seed in 0..5 {
        let ep = sample_episode(&normals, &pool, 10, seed).unwrap();
        let mut ids: Vec<&str> = ep[3..].iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, ["a0", "a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8", "a9"]);
    }
    assert_eq!(sample_episode(&normals, &pool, 1, 4).unwrap(), sample_episode(&normals, &pool, 1, 4).unwrap());
    assert!(sample_episode(&normals, &pool, 11, 0).is_err());

    let five = &pool[..5];
    let mut counts = BTreeMap::new();
    for seed in 0..1000 {
        let ep = sample_episode(&normals, five, 1, seed).unwrap();
        *counts.entry(ep[3].id.clone()).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 5);
    assert!(counts.values().all(|&c| (140..=260).contains(&c)), "{counts:?}");
}

#[test]
fn full_area_cutmix_copies_the_donor() {
    let base = Sample {
        image: Tensor::zeros(&[1, 1, 20, 20]),
        ..labelled("black".into(), 0)
    };
    let donor = Sample {
        image: Tensor::full(&[1, 1, 20, 20], 1.0),
        ..labelled("white".into(), 0)
    };
    let cfg = CutMixConfig {
        area: (0.999, 1.0),
        aspect: (1.0, 1.0),
        ..CutMixConfig::default()
    };
    let (out, rect) = cutmix(&base, Some(&donor), &cfg, &mut Rng::new(1)).unwrap();
    let white = out.image.data().iter().filter(|&&v| v == 1.0).count();
    assert!(white as f64 >= 0.95 * 400.0, "{white} white pixels");
    assert_eq!((out.label, out.origin), (1, Origin::CutMix));
    assert!(!rect.same_image);
}

#[test]
fn cutmix_is_reproducible_and_flags_self_pastes() {
    let mut rng = Rng::new(0);
    let base = Sample {
        image: Tensor::from_fn(&[1, 1, 16, 16], |_| rng.uniform() as f32),
        ..labelled("base".into(), 0)
    };
    let cfg = CutMixConfig {
        source: DonorSource::SameImageOffset,
        ..CutMixConfig::default()
    };
    let (a, ra) = cutmix(&base, None, &cfg, &mut Rng::new(5)).unwrap();
    let (b, rb) = cutmix(&base, None, &cfg, &mut Rng::new(5)).unwrap();
    assert_eq!((a, ra), (b, rb));
    assert!(ra.same_image);

    // search for a draw whose source and destination coincide
    let degenerate = (0..20_000)
        .map(|seed| cutmix(&base, None, &cfg, &mut Rng::new(seed)).unwrap())
        .find(|(_, r)| r.is_degenerate());
    let (out, _) = degenerate.expect("a zero-offset draw exists");
    assert_eq!(out.image, base.image);
    assert_eq!(out.label, 1);

    let huge = CutMixConfig {
        area: (1.0, 1.0),
        aspect: (3.0, 3.0),
        ..CutMixConfig::default()
    };
    assert!(cutmix(&base, None, &huge, &mut Rng::new(0)).is_err());
    let anomaly = Sample { label: 1, ..base.clone() };
    assert!(cutmix(&anomaly, None, &cfg, &mut Rng::new(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn defect_box_meets_the_changed_pixels(
        seed in any::<u64>(),
        defect in prop::sample::select(vec![DefectKind::Scratch, DefectKind::Blot, DefectKind::PatchSwap]),
        texture in prop::sample::select(vec![Texture::Stripes, Texture::Blobs, Texture::Noise]),
        intensity in 0.05f64..1.0,
    ) {
        let cfg = SynthConfig { resolution: 32, texture, defect, intensity, ..SynthConfig::default() };
        let r = synth::render_seed(&cfg, seed, true);
        let b = r.defect.unwrap();
        prop_assert!(b.x0 < b.x1 && b.x1 <= 32 && b.y0 < b.y1 && b.y1 <= 32);
        let changed: Vec<usize> = (0..32 * 32).filter(|&i| r.image.data()[i] != r.clean.data()[i]).collect();
        if !changed.is_empty() {
            prop_assert!(changed.iter().any(|&i| b.contains(i % 32, i / 32)));
        }
        prop_assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let normal = synth::render_seed(&cfg, seed, false);
        prop_assert!(normal.defect.is_none());
        prop_assert_eq!(&normal.image, &normal.clean);
        prop_assert_eq!(&normal.clean, &r.clean);
    }
}
