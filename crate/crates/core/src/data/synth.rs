//! Procedural grey-level textures with injected defects.
//!
//! Every image is a pure function of `(seed, split, class, index)`: the
//! texture and the defect draw from two separate streams of a per-image
//! seed, so the defect-free render of an anomalous image can always be
//! reproduced. Each image gets a `key=value` sidecar with the defect kind,
//! its ground-truth box and the per-image seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::manifest::{Manifest, ManifestEntry};
use super::pnm;
use crate::config::Doc;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{kernels, Tensor};

const SYNTH_DOMAIN: u32 = 0x53;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Blobs,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    Scratch,
    Blot,
    PatchSwap,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

named_enum!(Texture, "texture", Texture::Stripes => "stripes", Texture::Blobs => "blobs", Texture::Noise => "noise");
named_enum!(DefectKind, "defect", DefectKind::Scratch => "scratch", DefectKind::Blot => "blot", DefectKind::PatchSwap => "patch-swap");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub resolution: usize,
    pub texture: Texture,
    pub defect: DefectKind,
    /// Defect strength in `[0, 1]`; 0 leaves the texture untouched.
    pub intensity: f64,
    pub train_normal: usize,
    pub train_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            texture: Texture::Blobs,
            defect: DefectKind::Blot,
            intensity: 0.8,
            train_normal: 200,
            train_anomalous: 20,
            test_normal: 100,
            test_anomalous: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::invalid("synth config", "resolution must be at least 16"));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::invalid("synth config", "intensity must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split, label: u8) -> usize {
        match (split, label) {
            (Split::Train, 0) => self.train_normal,
            (Split::Train, _) => self.train_anomalous,
            (Split::Test, 0) => self.test_normal,
            (Split::Test, _) => self.test_anomalous,
        }
    }

    pub fn write(&self, doc: &mut Doc) {
        let s = "synth";
        doc.set(s, "resolution", self.resolution);
        doc.set(s, "texture", self.texture);
        doc.set(s, "defect", self.defect);
        doc.set(s, "intensity", self.intensity);
        doc.set(s, "train_normal", self.train_normal);
        doc.set(s, "train_anomalous", self.train_anomalous);
        doc.set(s, "test_normal", self.test_normal);
        doc.set(s, "test_anomalous", self.test_anomalous);
        doc.set(s, "seed", self.seed);
    }

    pub fn read(doc: &mut Doc) -> Result<Self> {
        let s = "synth";
        let mut c = Self::default();
        doc.take_parse(s, "resolution", &mut c.resolution)?;
        doc.take_parse(s, "texture", &mut c.texture)?;
        doc.take_parse(s, "defect", &mut c.defect)?;
        doc.take_parse(s, "intensity", &mut c.intensity)?;
        doc.take_parse(s, "train_normal", &mut c.train_normal)?;
        doc.take_parse(s, "train_anomalous", &mut c.train_anomalous)?;
        doc.take_parse(s, "test_normal", &mut c.test_normal)?;
        doc.take_parse(s, "test_anomalous", &mut c.test_anomalous)?;
        doc.take_parse(s, "seed", &mut c.seed)?;
        Ok(c)
    }
}

/// Pixel box, inclusive-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DefectBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl DefectBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

pub struct Rendered {
    /// Texture only.
    pub clean: Tensor<f32>,
    /// Texture with the defect, if any.
    pub image: Tensor<f32>,
    pub defect: Option<DefectBox>,
    pub seed: u64,
}

/// Per-image seed of image `index` of `(split, label)`.
pub fn image_seed(seed: u64, split: Split, label: u8, index: usize) -> u64 {
    let lane = (split as u64) * 2 + label as u64;
    Rng::derive(seed, SYNTH_DOMAIN, lane, index as u64).next_u64()
}

pub fn render(cfg: &SynthConfig, split: Split, label: u8, index: usize) -> Rendered {
    let seed = image_seed(cfg.seed, split, label, index);
    render_seed(cfg, seed, label == 1)
}

/// Render from a per-image seed (as recorded in the sidecar).
pub fn render_seed(cfg: &SynthConfig, seed: u64, anomalous: bool) -> Rendered {
    let n = cfg.resolution;
    let clean = texture(cfg.texture, n, &mut Rng::stream(seed, 0));
    let mut image = clean.clone();
    let defect = anomalous.then(|| inject(cfg.defect, cfg.intensity, &mut image, n, &mut Rng::stream(seed, 1)));
    let wrap = |v: Vec<f32>| Tensor::new(vec![1, 1, n, n], v).expect("n*n pixels");
    Rendered {
        clean: wrap(clean),
        image: wrap(image),
        defect,
        seed,
    }
}

fn texture(kind: Texture, n: usize, rng: &mut Rng) -> Vec<f32> {
    let mut px = vec![0.0f64; n * n];
    match kind {
        Texture::Stripes => {
            let theta = rng.uniform_range(0.0, std::f64::consts::PI);
            let freq = rng.uniform_range(1.0 / 12.0, 1.0 / 6.0);
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            let (c, s) = (theta.cos(), theta.sin());
            for (i, p) in px.iter_mut().enumerate() {
                let (y, x) = ((i / n) as f64, (i % n) as f64);
                *p = 0.5 + 0.2 * (std::f64::consts::TAU * freq * (x * c + y * s) + phase).sin();
            }
        }
        Texture::Blobs => {
            // wide per-image level, gentle blobs: patches pasted across
            // images stand out, within-image variation stays smooth
            let base = rng.uniform_range(0.2, 0.8);
            px.iter_mut().for_each(|p| *p = base);
            let count = 6 + rng.below(5);
            for _ in 0..count {
                let cy = rng.uniform_range(0.0, n as f64);
                let cx = rng.uniform_range(0.0, n as f64);
                let sigma = rng.uniform_range(3.0, 8.0) * n as f64 / 64.0;
                let amp = rng.uniform_range(-0.05, 0.05);
                for (i, p) in px.iter_mut().enumerate() {
                    let (y, x) = ((i / n) as f64, (i % n) as f64);
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    *p += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        Texture::Noise => {
            let g = 9;
            let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform_range(0.3, 0.7)).collect();
            kernels::resize_plane(&grid, g, g, &mut px, n, n);
        }
    }
    for p in px.iter_mut() {
        *p += 0.02 * rng.normal();
    }
    px.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect()
}

/// Blend `img` towards `target` with a per-pixel weight scaled by the
/// intensity; returns the bounding box of touched pixels.
fn blend(img: &mut [f32], n: usize, intensity: f64, mut weight: impl FnMut(usize, usize) -> f64, mut target: impl FnMut(usize, usize, f64) -> f64) -> DefectBox {
    let mut bx = DefectBox {
        x0: n,
        y0: n,
        x1: 0,
        y1: 0,
    };
    for y in 0..n {
        for x in 0..n {
            let w = weight(x, y);
            if w <= 0.0 {
                continue;
            }
            let v = img[y * n + x] as f64;
            let t = target(x, y, v);
            img[y * n + x] = (v + intensity * w * (t - v)).clamp(0.0, 1.0) as f32;
            bx.x0 = bx.x0.min(x);
            bx.y0 = bx.y0.min(y);
            bx.x1 = bx.x1.max(x + 1);
            bx.y1 = bx.y1.max(y + 1);
        }
    }
    bx
}

fn inject(kind: DefectKind, intensity: f64, img: &mut [f32], n: usize, rng: &mut Rng) -> DefectBox {
    let nf = n as f64;
    let margin = nf / 8.0;
    match kind {
        DefectKind::Scratch => {
            let len = rng.uniform_range(0.2, 0.35) * nf;
            let theta = rng.uniform_range(0.0, std::f64::consts::PI);
            let (dx, dy) = (theta.cos() * len / 2.0, theta.sin() * len / 2.0);
            let cx = rng.uniform_range(margin + dx.abs(), nf - margin - dx.abs());
            let cy = rng.uniform_range(margin + dy.abs(), nf - margin - dy.abs());
            let target = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            let half_width = 1.0 * nf / 64.0;
            let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
            blend(
                img,
                n,
                intensity,
                |x, y| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let (vx, vy) = (bx - ax, by - ay);
                    let t = (((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                    let d = ((px - ax - t * vx).powi(2) + (py - ay - t * vy).powi(2)).sqrt();
                    (half_width + 0.5 - d).clamp(0.0, 1.0)
                },
                |_, _, _| target,
            )
        }
        DefectKind::Blot => {
            let (rx, ry) = (rng.uniform_range(0.08, 0.16) * nf, rng.uniform_range(0.08, 0.16) * nf);
            let cx = rng.uniform_range(margin + rx, nf - margin - rx);
            let cy = rng.uniform_range(margin + ry, nf - margin - ry);
            let target = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            blend(
                img,
                n,
                intensity,
                |x, y| {
                    let r = (((x as f64 + 0.5 - cx) / rx).powi(2) + ((y as f64 + 0.5 - cy) / ry).powi(2)).sqrt();
                    ((1.0 - r) * 3.0).clamp(0.0, 1.0)
                },
                |_, _, _| target,
            )
        }
        DefectKind::PatchSwap => {
            let s = (rng.uniform_range(0.12, 0.22) * nf).round().max(2.0) as usize;
            let m = margin as usize;
            let span = n - 2 * m - s;
            let (sx, sy) = (m + rng.below(span + 1), m + rng.below(span + 1));
            let (tx, ty) = (m + rng.below(span + 1), m + rng.below(span + 1));
            let src = img.to_vec();
            // transposed copy so the pasted texture is visibly misaligned
            blend(
                img,
                n,
                intensity,
                |x, y| if (tx..tx + s).contains(&x) && (ty..ty + s).contains(&y) { 1.0 } else { 0.0 },
                |x, y, _| src[(sy + (x - tx)) * n + sx + (y - ty)] as f64,
            )
        }
    }
}

/// Ground truth stored next to each image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sidecar {
    pub defect_kind: Option<DefectKind>,
    pub defect: Option<DefectBox>,
    pub seed: u64,
}

impl Sidecar {
    pub fn to_text(&self) -> String {
        let b = self.defect.unwrap_or(DefectBox {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0,
        });
        let mut out = String::new();
        let kind = self.defect_kind.map_or("none", DefectKind::as_str);
        let _ = writeln!(out, "defect_kind={kind}");
        let _ = writeln!(out, "x0={}\ny0={}\nx1={}\ny1={}", b.x0, b.y0, b.x1, b.y1);
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Malformed {
            path: source.to_path_buf(),
            detail,
        };
        let get = |key: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
                .ok_or_else(|| bad(format!("missing key `{key}`")))
        };
        let kind = get("defect_kind")?;
        let num = |v: String| v.parse::<usize>().map_err(|_| bad(format!("bad number `{v}`")));
        let b = DefectBox {
            x0: num(get("x0")?)?,
            y0: num(get("y0")?)?,
            x1: num(get("x1")?)?,
            y1: num(get("y1")?)?,
        };
        let seed = get("seed")?;
        let seed = seed.parse().map_err(|_| bad(format!("bad seed `{seed}`")))?;
        let defect_kind = match kind.as_str() {
            "none" => None,
            k => Some(k.parse()?),
        };
        Ok(Self {
            defect_kind,
            defect: defect_kind.map(|_| b),
            seed,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Sidecar path of an image path.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("txt")
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train: Manifest,
    pub test: Manifest,
}

/// Write the dataset below `out_dir`, which must already exist.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    if !out.is_dir() {
        return Err(Error::io(
            out,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let mut manifests = Vec::new();
    for split in [Split::Train, Split::Test] {
        let mut m = Manifest::new(out);
        for label in [0u8, 1] {
            let count = cfg.count(split, label);
            if count == 0 {
                continue;
            }
            let rel_dir = format!("{}/{}", split.as_str(), if label == 0 { "normal" } else { "anomaly" });
            let dir = out.join(&rel_dir);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                let r = render(cfg, split, label, i);
                let rel = format!("{rel_dir}/{i:05}.pgm");
                let path = out.join(&rel);
                pnm::write_image(&path, &r.image)?;
                let side = Sidecar {
                    defect_kind: (label == 1).then_some(cfg.defect),
                    defect: r.defect,
                    seed: r.seed,
                };
                let sp = sidecar_path(&path);
                std::fs::write(&sp, side.to_text()).map_err(|e| Error::io(&sp, e))?;
                m.entries.push(ManifestEntry { path: rel, label });
            }
        }
        let path = out.join(format!("{}.tsv", split.as_str()));
        m.write(&path)?;
        manifests.push((path, m));
    }
    let (test_manifest, test) = manifests.pop().expect("two splits");
    let (train_manifest, train) = manifests.pop().expect("two splits");
    Ok(SynthOutput {
        train_manifest,
        test_manifest,
        train,
        test,
    })
}
