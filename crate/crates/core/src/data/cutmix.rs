//! Cut-Mix pseudo-anomalies: a rectangle of donor pixels pasted onto a
//! normal image.

use super::{Origin, Sample};
use crate::config::Doc;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DonorSource {
    /// Another normal image, falling back to the base image when none is
    /// supplied.
    OtherNormal,
    /// A different region of the base image itself.
    SameImageOffset,
}

impl DonorSource {
    fn as_str(self) -> &'static str {
        match self {
            DonorSource::OtherNormal => "other-normal",
            DonorSource::SameImageOffset => "same-image",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutMixConfig {
    /// Range of the pasted area as a fraction of the image area.
    pub area: (f64, f64),
    /// Range of width/height, sampled log-uniformly.
    pub aspect: (f64, f64),
    pub source: DonorSource,
    /// Per-sample probability of converting a normal training sample.
    pub rate: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        Self {
            area: (0.02, 0.15),
            aspect: (1.0 / 3.0, 3.0),
            source: DonorSource::OtherNormal,
            rate: 0.25,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "cutmix config";
        let (a0, a1) = self.area;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::invalid(OP, format!("area range ({a0}, {a1}) must satisfy 0 < min <= max <= 1")));
        }
        let (r0, r1) = self.aspect;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::invalid(OP, format!("aspect range ({r0}, {r1}) must satisfy 0 < min <= max")));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(OP, "rate must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn write(&self, doc: &mut Doc) {
        let s = "cutmix";
        doc.set(s, "area_min", self.area.0);
        doc.set(s, "area_max", self.area.1);
        doc.set(s, "aspect_min", self.aspect.0);
        doc.set(s, "aspect_max", self.aspect.1);
        doc.set(s, "source", self.source.as_str());
        doc.set(s, "rate", self.rate);
    }

    pub fn read(doc: &mut Doc) -> Result<Self> {
        let s = "cutmix";
        let mut cfg = Self::default();
        doc.take_parse(s, "area_min", &mut cfg.area.0)?;
        doc.take_parse(s, "area_max", &mut cfg.area.1)?;
        doc.take_parse(s, "aspect_min", &mut cfg.aspect.0)?;
        doc.take_parse(s, "aspect_max", &mut cfg.aspect.1)?;
        if let Some(v) = doc.take(s, "source") {
            cfg.source = match v.as_str() {
                "other-normal" => DonorSource::OtherNormal,
                "same-image" => DonorSource::SameImageOffset,
                other => {
                    return Err(Error::Config(format!(
                        "cutmix.source: expected other-normal or same-image, got `{other}`"
                    )))
                }
            };
        }
        doc.take_parse(s, "rate", &mut cfg.rate)?;
        Ok(cfg)
    }
}

/// Where the patch came from and where it went, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PasteRect {
    pub src_x: usize,
    pub src_y: usize,
    pub dst_x: usize,
    pub dst_y: usize,
    pub width: usize,
    pub height: usize,
    pub same_image: bool,
}

impl PasteRect {
    /// A same-image paste onto itself leaves the image unchanged.
    pub fn is_degenerate(&self) -> bool {
        self.same_image && self.src_x == self.dst_x && self.src_y == self.dst_y
    }
}

/// Copy `rect` of `donor` onto `base`. Both are `1×C×H×W` of equal shape.
pub fn paste(base: &Tensor<f32>, donor: &Tensor<f32>, rect: &PasteRect) -> Result<Tensor<f32>> {
    const OP: &str = "cutmix paste";
    let (_, c, h, w) = base.dims4(OP)?;
    if donor.shape() != base.shape() {
        return Err(Error::invalid(OP, format!("donor shape {:?} differs from base {:?}", donor.shape(), base.shape())));
    }
    let fits = |x: usize, y: usize| x + rect.width <= w && y + rect.height <= h;
    if rect.width == 0 || rect.height == 0 || !fits(rect.src_x, rect.src_y) || !fits(rect.dst_x, rect.dst_y) {
        return Err(Error::invalid(OP, format!("rectangle {rect:?} does not fit a {h}x{w} image")));
    }
    let mut out = base.clone();
    let plane = h * w;
    let src = donor.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for r in 0..rect.height {
            let s = ch * plane + (rect.src_y + r) * w + rect.src_x;
            let d = ch * plane + (rect.dst_y + r) * w + rect.dst_x;
            dst[d..d + rect.width].copy_from_slice(&src[s..s + rect.width]);
        }
    }
    Ok(out)
}

/// Paste a randomly sized and placed patch of `donor` (or of `base`
/// itself, see [`DonorSource`]) onto the normal sample `base`.
pub fn cutmix(base: &Sample, donor: Option<&Sample>, cfg: &CutMixConfig, rng: &mut Rng) -> Result<(Sample, PasteRect)> {
    cfg.validate()?;
    if base.is_anomaly() {
        return Err(Error::invalid("cutmix", format!("base `{}` is not a normal sample", base.id)));
    }
    let (_, _, h, w) = base.image.dims4("cutmix")?;
    let area = rng.uniform_range(cfg.area.0, cfg.area.1) * (h * w) as f64;
    let ratio = rng.uniform_range(cfg.aspect.0.ln(), cfg.aspect.1.ln()).exp();
    let pw = ((area * ratio).sqrt().round() as usize).max(1);
    let ph = ((area / ratio).sqrt().round() as usize).max(1);
    if pw > w || ph > h {
        return Err(Error::invalid(
            "cutmix",
            format!("sampled patch {ph}x{pw} is larger than the {h}x{w} image"),
        ));
    }
    let donor_img = match (cfg.source, donor) {
        (DonorSource::OtherNormal, Some(d)) => &d.image,
        _ => &base.image,
    };
    let same_image = std::ptr::eq(donor_img, &base.image);
    let rect = PasteRect {
        src_x: rng.below(w - pw + 1),
        src_y: rng.below(h - ph + 1),
        dst_x: rng.below(w - pw + 1),
        dst_y: rng.below(h - ph + 1),
        width: pw,
        height: ph,
        same_image,
    };
    let image = paste(&base.image, donor_img, &rect)?;
    Ok((
        Sample {
            id: format!("{}#cutmix", base.id),
            image,
            label: 1,
            origin: Origin::CutMix,
        },
        rect,
    ))
}
