//! Heatmap export: normalised map, colour overlay, binarised mask.

use std::path::{Path, PathBuf};

use crate::data::pnm;
use crate::error::{Error, Result};
use crate::scoring::AttentionMap;
use crate::tensor::{kernels, Tensor};

/// Blend weight of the heat colour in the overlay.
const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub map: PathBuf,
    pub overlay: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Min-max normalised map as a `1×1×h×w` image.
pub fn map_image(map: &AttentionMap) -> Tensor<f32> {
    Tensor::from_fn(&[1, 1, map.height, map.width], |i| map.values[i] as f32)
}

/// Cells strictly above `omega` as a 0/1 image.
pub fn mask_image(map: &AttentionMap, omega: f64) -> Tensor<f32> {
    Tensor::from_fn(&[1, 1, map.height, map.width], |i| if map.values[i] > omega { 1.0 } else { 0.0 })
}

/// RGB overlay: the map, bilinearly upsampled, tints the image red.
pub fn overlay(map: &AttentionMap, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, c, h, w) = image.dims4("overlay")?;
    let plane = h * w;
    let grey: Vec<f32> = match c {
        1 => image.data().to_vec(),
        3 => (0..plane).map(|p| (0..3).map(|k| image.data()[k * plane + p]).sum::<f32>() / 3.0).collect(),
        _ => return Err(Error::invalid("overlay", format!("{c} channels; expected 1 or 3"))),
    };
    let small: Vec<f32> = map.values.iter().map(|&v| v as f32).collect();
    let mut heat = vec![0.0f32; plane];
    kernels::resize_plane(&small, map.height, map.width, &mut heat, h, w);
    let mut rgb = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let base = (1.0 - OVERLAY_ALPHA) * grey[p];
        rgb[p] = base + OVERLAY_ALPHA * heat[p];
        rgb[plane + p] = base;
        rgb[2 * plane + p] = base;
    }
    Tensor::new(vec![1, 3, h, w], rgb)
}

/// Write `<prefix>_map.pgm`, `<prefix>_overlay.ppm` and, with `omega`,
/// `<prefix>_mask.pgm`.
pub fn export_heatmap(map: &AttentionMap, image: &Tensor<f32>, prefix: &Path, omega: Option<f64>) -> Result<HeatmapFiles> {
    let with = |suffix: &str| {
        let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(suffix);
        prefix.with_file_name(name)
    };
    let files = HeatmapFiles {
        map: with("_map.pgm"),
        overlay: with("_overlay.ppm"),
        mask: omega.map(|_| with("_mask.pgm")),
    };
    pnm::write_image(&files.map, &map_image(map))?;
    pnm::write_image(&files.overlay, &overlay(map, image)?)?;
    if let (Some(path), Some(omega)) = (&files.mask, omega) {
        pnm::write_image(path, &mask_image(map, omega))?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_exports_black() {
        let m = AttentionMap::from_pre_norm(2, 2, vec![3.0; 4]);
        assert!(map_image(&m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hot_cell_tints_its_corner() {
        let m = AttentionMap::from_pre_norm(4, 4, (0..16).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
        let img = Tensor::full(&[1, 1, 16, 16], 0.2f32);
        let o = overlay(&m, &img).unwrap();
        let red = &o.data()[..256];
        let green = &o.data()[256..512];
        assert!(red[0] > 0.5);
        assert_eq!(red[255], green[255]);
        let tinted = red.iter().zip(green).filter(|(r, g)| r > g).count();
        assert!(tinted > 0 && tinted < 64, "{tinted}");
    }

    #[test]
    fn exported_map_reads_back_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let m = AttentionMap::from_pre_norm(3, 3, (0..9).map(|i| (i * i) as f64).collect());
        let img = Tensor::full(&[1, 1, 12, 12], 0.5f32);
        let files = export_heatmap(&m, &img, &dir.path().join("s0"), Some(0.4)).unwrap();
        let back = pnm::read_image(&files.map).unwrap();
        for (b, v) in back.data().iter().zip(&m.values) {
            assert_eq!(*b, pnm::quantize(*v as f32) as f32 / 255.0);
        }
        let mask = pnm::read_image(files.mask.unwrap()).unwrap();
        assert_eq!(mask.data().iter().filter(|&&v| v == 1.0).count(), m.values.iter().filter(|&&v| v > 0.4).count());
        assert_eq!(pnm::read_image(&files.overlay).unwrap().shape(), &[1, 3, 12, 12]);
    }
}
