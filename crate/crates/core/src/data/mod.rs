//! Degradation pipeline, toy data and image files.

mod ppm;
mod resample;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ppm::{decode as ppm_decode, encode as ppm_encode, ppm_read, ppm_write};
pub use resample::{bicubic_resize, cubic_kernel, gaussian_blur, gaussian_kernel, BICUBIC_A};
pub use synth::{gen_synthetic_dataset, synth_image, DatasetSpec, PatternWeights};

/// How an HR image becomes its LR counterpart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    pub blur: bool,
    pub blur_sigma: f64,
    pub blur_kernel_side: usize,
    pub bicubic_a: f64,
}

impl DegradationSpec {
    /// Bicubic downsampling only.
    pub fn bicubic(scale: usize) -> Self {
        DegradationSpec {
            scale,
            blur: false,
            blur_sigma: 1.0,
            blur_kernel_side: 5,
            bicubic_a: BICUBIC_A,
        }
    }

    /// Blur with the default 5x5, sigma 1 kernel before downsampling.
    pub fn blurred(scale: usize) -> Self {
        DegradationSpec {
            blur: true,
            ..Self::bicubic(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::invalid(format!(
                "scale must be 2, 4 or 8, got {}",
                self.scale
            )));
        }
        if self.blur && (self.blur_kernel_side % 2 == 0 || !(self.blur_sigma > 0.0)) {
            return Err(Error::invalid(
                "blur needs an odd kernel side and a positive sigma",
            ));
        }
        Ok(())
    }
}

/// Optional blur, then bicubic downsampling by `spec.scale`.
pub fn degrade(hr: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spec.validate()?;
    let (_, h, w) = resample::image_dims(hr)?;
    let s = spec.scale;
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} image is not divisible by scale {s}"
        )));
    }
    let blurred;
    let src = if spec.blur {
        blurred = gaussian_blur(hr, spec.blur_sigma, spec.blur_kernel_side)?;
        &blurred
    } else {
        hr
    };
    bicubic_resize(src, h / s, w / s, spec.bicubic_a)
}

/// Row-major tiles of side `patch` at the given stride; partial tiles at the
/// right and bottom edges are dropped.
pub fn crop_patches(img: &Tensor, patch: usize, stride: usize) -> Result<Vec<Tensor>> {
    let (_, h, w) = resample::image_dims(img)?;
    if patch == 0 || stride == 0 {
        return Err(Error::invalid("patch side and stride must be positive"));
    }
    if patch > h || patch > w {
        return Err(Error::invalid(format!(
            "patch {patch} exceeds image {h}x{w}"
        )));
    }
    let mut out = Vec::new();
    for y in (0..=h - patch).step_by(stride) {
        for x in (0..=w - patch).step_by(stride) {
            out.push(crop(img, y, x, patch, patch)?);
        }
    }
    Ok(out)
}

/// Sub-image `[.., y..y+ph, x..x+pw]`.
pub fn crop(img: &Tensor, y: usize, x: usize, ph: usize, pw: usize) -> Result<Tensor> {
    img.narrow(1, y, ph)?.narrow(2, x, pw)
}

/// One HR/LR pair as listed in a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path_hr: String,
    pub path_lr: String,
    pub scale: usize,
    pub blur: bool,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub hr: Tensor,
    pub lr: Tensor,
}

/// Degrade `images` and write `hr/<id>.ppm`, `lr/<id>.ppm` and the manifest
/// under `dir`. Manifest paths are relative to `dir`.
pub fn write_dataset(
    dir: &Path,
    images: &[Tensor],
    spec: &DegradationSpec,
) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir.join("hr"))?;
    std::fs::create_dir_all(dir.join("lr"))?;
    let mut rows = Vec::with_capacity(images.len());
    for (i, hr) in images.iter().enumerate() {
        let id = format!("img{i:05}");
        let lr = degrade(hr, spec)?;
        let row = ManifestRow {
            path_hr: format!("hr/{id}.ppm"),
            path_lr: format!("lr/{id}.ppm"),
            id,
            scale: spec.scale,
            blur: spec.blur,
        };
        ppm_write(dir.join(&row.path_hr), hr)?;
        ppm_write(dir.join(&row.path_lr), &lr)?;
        rows.push(row);
    }
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

/// Load every pair listed in `dir/manifest.csv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImagePair>> {
    let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
    if rows.is_empty() {
        return Err(Error::format(format!(
            "{} lists no images",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    rows.into_iter()
        .map(|r| {
            let resolve = |p: &str| -> PathBuf { dir.join(p) };
            let hr = ppm_read(resolve(&r.path_hr))?;
            let lr = ppm_read(resolve(&r.path_lr))?;
            if hr.dim(1) != lr.dim(1) * r.scale || hr.dim(2) != lr.dim(2) * r.scale {
                return Err(Error::format(format!(
                    "pair {} has HR {:?} and LR {:?} at scale {}",
                    r.id,
                    hr.shape(),
                    lr.shape(),
                    r.scale
                )));
            }
            Ok(ImagePair { id: r.id, hr, lr })
        })
        .collect()
}
