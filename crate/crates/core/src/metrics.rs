//! PSNR, SSIM and MAE on `[C, h, w]` images with values in [0, 1].

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::invalid(format!("{op}: empty images")));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP_DB)
    })
}

/// Mean absolute difference in percent.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mae", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(100.0 * s / a.numel() as f64)
}

fn ssim_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = g.iter().sum();
    for v in &mut g {
        *v /= total;
    }
    g
}

/// Separable Gaussian filter over the fully covered positions only.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut mid = vec![0.0; h * ow];
    for (src, dst) in x.chunks(w).zip(mid.chunks_mut(ow)) {
        for (j, o) in dst.iter_mut().enumerate() {
            *o = g.iter().zip(&src[j..j + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (i, row) in out.chunks_mut(ow).enumerate() {
        for (t, &wt) in g.iter().enumerate() {
            for (o, &s) in row.iter_mut().zip(&mid[(i + t) * ow..(i + t + 1) * ow]) {
                *o += wt * s;
            }
        }
    }
    out
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5) averaged over the
/// fully covered window positions and over channels, in percent.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::invalid(format!(
                "ssim expects [C, h, w], got {:?}",
                a.shape()
            )))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = ssim_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let sxx = filter_valid(&prod(x, x), h, w, &g);
        let syy = filter_valid(&prod(y, y), h, w, &g);
        let sxy = filter_valid(&prod(x, y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
            acc += num / den;
        }
        total += acc / mx.len() as f64;
    }
    Ok(100.0 * total / c as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

impl ImageMetrics {
    pub fn compute(image_id: impl Into<String>, pred: &Tensor, reference: &Tensor) -> Result<Self> {
        Ok(ImageMetrics {
            image_id: image_id.into(),
            psnr: psnr(pred, reference)?,
            ssim: ssim(pred, reference)?,
            mae: mae(pred, reference)?,
        })
    }
}

/// Per-image metrics and their arithmetic means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn push(&mut self, m: ImageMetrics) {
        self.images.push(m);
    }

    fn mean_of(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.images.is_empty() {
            return f64::NAN;
        }
        self.images.iter().map(f).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|m| m.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean_of(|m| m.ssim)
    }

    pub fn mean_mae(&self) -> f64 {
        self.mean_of(|m| m.mae)
    }

    /// `image_id,psnr,ssim,mae` rows, one per image.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "psnr", "ssim", "mae"])?;
        for m in &self.images {
            w.write_record([m.image_id.clone(), fmt(m.psnr), fmt(m.ssim), fmt(m.mae)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Shortest representation that parses back to the same value, with a
/// decimal point always present.
fn fmt(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}
