//! Separable resampling filters on `[C, h, w]` images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BICUBIC_A: f64 = -0.75;

/// Cubic convolution kernel with free parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four taps per output sample: `(source index, weight)`.
fn cubic_taps(len_in: usize, len_out: usize, a: f64) -> Vec<[(usize, f64); 4]> {
    let scale = len_in as f64 / len_out as f64;
    let last = len_in as isize - 1;
    (0..len_out)
        .map(|j| {
            let src = (j as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let t = src - i0;
            let ws = [
                cubic_kernel(t + 1.0, a),
                cubic_kernel(t, a),
                cubic_kernel(1.0 - t, a),
                cubic_kernel(2.0 - t, a),
            ];
            let mut taps = [(0, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = (i0 as isize - 1 + k as isize).clamp(0, last) as usize;
                *tap = (idx, ws[k]);
            }
            taps
        })
        .collect()
}

/// Bicubic resize with half-pixel centers and clamped edge taps.
pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize, a: f64) -> Result<Tensor> {
    let (c, h, w) = image_dims(x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize output must be at least 1x1"));
    }
    let tx = cubic_taps(w, out_w, a);
    let ty = cubic_taps(h, out_h, a);
    // Horizontal pass, then vertical.
    let mut mid = vec![0.0; c * h * out_w];
    for (src, dst) in x.data().chunks(w).zip(mid.chunks_mut(out_w)) {
        for (o, taps) in dst.iter_mut().zip(&tx) {
            *o = taps.iter().map(|&(i, wt)| wt * src[i]).sum();
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for (src, dst) in mid.chunks(h * out_w).zip(out.chunks_mut(out_h * out_w)) {
        for (row, taps) in dst.chunks_mut(out_w).zip(&ty) {
            for &(i, wt) in taps {
                for (o, &s) in row.iter_mut().zip(&src[i * out_w..(i + 1) * out_w]) {
                    *o += wt * s;
                }
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Normalized sampled Gaussian of odd length `k`.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Result<Vec<f64>> {
    if k % 2 == 0 {
        return Err(Error::invalid(format!(
            "blur kernel side must be odd, got {k}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("blur sigma must be positive"));
    }
    let r = (k / 2) as f64;
    let g: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Ok(g.into_iter().map(|v| v / total).collect())
}

/// Half-sample symmetric reflection (`cba|abc|cba`) of an arbitrary index.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with symmetric reflection at the borders. This
/// boundary mode keeps the image mean exactly.
pub fn gaussian_blur(x: &Tensor, sigma: f64, k: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(x)?;
    let g = gaussian_kernel(sigma, k)?;
    let r = (k / 2) as isize;
    let mut mid = vec![0.0; c * h * w];
    for (src, dst) in x.data().chunks(w).zip(mid.chunks_mut(w)) {
        for (j, o) in dst.iter_mut().enumerate() {
            *o = g
                .iter()
                .enumerate()
                .map(|(t, &wt)| wt * src[reflect(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; c * h * w];
    for (src, dst) in mid.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for (y, row) in dst.chunks_mut(w).enumerate() {
            for (t, &wt) in g.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - r, h);
                for (o, &s) in row.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                    *o += wt * s;
                }
            }
        }
    }
    Tensor::new([c, h, w], out)
}

pub(crate) fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::invalid(format!(
            "expected a [C, h, w] image, got {:?}",
            x.shape()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook piecewise form, written independently of `cubic_kernel`.
    fn keys(x: f64) -> f64 {
        let a = -0.75;
        let x = x.abs();
        if x < 1.0 {
            (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
        } else if x < 2.0 {
            a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    }

    #[test]
    fn constants_survive_resize_and_blur() {
        let x = Tensor::full([3, 9, 7], 0.37);
        for (oh, ow) in [(18, 14), (3, 2), (9, 7), (1, 1), (13, 5)] {
            let y = bicubic_resize(&x, oh, ow, BICUBIC_A).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-10));
        }
        let b = gaussian_blur(&x, 1.0, 5).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn upsampled_impulse_samples_the_kernel() {
        let mut x = Tensor::zeros([1, 1, 16]);
        x.set(&[0, 0, 8], 1.0);
        let y = bicubic_resize(&x, 1, 32, BICUBIC_A).unwrap();
        for j in 0..32 {
            let src = (j as f64 + 0.5) / 2.0 - 0.5;
            assert!(
                (y.get(&[0, 0, j]) - keys(src - 8.0)).abs() < 1e-12,
                "tap {j}"
            );
        }
        // Offsets 0.25 and 0.75 at a = -0.75, by hand.
        assert_eq!(y.get(&[0, 0, 16]), 0.87890625);
        assert_eq!(y.get(&[0, 0, 17]), 0.87890625);
        assert_eq!(y.get(&[0, 0, 15]), 0.26171875);
        assert_eq!(y.get(&[0, 0, 18]), 0.26171875);
    }

    #[test]
    fn matches_reference_resize_values() {
        // Frozen from OpenCV's INTER_CUBIC resize of this 4x4 input.
        let x = Tensor::from_fn([1, 4, 4], |i| ((i[1] * 4 + i[2]) * 7 % 11) as f64 / 10.0);
        let up = bicubic_resize(&x, 8, 8, BICUBIC_A).unwrap();
        let expect_row0 = [
            -0.14934539794921875,
            0.13973846435546872,
            0.6222793579101562,
            0.6932006835937501,
            0.29625244140625,
            0.36717376708984373,
            0.8497146606445313,
            1.1387985229492188,
        ];
        for (j, e) in expect_row0.iter().enumerate() {
            assert!(
                (up.get(&[0, 0, j]) - e).abs() < 1e-12,
                "up col {j}: {}",
                up.get(&[0, 0, j])
            );
        }
        let down = bicubic_resize(&x, 2, 2, BICUBIC_A).unwrap();
        let expect = [0.34658203125, 0.74560546875, 0.47529296875, 0.45751953125];
        for (v, e) in down.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "down {v} vs {e}");
        }
    }

    #[test]
    fn ramp_survives_down_up() {
        let x = Tensor::from_fn([1, 32, 32], |i| (i[1] + 2 * i[2]) as f64 / 96.0);
        let d = bicubic_resize(&x, 16, 16, BICUBIC_A).unwrap();
        let u = bicubic_resize(&d, 32, 32, BICUBIC_A).unwrap();
        let mae: f64 = x
            .data()
            .iter()
            .zip(u.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 1024.0;
        assert!(mae < 0.01, "{mae}");
    }

    #[test]
    fn blurred_impulse_is_the_kernel() {
        let mut x = Tensor::zeros([1, 9, 9]);
        x.set(&[0, 4, 4], 1.0);
        let y = gaussian_blur(&x, 1.0, 5).unwrap();
        let z: f64 = (-2..=2).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).sum();
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let e = (-((dy * dy + dx * dx) as f64) / 2.0).exp() / (z * z);
                let got = y.get(&[0, (4 + dy) as usize, (4 + dx) as usize]);
                assert!((got - e).abs() < 1e-10);
            }
        }
        assert_eq!(y.get(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn blur_keeps_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform([3, 6, 11], 0.0, 1.0, &mut rng);
        for (s, k) in [(1.0, 5), (2.5, 9), (0.7, 3), (3.0, 15)] {
            let y = gaussian_blur(&x, s, k).unwrap();
            assert!((x.mean() - y.mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_rejects_bad_arguments() {
        let x = Tensor::zeros([3, 4, 4]);
        assert!(gaussian_blur(&x, 1.0, 4).is_err());
        assert!(gaussian_blur(&x, 0.0, 5).is_err());
        assert!(bicubic_resize(&x, 0, 3, BICUBIC_A).is_err());
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, [2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1]);
    }
}
