//! Procedural toy images with enough high-frequency content that
//! super-resolution is not trivial.
//!
//! Image `i` of a set is drawn from ChaCha8 seeded with the set seed on
//! stream `i`, so each image is independent of the set size and of the
//! generation order. Floats come from the top 53 bits of the integer
//! stream, which makes the output identical on every platform.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shortest grating or checkerboard period in HR pixels. Finer patterns
/// alias away completely under x2 downsampling and only add noise that no
/// model can undo.
pub const MIN_PERIOD: f64 = 4.0;

/// Subsamples per pixel side when rendering.
pub const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternWeights {
    pub rectangles: f64,
    pub gratings: f64,
    pub checkerboards: f64,
    pub ramps: f64,
    pub discs: f64,
}

impl Default for PatternWeights {
    fn default() -> Self {
        PatternWeights {
            rectangles: 1.0,
            gratings: 1.0,
            checkerboards: 1.0,
            ramps: 0.5,
            discs: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Rectangle,
    Grating,
    Checkerboard,
    Ramp,
    Disc,
}

impl PatternWeights {
    fn table(&self) -> [(Pattern, f64); 5] {
        [
            (Pattern::Rectangle, self.rectangles),
            (Pattern::Grating, self.gratings),
            (Pattern::Checkerboard, self.checkerboards),
            (Pattern::Ramp, self.ramps),
            (Pattern::Disc, self.discs),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_images: usize,
    /// Side of the square HR images.
    pub side: usize,
    pub weights: PatternWeights,
}

impl DatasetSpec {
    pub fn new(seed: u64, num_images: usize, side: usize) -> Self {
        DatasetSpec {
            seed,
            num_images,
            side,
            weights: PatternWeights::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::invalid("dataset image side must be positive"));
        }
        let w = self.weights.table();
        if w.iter().any(|&(_, v)| !(v >= 0.0) || !v.is_finite()) || w.iter().all(|&(_, v)| v == 0.0)
        {
            return Err(Error::invalid(
                "pattern weights must be non-negative with a positive sum",
            ));
        }
        Ok(())
    }
}

/// Generate the whole set; values lie in [0, 1].
pub fn gen_synthetic_dataset(spec: &DatasetSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    Ok((0..spec.num_images)
        .map(|i| synth_image(spec, i as u64))
        .collect())
}

/// Image `index` of the set described by `spec`.
pub fn synth_image(spec: &DatasetSpec, index: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = spec.side * SUPERSAMPLE;
    let mut img = Canvas {
        n,
        px: vec![[0.0; 3]; n * n],
    };
    let bg = color(&mut rng);
    img.px.fill(bg);

    // The first layer is always a grating or a checkerboard.
    let w = spec.weights;
    let hf = if w.gratings + w.checkerboards == 0.0
        || rng.random::<f64>() * (w.gratings + w.checkerboards) < w.gratings
    {
        Pattern::Grating
    } else {
        Pattern::Checkerboard
    };
    draw(&mut img, hf, &mut rng);
    let extra = rng.random_range(2..=5);
    let table = w.table();
    let total: f64 = table.iter().map(|&(_, v)| v).sum();
    for _ in 0..extra {
        let mut u = rng.random::<f64>() * total;
        let mut pick = Pattern::Rectangle;
        for &(p, v) in &table {
            if v > 0.0 {
                pick = p;
                if u < v {
                    break;
                }
                u -= v;
            }
        }
        draw(&mut img, pick, &mut rng);
    }

    // Box-filter the supersampled canvas down: each pixel is the mean of its
    // SUPERSAMPLE x SUPERSAMPLE footprint, like a sensor integrating light.
    let (side, k) = (spec.side, SUPERSAMPLE);
    let norm = 1.0 / (k * k) as f64;
    Tensor::from_fn([3, side, side], |i| {
        let mut acc = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                acc += img.px[(i[1] * k + dy) * n + i[2] * k + dx][i[0]];
            }
        }
        acc * norm
    })
}

struct Canvas {
    n: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, region: Region, mut f: impl FnMut(usize, usize) -> Option<[f64; 3]>) {
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                if let Some(c) = f(y, x) {
                    self.px[y * self.n + x] = c;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Region {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Random sub-rectangle covering at least a quarter of each side.
fn region(n: usize, rng: &mut ChaCha8Rng) -> Region {
    let span = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(n.div_ceil(4)..=n);
        let start = rng.random_range(0..=n - len);
        (start, start + len)
    };
    let (y0, y1) = span(rng);
    let (x0, x1) = span(rng);
    Region { y0, y1, x0, x1 }
}

fn draw(img: &mut Canvas, p: Pattern, rng: &mut ChaCha8Rng) {
    let n = img.n;
    let full = Region {
        y0: 0,
        y1: n,
        x0: 0,
        x1: n,
    };
    match p {
        Pattern::Rectangle => {
            let r = region(n, rng);
            let c = color(rng);
            img.paint(r, |_, _| Some(c));
        }
        Pattern::Grating => {
            let r = region(n, rng);
            let (a, b) = (color(rng), color(rng));
            let period = rng.random_range(MIN_PERIOD..3.0 * MIN_PERIOD) * SUPERSAMPLE as f64;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            img.paint(r, |y, x| {
                let t = (x as f64 * c + y as f64 * s) / period;
                Some(if t.floor() as i64 % 2 == 0 { a } else { b })
            });
        }
        Pattern::Checkerboard => {
            let r = region(n, rng);
            let (a, b) = (color(rng), color(rng));
            let cell = rng.random_range(MIN_PERIOD as usize / 2..=3 * MIN_PERIOD as usize / 2)
                * SUPERSAMPLE;
            img.paint(r, |y, x| {
                Some(if (y / cell + x / cell) % 2 == 0 { a } else { b })
            });
        }
        Pattern::Ramp => {
            let (a, b) = (color(rng), color(rng));
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let scale = (n.max(2) - 1) as f64 * (s.abs() + c.abs());
            let off = if c < 0.0 { -c } else { 0.0 } + if s < 0.0 { -s } else { 0.0 };
            let px = img.px.clone();
            img.paint(full, |y, x| {
                let t = ((x as f64 * c + y as f64 * s) / scale + off).clamp(0.0, 1.0);
                let under = px[y * n + x];
                // Blend half-and-half with what is already there.
                Some(std::array::from_fn(|k| {
                    0.5 * under[k] + 0.5 * (a[k] + t * (b[k] - a[k]))
                }))
            });
        }
        Pattern::Disc => {
            let c = color(rng);
            let rad = rng.random_range(n as f64 / 10.0..n as f64 / 3.0 + 1.0);
            let cy = rng.random_range(0.0..n as f64);
            let cx = rng.random_range(0.0..n as f64);
            img.paint(full, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                (dy * dy + dx * dx <= rad * rad).then_some(c)
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let spec = DatasetSpec::new(11, 6, 24);
        let a = gen_synthetic_dataset(&spec).unwrap();
        let b = gen_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for img in &a {
            assert_eq!(img.shape(), &[3, 24, 24]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // Images do not depend on the set size.
        let more = gen_synthetic_dataset(&DatasetSpec::new(11, 9, 24)).unwrap();
        assert_eq!(&more[..6], &a[..]);
    }

    #[test]
    fn seeds_differ() {
        let a = gen_synthetic_dataset(&DatasetSpec::new(1, 3, 32)).unwrap();
        let b = gen_synthetic_dataset(&DatasetSpec::new(2, 3, 32)).unwrap();
        let sum = |s: &[Tensor]| s.iter().map(|t| t.sum()).sum::<f64>();
        assert_ne!(sum(&a), sum(&b));
    }

    #[test]
    fn images_have_fine_detail() {
        // Mean absolute horizontal difference well above what smooth content
        // would give.
        for img in gen_synthetic_dataset(&DatasetSpec::new(3, 20, 32)).unwrap() {
            let d = img.data();
            let tv: f64 = d.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / d.len() as f64;
            assert!(tv > 1e-3, "{tv}");
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let mut s = DatasetSpec::new(0, 1, 8);
        s.weights = PatternWeights {
            rectangles: 0.0,
            gratings: 0.0,
            checkerboards: 0.0,
            ramps: 0.0,
            discs: 0.0,
        };
        assert!(gen_synthetic_dataset(&s).is_err());
        s.weights.discs = -1.0;
        assert!(gen_synthetic_dataset(&s).is_err());
    }
}
