use lswinsr::attention::kernel_attention_linear;
use lswinsr::data::{bicubic_resize, degrade, gaussian_blur, DegradationSpec, BICUBIC_A};
use lswinsr::metrics::{mae, psnr, ssim};
use lswinsr::model::{forward, init_weights, AttentionKind, ModelConfig};
use lswinsr::nn::softplus_scalar;
use lswinsr::window::{
    cyclic_shift, partition_hwc, reverse_hwc, window_partition, window_reverse, WindowLayout,
};
use lswinsr::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sorted(t: &Tensor) -> Vec<f64> {
    let mut v = t.data().to_vec();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_loops(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed: u64) {
        let a = rand(&[m, k], -1.0, 1.0, seed);
        let b = rand(&[k, n], -1.0, 1.0, seed ^ 1);
        let t = Tape::no_grad();
        let c = t.matmul(&t.constant(a.clone()), &t.constant(b.clone())).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                prop_assert!((c.value().data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_matches_loops(
        ci in 1usize..=4, co in 1usize..=4, h in 1usize..=7, w in 1usize..=7, pad in 0usize..=1, seed: u64,
    ) {
        prop_assume!(h + 2 * pad >= 3 && w + 2 * pad >= 3);
        let x = rand(&[ci, h, w], -1.0, 1.0, seed);
        let k = rand(&[co, ci, 3, 3], -1.0, 1.0, seed ^ 1);
        let b = rand(&[co], -1.0, 1.0, seed ^ 2);
        let t = Tape::no_grad();
        let y = t.conv2d(&t.constant(x.clone()), &t.constant(k.clone()), &t.constant(b.clone()), pad).unwrap();
        let (oh, ow) = (h + 2 * pad - 2, w + 2 * pad - 2);
        prop_assert_eq!(y.shape(), &[co, oh, ow]);
        for o in 0..co {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = ((yy + dy) as isize - pad as isize, (xx + dx) as isize - pad as isize);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += k.data()[((o * ci + c) * 3 + dy) * 3 + dx]
                                        * x.data()[(c * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    prop_assert!((y.value().data()[(o * oh + yy) * ow + xx] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..=6, c in 1usize..=9, scale in 0.1f64..50.0, seed: u64) {
        let t = Tape::no_grad();
        let y = t.softmax_rows(&t.constant(rand(&[r, c], -scale, scale, seed)));
        for row in y.value().data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn softplus_is_strictly_positive(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        prop_assert!(softplus_scalar(x) > 0.0);
    }

    #[test]
    fn kernel_attention_is_a_convex_combination(n in 1usize..=20, d in 1usize..=6, seed: u64) {
        let t = Tape::no_grad();
        let q = t.constant(rand(&[n, d], -3.0, 3.0, seed));
        let k = t.constant(rand(&[n, d], -3.0, 3.0, seed ^ 1));
        let v = rand(&[n, d], -1.0, 1.0, seed ^ 2);
        let out = kernel_attention_linear(&t, &q, &k, &t.constant(v.clone())).unwrap();
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|i| v.data()[i * d + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let o = out.value().data()[i * d + c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn window_roundtrips_and_multiset(m in 1usize..=5, wy in 1usize..=3, wx in 1usize..=3, d in 1usize..=4, seed: u64) {
        let (h, w) = (m * wy, m * wx);
        let t = Tape::no_grad();
        let x = t.constant(rand(&[d, h, w], -1.0, 1.0, seed));
        let lay = WindowLayout::new(h, w, m).unwrap();
        let wins = window_partition(&t, &x, m).unwrap();
        prop_assert_eq!(wins.shape(), &[wy * wx, m * m, d]);
        prop_assert_eq!(sorted(wins.value()), sorted(x.value()));
        let back = window_reverse(&t, &wins, lay).unwrap();
        prop_assert_eq!(back.value(), x.value());
        let y = t.constant(rand(&[h, w, d], -1.0, 1.0, seed ^ 3));
        let back = reverse_hwc(&t, &partition_hwc(&t, &y, m).unwrap(), lay).unwrap();
        prop_assert_eq!(back.value(), y.value());
        let s = (m / 2) as isize;
        let shifted = cyclic_shift(&t, &x, -s, -s).unwrap();
        let back = cyclic_shift(&t, &shifted, s, s).unwrap();
        prop_assert_eq!(back.value(), x.value());
    }

    #[test]
    fn degrade_shape_and_constants(side in 1usize..=6, s in prop_oneof![Just(2usize), Just(4), Just(8)], blur: bool, c in 0.0f64..1.0) {
        let hr = Tensor::from_fn([3, side * s, side * s + s], |_| c);
        let spec = if blur { DegradationSpec::blurred(s) } else { DegradationSpec::bicubic(s) };
        let lr = degrade(&hr, &spec).unwrap();
        prop_assert_eq!(lr.shape(), &[3, side, side + 1]);
        prop_assert!(lr.data().iter().all(|v| (v - c).abs() < 1e-10));
        prop_assert_eq!(&degrade(&hr, &spec).unwrap(), &lr);
        let up = bicubic_resize(&lr, 2 * side + 1, 3 * side, BICUBIC_A).unwrap();
        prop_assert!(up.data().iter().all(|v| (v - c).abs() < 1e-10));
        let bl = gaussian_blur(&hr, 1.3, 7).unwrap();
        prop_assert!(bl.data().iter().all(|v| (v - c).abs() < 1e-10));
    }

    #[test]
    fn metric_symmetry_and_bounds(h in 11usize..=16, w in 11usize..=16, seed: u64) {
        let a = rand(&[3, h, w], 0.0, 1.0, seed);
        let b = rand(&[3, h, w], 0.0, 1.0, seed ^ 1);
        let c = rand(&[3, h, w], 0.0, 1.0, seed ^ 2);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-100.0..=100.0).contains(&s));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 100.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_output_is_upscaled(
        h in 1usize..=11, w in 1usize..=11, m in 2usize..=4, s in prop_oneof![Just(2usize), Just(4)], heads in 1usize..=2, softmax: bool,
    ) {
        let cfg = ModelConfig {
            embed_dim: 4 * heads,
            num_blocks: 1,
            layers_per_block: 2,
            window_side: m,
            num_heads: heads,
            upscale: s,
            attention_kind: if softmax { AttentionKind::Softmax } else { AttentionKind::Kernel },
            ..ModelConfig::default()
        };
        let wts = init_weights(&cfg, 0).unwrap();
        let t = Tape::no_grad();
        let x = t.constant(rand(&[3, h, w], 0.0, 1.0, 5));
        let y = forward(&t, &x, &wts.constants(), &cfg).unwrap();
        prop_assert_eq!(y.shape(), &[3, s * h, s * w]);
        prop_assert!(y.value().is_finite());
    }
}
