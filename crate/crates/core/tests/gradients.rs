//! Central-difference checks for every differentiable op.

use lswinsr::attention::{
    kernel_attention_bruteforce, kernel_attention_linear, multi_head_kernel_attention,
    multi_head_softmax_attention, window_softmax, KernelAttentionParams, SoftmaxAttentionParams,
};
use lswinsr::autodiff::{grad_check, grad_check_many};
use lswinsr::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const EPS: f64 = 1e-3;
const TOL: f64 = 1e-6;

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Sum of `y` weighted by a fixed random tensor, so no gradient entry is
/// trivially symmetric.
fn wsum(tape: &Tape, y: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let r = tape.constant(Tensor::rand_uniform(y.shape().to_vec(), 0.5, 1.5, &mut rng));
    Ok(tape.sum(&tape.mul(y, &r)?))
}

fn check_many(name: &str, shapes: &[&[usize]], f: impl Fn(&Tape, &[Var]) -> Result<Var>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Tensor> = shapes.iter().map(|s| rand(s, &mut rng)).collect();
        let err = grad_check_many(|t, v| wsum(t, &f(t, v)?, seed), &xs, EPS).unwrap();
        assert!(err < TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

#[test]
fn trivial_examples() {
    let x = Tensor::from_fn([7], |i| i[0] as f64 * 0.3 - 1.0);
    assert!(grad_check(|t, v| Ok(t.sum(v)), &x, EPS).unwrap() < 1e-10);
    let z = Tensor::zeros([5]);
    assert!(grad_check(|t, v| Ok(t.sum(&t.softplus(v))), &z, EPS).unwrap() < 1e-8);

    let tape = Tape::new();
    let x = tape.var(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let loss = tape.sum(&tape.mul(&x, &x).unwrap());
    assert_eq!(
        tape.backward(&loss).unwrap().get(&x).unwrap().data(),
        &[2.0, -4.0, 1.0]
    );
}

#[test]
fn elementwise_binary_with_broadcast() {
    check_many("add", &[&[3, 4], &[4]], |t, v| t.add(&v[0], &v[1]));
    check_many("sub", &[&[2, 3, 4], &[3, 1]], |t, v| t.sub(&v[0], &v[1]));
    check_many("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(&v[0], &v[1]));
    check_many("mul_bcast", &[&[2, 3, 4], &[1, 4]], |t, v| {
        t.mul(&v[0], &v[1])
    });
    check_many("div", &[&[3, 4], &[3, 1]], |t, v| {
        let den = t.add(&t.exp(&v[1]), &t.constant(Tensor::scalar(0.5)))?;
        t.div(&v[0], &den)
    });
}

#[test]
fn matmul_batched_and_shared() {
    check_many("matmul2d", &[&[3, 5], &[5, 2]], |t, v| {
        t.matmul(&v[0], &v[1])
    });
    check_many("matmul_batched", &[&[2, 3, 4], &[2, 4, 3]], |t, v| {
        t.matmul(&v[0], &v[1])
    });
    check_many("matmul_shared", &[&[2, 3, 4], &[4, 5]], |t, v| {
        t.matmul(&v[0], &v[1])
    });
}

#[test]
fn matmul_sum_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = rand(&[4, 3], &mut rng);
    let b = rand(&[3, 5], &mut rng);
    let err = grad_check_many(|t, v| Ok(t.sum(&t.matmul(&v[0], &v[1])?)), &[a, b], EPS).unwrap();
    assert!(err < TOL);
}

#[test]
fn shape_ops() {
    check_many("scale", &[&[3, 2]], |t, v| Ok(t.scale(&v[0], -2.5)));
    check_many("permute", &[&[2, 3, 4]], |t, v| {
        t.permute(&v[0], &[2, 0, 1])
    });
    check_many("transpose", &[&[2, 3, 4]], |t, v| t.transpose(&v[0]));
    check_many("reshape", &[&[2, 6]], |t, v| t.reshape(&v[0], [3, 4]));
    check_many("roll", &[&[2, 5, 3]], |t, v| t.roll(&v[0], 1, -2));
    check_many("pad_end", &[&[2, 3]], |t, v| t.pad_end(&v[0], 1, 2));
    check_many("narrow", &[&[4, 5]], |t, v| t.narrow(&v[0], 1, 1, 3));
    check_many("sum_axis", &[&[3, 4, 2]], |t, v| t.sum_axis(&v[0], 1));
    check_many("mean", &[&[3, 4]], |t, v| {
        let m = t.mean(&v[0]);
        t.mul(&m, &m)
    });
    check_many("index_select", &[&[5, 3]], |t, v| {
        t.index_select(&v[0], &[4, 0, 4, 2, 2, 2])
    });
}

#[test]
fn unary_activations() {
    check_many("exp", &[&[4, 3]], |t, v| Ok(t.exp(&v[0])));
    check_many("softplus", &[&[4, 3]], |t, v| {
        Ok(t.softplus(&t.scale(&v[0], 8.0)))
    });
    check_many("gelu", &[&[4, 3]], |t, v| Ok(t.gelu(&t.scale(&v[0], 3.0))));
    check_many("softmax_rows", &[&[4, 5]], |t, v| {
        Ok(t.softmax_rows(&t.scale(&v[0], 3.0)))
    });
    // Keep inputs away from the kink at zero.
    check_many("abs", &[&[4, 3]], |t, v| {
        let shifted = t.add(&v[0], &t.constant(Tensor::scalar(1.5)))?;
        Ok(t.abs(&t.mul(
            &shifted,
            &t.constant(Tensor::new([3], vec![1.0, -1.0, 1.0])?),
        )?))
    });
}

#[test]
fn layer_norm_and_conv() {
    check_many("layer_norm", &[&[5, 6], &[6], &[6]], |t, v| {
        t.layer_norm(&v[0], &v[1], &v[2], 1e-5)
    });
    check_many("conv2d_pad1", &[&[2, 5, 4], &[3, 2, 3, 3], &[3]], |t, v| {
        t.conv2d(&v[0], &v[1], &v[2], 1)
    });
    check_many(
        "conv2d_valid",
        &[&[2, 6, 6], &[2, 2, 3, 3], &[2]],
        |t, v| t.conv2d(&v[0], &v[1], &v[2], 0),
    );
}

#[test]
fn kernel_attention_forms() {
    check_many("kernel_linear", &[&[16, 4], &[16, 4], &[16, 4]], |t, v| {
        kernel_attention_linear(t, &v[0], &v[1], &v[2])
    });
    check_many(
        "kernel_linear_batched",
        &[&[2, 3, 4, 2], &[2, 3, 4, 2], &[2, 3, 4, 2]],
        |t, v| kernel_attention_linear(t, &v[0], &v[1], &v[2]),
    );
    check_many("kernel_brute", &[&[9, 3], &[9, 3], &[9, 3]], |t, v| {
        kernel_attention_bruteforce(t, &v[0], &v[1], &v[2])
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand(&[4, 8], &mut rng);
    let k = rand(&[4, 8], &mut rng);
    let vv = rand(&[4, 8], &mut rng);
    let err = grad_check(
        |t, q| {
            let k = t.constant(k.clone());
            let v = t.constant(vv.clone());
            Ok(t.sum(&kernel_attention_linear(t, q, &k, &v)?))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn window_softmax_all_inputs() {
    let s: &[usize] = &[3, 2, 4, 3];
    check_many("window_softmax", &[s, s, s, &[2, 4, 4], &[2]], |t, v| {
        window_softmax(t, &v[0], &v[1], &v[2], Some(&v[3]), &v[4], None)
    });
    let mask = Tensor::from_fn([3, 4, 4], |i| {
        if (i[0] + i[1] + i[2]) % 3 == 0 {
            -100.0
        } else {
            0.0
        }
    });
    check_many("window_softmax_masked", &[s, s, s, &[2]], move |t, v| {
        window_softmax(t, &v[0], &v[1], &v[2], None, &v[3], Some(&mask))
    });
}

#[test]
fn multi_head_wrappers() {
    let d: &[usize] = &[6, 6];
    check_many("mhka", &[&[2, 4, 6], d, d, d, d], |t, v| {
        let p = KernelAttentionParams {
            w_q: v[1].clone(),
            w_k: v[2].clone(),
            w_v: v[3].clone(),
            w_o: v[4].clone(),
        };
        multi_head_kernel_attention(t, &v[0], &p, 2)
    });
    check_many("mhsa", &[&[2, 4, 6], d, d, d, d, &[9, 3], &[3]], |t, v| {
        let p = SoftmaxAttentionParams {
            w_q: v[1].clone(),
            w_k: v[2].clone(),
            w_v: v[3].clone(),
            w_o: v[4].clone(),
            bias_table: v[5].clone(),
            log_tau: v[6].clone(),
        };
        multi_head_softmax_attention(t, &v[0], &p, 3, 2, None)
    });
}

#[test]
fn kernel_forms_gradient_parity() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let xs: Vec<Tensor> = (0..3).map(|_| rand(&[9, 4], &mut rng)).collect();
        let grads = |brute: bool| {
            let t = Tape::new();
            let v: Vec<Var> = xs.iter().map(|x| t.var(x.clone())).collect();
            let out = if brute {
                kernel_attention_bruteforce(&t, &v[0], &v[1], &v[2]).unwrap()
            } else {
                kernel_attention_linear(&t, &v[0], &v[1], &v[2]).unwrap()
            };
            let loss = wsum(&t, &out, seed).unwrap();
            let g = t.backward(&loss).unwrap();
            v.iter()
                .map(|x| g.get(x).unwrap().clone())
                .collect::<Vec<_>>()
        };
        for (a, b) in grads(false).iter().zip(grads(true)) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!(lswinsr::autodiff::relative_error(x, y) < 1e-6);
            }
        }
    }
}
