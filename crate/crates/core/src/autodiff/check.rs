use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of a scalar function against a numeric
/// derivative. Returns the largest relative error over all coordinates of
/// `x`.
///
/// The numeric derivative is Ridders' extrapolation of central differences:
/// starting at step `eps`, the step shrinks geometrically and a Neville
/// tableau cancels the leading truncation terms, keeping the estimate whose
/// internal error bound is smallest. This stays accurate both where the
/// gradient entry is tiny (plain differences drown in rounding) and where
/// the function curves sharply.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    grad_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let t = Tape::no_grad();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs)?.value().item()
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        for j in 0..x.numel() {
            let orig = x.data()[j];
            let numeric = ridders(
                |h| {
                    probe[i].data_mut()[j] = orig + h;
                    let up = eval(&probe)?;
                    probe[i].data_mut()[j] = orig - h;
                    let down = eval(&probe)?;
                    probe[i].data_mut()[j] = orig;
                    Ok((up - down) / (2.0 * h))
                },
                eps,
            )?;
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

const SHRINK: f64 = 1.4;
const TABLE: usize = 12;

fn ridders(mut central: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let shrink2 = SHRINK * SHRINK;
    let mut h = eps;
    let mut prev = vec![central(h)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    for _ in 1..TABLE {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = shrink2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        let n = row.len();
        if (row[n - 1] - prev[n - 2]).abs() >= 2.0 * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}
