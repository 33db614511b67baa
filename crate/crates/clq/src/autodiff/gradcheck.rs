//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::rng::KeyedRng;

use super::Tensor;

/// Check the analytic gradient of `f` w.r.t. every coordinate of every
/// tensor in `inputs` against central differences with step `h`.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` must rebuild its graph from the current input values on each call;
/// the inputs are perturbed in place and restored.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F>(f: F, inputs: &[&Tensor], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f()?;
    if !loss.is_scalar() {
        return Err(Error::NotScalar {
            op: "grad_check",
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.scalar_value().is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let saved = t.value_at(j);
            t.set_value_at(j, saved + h);
            let up = f()?.scalar_value();
            t.set_value_at(j, saved - h);
            let down = f()?.scalar_value();
            t.set_value_at(j, saved);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite("grad_check perturbed loss"));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// One finite-difference draw for a named op; the registry below drives
/// the `gradcheck` CLI subcommand and the acceptance suite.
pub type OpCheck = fn(&mut KeyedRng) -> Result<f64>;

fn vals(rng: &mut KeyedRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

/// Values bounded away from zero, random sign; keeps relu/abs kinks out
/// of the finite-difference window.
fn vals_signed(rng: &mut KeyedRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.range_f64(lo, hi);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}

const H: f64 = 1e-4;

macro_rules! check_binary {
    ($name:ident, $method:ident, $lo:expr, $hi:expr) => {
        fn $name(rng: &mut KeyedRng) -> Result<f64> {
            let a = Tensor::from_values(&[2, 3], vals(rng, 6, $lo, $hi))?;
            let b = Tensor::from_values(&[2, 3], vals(rng, 6, $lo, $hi))?;
            grad_check(|| Ok(a.$method(&b)?.sum_all()), &[&a, &b], H)
        }
    };
}

check_binary!(check_add, add, -2.0, 2.0);
check_binary!(check_sub, sub, -2.0, 2.0);
check_binary!(check_mul, mul, -2.0, 2.0);
check_binary!(check_div, div, 0.5, 2.0);

fn check_min_max(rng: &mut KeyedRng) -> Result<f64> {
    // keep the pair separated so the selection does not flip inside the
    // finite-difference window
    let a = Tensor::from_values(&[5], vals(rng, 5, 0.0, 1.0))?;
    let bv: Vec<f64> = a.values().iter().map(|v| v + 0.3).collect();
    let b = Tensor::from_values(&[5], bv)?;
    let e1 = grad_check(|| Ok(a.minimum(&b)?.sum_all()), &[&a, &b], H)?;
    let e2 = grad_check(|| Ok(b.maximum(&a)?.mul(&a)?.sum_all()), &[&a, &b], H)?;
    Ok(e1.max(e2))
}

fn check_pow(rng: &mut KeyedRng) -> Result<f64> {
    let p = rng.range_f64(-1.5, 2.5);
    let a = Tensor::from_values(&[4], vals(rng, 4, 0.3, 2.0))?;
    grad_check(|| Ok(a.powf(p).sum_all()), &[&a], H)
}

fn check_exp(rng: &mut KeyedRng) -> Result<f64> {
    let a = Tensor::from_values(&[4], vals_signed(rng, 4, 0.0, 1.5))?;
    grad_check(|| Ok(a.exp().sum_all()), &[&a], H)
}

fn check_log(rng: &mut KeyedRng) -> Result<f64> {
    let a = Tensor::from_values(&[4], vals(rng, 4, 0.2, 3.0))?;
    grad_check(|| Ok(a.ln().sum_all()), &[&a], H)
}

fn check_sigmoid(rng: &mut KeyedRng) -> Result<f64> {
    let a = Tensor::from_values(&[6], vals_signed(rng, 6, 0.0, 3.0))?;
    grad_check(|| Ok(a.sigmoid().sum_all()), &[&a], H)
}

fn check_relu(rng: &mut KeyedRng) -> Result<f64> {
    let a = Tensor::from_values(&[6], vals_signed(rng, 6, 0.2, 2.0))?;
    grad_check(|| Ok(a.relu().mul(&a)?.sum_all()), &[&a], H)
}

fn check_clamp(rng: &mut KeyedRng) -> Result<f64> {
    // inside the clamp band; the zero-gradient outside region has no
    // finite-difference signal by construction
    let a = Tensor::from_values(&[6], vals(rng, 6, 0.3, 0.7))?;
    grad_check(|| Ok(a.clamp(0.2, 0.8).powf(2.0).sum_all()), &[&a], H)
}

fn check_reductions(rng: &mut KeyedRng) -> Result<f64> {
    let a = Tensor::from_values(&[3, 4], vals_signed(rng, 12, 0.1, 2.0))?;
    let e1 = grad_check(|| Ok(a.sum_all()), &[&a], H)?;
    let e2 = grad_check(|| Ok(a.mean_all().powf(2.0).sum_all()), &[&a], H)?;
    let e3 = grad_check(|| Ok(a.sum_axis(0)?.powf(2.0).sum_all()), &[&a], H)?;
    let e4 = grad_check(|| Ok(a.mean_axis(1)?.powf(2.0).sum_all()), &[&a], H)?;
    Ok(e1.max(e2).max(e3).max(e4))
}

fn check_matmul(rng: &mut KeyedRng) -> Result<f64> {
    let a = Tensor::from_values(&[3, 4], vals_signed(rng, 12, 0.1, 1.0))?;
    let b = Tensor::from_values(&[4, 2], vals_signed(rng, 8, 0.1, 1.0))?;
    grad_check(|| Ok(a.matmul(&b)?.powf(2.0).sum_all()), &[&a, &b], H)
}

fn check_conv2d(rng: &mut KeyedRng) -> Result<f64> {
    let stride = rng.range_usize(1, 2);
    let padding = rng.range_usize(0, 1);
    let x = Tensor::from_values(&[2, 5, 5], vals_signed(rng, 50, 0.1, 1.0))?;
    let w = Tensor::from_values(&[3, 2, 3, 3], vals_signed(rng, 54, 0.05, 0.5))?;
    let b = Tensor::from_values(&[3], vals_signed(rng, 3, 0.0, 0.5))?;
    grad_check(
        || Ok(x.conv2d(&w, &b, stride, padding)?.powf(2.0).sum_all()),
        &[&x, &w, &b],
        H,
    )
}

fn check_bilinear_sample(rng: &mut KeyedRng) -> Result<f64> {
    let f = Tensor::from_values(&[2, 4, 4], vals_signed(rng, 32, 0.1, 1.0))?;
    // fractional coordinates bounded away from the integer-lattice kinks
    let n = 5;
    let coords = |rng: &mut KeyedRng| -> Vec<f64> {
        (0..n)
            .map(|_| rng.range_usize(0, 2) as f64 + rng.range_f64(0.2, 0.8))
            .collect()
    };
    let xs = Tensor::from_values(&[n], coords(rng))?;
    let ys = Tensor::from_values(&[n], coords(rng))?;
    grad_check(
        || Ok(f.bilinear_sample(&xs, &ys)?.powf(2.0).sum_all()),
        &[&f, &xs, &ys],
        H,
    )
}

fn check_structural(rng: &mut KeyedRng) -> Result<f64> {
    let a = Tensor::from_values(&[2, 4], vals_signed(rng, 8, 0.1, 1.0))?;
    let e1 = grad_check(|| Ok(a.reshape(&[4, 2])?.powf(2.0).sum_all()), &[&a], H)?;
    let e2 = grad_check(
        || Ok(a.gather_cols(&[3, 0, 3])?.powf(2.0).sum_all()),
        &[&a],
        H,
    )?;
    let e3 = grad_check(|| Ok(a.row(1)?.powf(2.0).sum_all()), &[&a], H)?;
    let e4 = grad_check(
        || Ok(a.row(0)?.repeat_row(3)?.mul(&a.row(1)?.repeat_row(3)?)?.sum_all()),
        &[&a],
        H,
    )?;
    let e5 = grad_check(
        || Ok(a.row(0)?.repeat_col(2)?.powf(2.0).sum_all()),
        &[&a],
        H,
    )?;
    let e6 = grad_check(
        || {
            let c = Tensor::concat_last(&[a.row(0)?, a.row(1)?])?;
            Ok(c.powf(2.0).sum_all())
        },
        &[&a],
        H,
    )?;
    Ok(e1.max(e2).max(e3).max(e4).max(e5).max(e6))
}

fn check_scalar_ops(rng: &mut KeyedRng) -> Result<f64> {
    // the +2.0 shift keeps the cube's root well outside the draw range
    let a = Tensor::from_values(&[4], vals_signed(rng, 4, 0.1, 1.5))?;
    let e1 = grad_check(|| Ok(a.add_scalar(2.0).powf(3.0).sum_all()), &[&a], H)?;
    let e2 = grad_check(|| Ok(a.mul_scalar(-1.3).powf(2.0).sum_all()), &[&a], H)?;
    Ok(e1.max(e2))
}

/// All registered op checks, by name.
pub fn registered_op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("add", check_add),
        ("sub", check_sub),
        ("mul", check_mul),
        ("div", check_div),
        ("add_scalar/mul_scalar", check_scalar_ops),
        ("pow_scalar", check_pow),
        ("exp", check_exp),
        ("log", check_log),
        ("sigmoid", check_sigmoid),
        ("relu", check_relu),
        ("clamp", check_clamp),
        ("minimum/maximum", check_min_max),
        ("sum/mean reductions", check_reductions),
        ("matmul", check_matmul),
        ("conv2d", check_conv2d),
        ("bilinear_sample", check_bilinear_sample),
        ("reshape/gather/row/repeat/concat", check_structural),
    ]
}

/// Run every registered op check for `draws` draws; returns per-op max
/// error in registry order.
pub fn run_op_checks(draws: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (i, (name, check)) in registered_op_checks().into_iter().enumerate() {
        let mut rng = KeyedRng::new(seed, i as u64, name);
        let mut worst = 0.0f64;
        for _ in 0..draws {
            worst = worst.max(check(&mut rng)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}
