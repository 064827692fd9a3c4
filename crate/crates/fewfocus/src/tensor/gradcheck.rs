//! Central finite-difference oracle and the per-op gradient-check suite.
//!
//! The oracle only ever drives forward passes, so it stays independent of
//! the backward implementations it verifies. Errors are normalized by the
//! largest gradient magnitude in the compared set.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{ops, Shape, Tape, Tensor};
use crate::error::Result;

/// Central difference (f(x+step) - f(x-step)) / (x_plus - x_minus), per
/// coordinate. The denominator uses the perturbed values as actually
/// stored in single precision. `x` is restored afterwards.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f32) -> Tensor {
    let n = x.numel();
    let mut out = vec![0.0f32; n];
    for (i, o) in out.iter_mut().enumerate() {
        *o = finite_diff_at(&mut f, x, i, step) as f32;
    }
    Tensor::new(x.shape(), out, false)
}

/// Central difference for a single coordinate of `x`.
pub fn finite_diff_at(
    f: &mut impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    idx: usize,
    step: f32,
) -> f64 {
    let orig = x.data()[idx];
    x.update_data(|d| d[idx] = orig + step);
    let xp = x.data()[idx] as f64;
    let fp = f(x);
    x.update_data(|d| d[idx] = orig - step);
    let xm = x.data()[idx] as f64;
    let fm = f(x);
    x.update_data(|d| d[idx] = orig);
    (fp - fm) / (xp - xm)
}

/// Max absolute deviation between two gradient vectors, normalized by the
/// largest magnitude either of them contains (floored to keep near-zero
/// gradient sets meaningful).
pub fn normalized_max_err(ad: &[f32], fd: &[f32]) -> f64 {
    debug_assert_eq!(ad.len(), fd.len());
    let scale = ad
        .iter()
        .chain(fd.iter())
        .fold(1e-4f64, |m, &v| m.max((v as f64).abs()));
    ad.iter()
        .zip(fd.iter())
        .fold(0.0f64, |m, (&a, &f)| m.max(((a as f64) - (f as f64)).abs()))
        / scale
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_err < self.tol && self.max_err.is_finite()
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(Shape(shape), data, false)
}

/// Verify autodiff against the oracle for one scalar-producing graph.
///
/// `build` must construct the same graph every call; the check runs it
/// once on a recording tape for autodiff gradients, then re-runs it on
/// inference tapes while the oracle perturbs each listed input.
pub fn check_graph(
    name: &str,
    inputs: &[(&str, &Tensor)],
    step: f32,
    tol: f64,
    build: impl Fn(&Tape) -> Result<Tensor>,
) -> Result<Vec<OpCheck>> {
    for (_, t) in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let tape = Tape::new();
    let loss = build(&tape)?;
    tape.backward(&loss)?;
    let mut checks = Vec::new();
    for (label, t) in inputs {
        let ad = t
            .grad()
            .unwrap_or_else(|| panic!("no autodiff grad for {}.{}", name, label));
        let fd = finite_diff_grad(
            |_| {
                let inf = Tape::inference();
                build(&inf).expect("forward rebuild failed").item() as f64
            },
            t,
            step,
        );
        checks.push(OpCheck {
            name: format!("{}.d{}", name, label),
            max_err: normalized_max_err(&ad, &fd.to_vec()),
            tol,
        });
    }
    for (_, t) in inputs {
        t.zero_grad();
        t.set_requires_grad(false);
    }
    Ok(checks)
}

/// Tolerance for single-op checks (step 1e-3, single precision).
pub const OP_TOL: f64 = 1e-3;
const OP_STEP: f32 = 1e-3;

/// Gradient-check every registered op on small random instances for each
/// seed; returns one result per (op, input) pair with the worst error over
/// the seeds.
pub fn run_op_suite(seeds: &[u64]) -> Result<Vec<OpCheck>> {
    let mut worst: Vec<OpCheck> = Vec::new();
    for &seed in seeds {
        for check in op_suite_once(seed)? {
            match worst.iter_mut().find(|c| c.name == check.name) {
                Some(w) => {
                    if check.max_err > w.max_err {
                        w.max_err = check.max_err;
                    }
                }
                None => worst.push(check),
            }
        }
    }
    Ok(worst)
}

fn op_suite_once(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::new();

    // random projection makes the loss sensitive to every output element
    // with distinct weights, catching transposed/misrouted gradients that
    // a plain sum would miss; mean keeps the scalar near unit scale.
    fn project(tape: &Tape, y: &Tensor, proj: &Tensor) -> Result<Tensor> {
        ops::mean(tape, &ops::mul(tape, y, proj)?)
    }

    {
        let x = rand_tensor(&mut rng, [1, 2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, [3, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, [1, 3, 1, 1], -0.3, 0.3);
        let proj = rand_tensor(&mut rng, [1, 3, 5, 5], -1.0, 1.0);
        all.extend(check_graph(
            "conv2d",
            &[("x", &x), ("w", &w), ("b", &b)],
            OP_STEP,
            OP_TOL,
            |tape| project(tape, &ops::conv2d(tape, &x, &w, &b, 1, 1)?, &proj),
        )?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 2, 7, 7], -1.0, 1.0);
        let w = rand_tensor(&mut rng, [2, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, [1, 2, 1, 1], -0.3, 0.3);
        let proj = rand_tensor(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
        all.extend(check_graph(
            "conv2d_s2",
            &[("x", &x), ("w", &w), ("b", &b)],
            OP_STEP,
            OP_TOL,
            |tape| project(tape, &ops::conv2d(tape, &x, &w, &b, 2, 0)?, &proj),
        )?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 2, 8, 8], -1.0, 1.0);
        let w = rand_tensor(&mut rng, [2, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, [1, 2, 1, 1], -0.3, 0.3);
        let proj = rand_tensor(&mut rng, [1, 2, 8, 8], -1.0, 1.0);
        all.extend(check_graph(
            "conv2d_dilated",
            &[("x", &x), ("w", &w), ("b", &b)],
            OP_STEP,
            OP_TOL,
            |tape| project(tape, &ops::conv2d_dilated(tape, &x, &w, &b, 1, 3, 3)?, &proj),
        )?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 2, 6, 6], -1.0, 1.0);
        let proj = rand_tensor(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
        all.extend(check_graph("avg_pool2d", &[("x", &x)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::avg_pool2d(tape, &x, 2, 2)?, &proj)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 2, 6, 6], -1.0, 1.0);
        let proj = rand_tensor(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
        all.extend(check_graph("max_pool2d", &[("x", &x)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::max_pool2d(tape, &x, 2, 2)?, &proj)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 2, 3, 4], -1.0, 1.0);
        let proj = rand_tensor(&mut rng, [1, 2, 6, 8], -1.0, 1.0);
        all.extend(check_graph("upsample_bilinear_x2", &[("x", &x)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::upsample_bilinear_x2(tape, &x)?, &proj)
        })?);
    }
    {
        let a = rand_tensor(&mut rng, [1, 2, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, [1, 3, 4, 4], -1.0, 1.0);
        let proj = rand_tensor(&mut rng, [1, 5, 4, 4], -1.0, 1.0);
        all.extend(check_graph(
            "concat_channels",
            &[("a", &a), ("b", &b)],
            OP_STEP,
            OP_TOL,
            |tape| project(tape, &ops::concat_channels(tape, &[&a, &b])?, &proj),
        )?);
    }
    {
        // keep values away from the kink at zero so central differences
        // stay two-sided
        let x = {
            let t = rand_tensor(&mut rng, [1, 3, 4, 4], -1.0, 1.0);
            t.update_data(|d| {
                for v in d.iter_mut() {
                    if v.abs() < 0.05 {
                        *v = 0.1 * v.signum() + *v;
                    }
                }
            });
            t
        };
        let a = rand_tensor(&mut rng, [1, 3, 1, 1], 0.05, 0.5);
        let proj = rand_tensor(&mut rng, [1, 3, 4, 4], -1.0, 1.0);
        all.extend(check_graph("prelu", &[("x", &x), ("a", &a)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::prelu(tape, &x, &a)?, &proj)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 2, 4, 4], 0.06, 1.0);
        let flip = rand_tensor(&mut rng, [1, 2, 4, 4], -1.0, 1.0);
        let x2 = ops::mul(&Tape::inference(), &x, &flip)?;
        x2.update_data(|d| {
            for v in d.iter_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
        });
        let proj = rand_tensor(&mut rng, [1, 2, 4, 4], -1.0, 1.0);
        all.extend(check_graph("leaky_relu", &[("x", &x2)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::leaky_relu(tape, &x2, 0.2)?, &proj)
        })?);
        all.extend(check_graph("abs", &[("x", &x2)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::abs(tape, &x2)?, &proj)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 2, 4, 4], -2.5, 2.5);
        let proj = rand_tensor(&mut rng, [1, 2, 4, 4], -1.0, 1.0);
        all.extend(check_graph("sigmoid", &[("x", &x)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::sigmoid(tape, &x)?, &proj)
        })?);
        all.extend(check_graph("tanh_unit", &[("x", &x)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::tanh_unit(tape, &x)?, &proj)
        })?);
    }
    {
        let a = rand_tensor(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
        let proj = rand_tensor(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
        all.extend(check_graph("add", &[("a", &a), ("b", &b)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::add(tape, &a, &b)?, &proj)
        })?);
        all.extend(check_graph("sub", &[("a", &a), ("b", &b)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::sub(tape, &a, &b)?, &proj)
        })?);
        all.extend(check_graph("mul", &[("a", &a), ("b", &b)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::mul(tape, &a, &b)?, &proj)
        })?);
        all.extend(check_graph("scale", &[("a", &a)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::scale(tape, &a, -1.7)?, &proj)
        })?);
        all.extend(check_graph("add_scalar", &[("a", &a)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::add_scalar(tape, &a, 0.4)?, &proj)
        })?);
        all.extend(check_graph("sum", &[("a", &a)], OP_STEP, OP_TOL, |tape| {
            ops::sum(tape, &a)
        })?);
        all.extend(check_graph("mean", &[("a", &a)], OP_STEP, OP_TOL, |tape| {
            ops::mean(tape, &a)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, [1, 1, 4, 4], 0.05, 0.95);
        let proj = rand_tensor(&mut rng, [1, 1, 4, 4], -1.0, 1.0);
        all.extend(check_graph("log_clamped", &[("x", &x)], OP_STEP, OP_TOL, |tape| {
            project(tape, &ops::log_clamped(tape, &x)?, &proj)
        })?);
    }
    {
        let logits = rand_tensor(&mut rng, [2, 2, 4, 4], -1.5, 1.5);
        let target = {
            let n = 2 * 4 * 4;
            let data: Vec<f32> =
                (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            Tensor::new(Shape([2, 1, 4, 4]), data, false)
        };
        all.extend(check_graph(
            "softmax_cross_entropy2",
            &[("logits", &logits)],
            OP_STEP,
            OP_TOL,
            |tape| ops::softmax_cross_entropy2(tape, &logits, &target),
        )?);
    }

    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn oracle_on_sum_is_all_ones() {
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), [1, 2, 3, 3], -1.0, 1.0);
        let fd = finite_diff_grad(
            |t| t.data().iter().map(|&v| v as f64).sum::<f64>(),
            &x,
            1e-3,
        );
        for v in fd.to_vec() {
            assert!((v - 1.0).abs() < 1e-6, "fd {}", v);
        }
    }

    #[test]
    fn oracle_on_sum_of_squares_matches_analytic() {
        let x = Tensor::full([1, 1, 1, 4], 1.0);
        let fd = finite_diff_grad(
            |t| t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>(),
            &x,
            1e-3,
        );
        for v in fd.to_vec() {
            assert!((v - 2.0).abs() < 1e-4, "fd {}", v);
        }
    }

    #[test]
    fn every_op_matches_the_oracle_over_five_seeds() {
        let checks = run_op_suite(&[1, 2, 3, 4, 5]).unwrap();
        assert!(checks.len() >= 20);
        for c in &checks {
            assert!(c.passed(), "{} err {:.3e} tol {:.0e}", c.name, c.max_err, c.tol);
        }
    }
}
