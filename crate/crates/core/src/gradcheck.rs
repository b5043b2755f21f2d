//! Finite-difference gradient oracle and the check harness built on it.
//!
//! Checks run at 64-bit only; central differences at f32 lose too many
//! digits to distinguish a wrong backward rule from rounding noise.

use crate::error::Result;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Default perturbation for [`finite_diff_grad`].
pub const DEFAULT_EPS: f64 = 1e-4;

/// Gradient agreement threshold used across the whole crate.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Guarded relative error: plain relative error for gradients of visible
/// magnitude, absolute comparison (scaled by the 0.01 floor) for tiny ones,
/// where central differences bottom out in rounding noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(0.01)
}

/// Central-difference gradient of a deterministic scalar function:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per element. Elements are
/// independent, so the sweep parallelizes without changing any result.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64> + Sync,
{
    let probe = |i: usize| -> Result<f64> {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        Ok((f(&plus)? - f(&minus)?) / (2.0 * eps))
    };
    let grad: Result<Vec<f64>> = if x.numel() >= 8 {
        (0..x.numel()).into_par_iter().map(probe).collect()
    } else {
        (0..x.numel()).map(probe).collect()
    };
    Tensor::new(x.shape().to_vec(), grad?)
}

/// Outcome of checking one parameter group or op.
#[derive(Debug, Clone)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GroupResult {
    pub fn format_line(&self) -> String {
        format!(
            "{} {:<44} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err
        )
    }
}

/// Compare tape gradients against finite differences for a scalar-valued
/// graph over the given leaves.
///
/// `build` receives a fresh tape plus one id per input (in order) and
/// returns the loss id; it runs once for the tape gradients and `2 * numel`
/// more times for the probes, so it must be deterministic.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], eps: f64, tol: f64, build: F) -> Result<GroupResult>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId> + Sync,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    for (check_idx, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(ids[check_idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let numeric = finite_diff_grad(
            |perturbed| {
                let mut t = Tape::new();
                let ids: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| t.leaf(if i == check_idx { perturbed.clone() } else { v.clone() }, false))
                    .collect();
                let loss = build(&mut t, &ids)?;
                t.value(loss).item()
            },
            input,
            eps,
        )?;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            max_rel = max_rel.max(relative_error(a, n));
        }
    }
    Ok(GroupResult { name: name.to_string(), max_rel_err: max_rel, passed: max_rel <= tol })
}

/// Random tensor in `[-1, 1]` for gradient probes.
pub fn probe_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_rng_uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

/// Like [`probe_tensor`] but pushes every element at least `margin` away
/// from zero; for ops with a kink (relu, abs) or a pole (div) there.
pub fn probe_tensor_min_abs(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    let mut t = probe_tensor(shape, seed);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { *v - margin } else { *v + margin };
        }
    }
    t
}

/// Scalar loss that exposes the full Jacobian: a fixed-random weighted sum
/// of the op output. A plain sum would hide bugs in ops whose output rows
/// sum to a constant (softmax).
pub fn weighted_sum_loss(tape: &mut Tape<f64>, out: TensorId, seed: u64) -> Result<TensorId> {
    let weights = probe_tensor(tape.value(out).shape(), seed);
    let weights = tape.leaf(weights, false);
    let prod = crate::ops::mul(tape, out, weights)?;
    crate::ops::sum_all(tape, prod)
}

/// Gradient checks for every differentiable primitive in [`crate::ops`].
/// The attention module ships its own suite; the gradcheck CLI merges both.
pub fn ops_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<GroupResult>> {
    use crate::ops;

    let mut results = Vec::new();
    let shape = [2, 3, 5, 4];
    let loss_seed = seed ^ 0x77ee;

    macro_rules! check {
        ($name:literal, $inputs:expr, $build:expr) => {
            results.push(check_gradients($name, &$inputs, eps, tol, $build)?);
        };
    }

    let a = probe_tensor(&shape, seed);
    let b = probe_tensor(&shape, seed + 1);
    let b_gate = probe_tensor(&[2, 3, 1, 1], seed + 2);
    let b_safe = probe_tensor_min_abs(&shape, seed + 3, 0.25);
    let a_kink = probe_tensor_min_abs(&shape, seed + 4, 0.05);

    check!("add", [a.clone(), b.clone()], |t, ids| {
        let y = ops::add(t, ids[0], ids[1])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("sub", [a.clone(), b.clone()], |t, ids| {
        let y = ops::sub(t, ids[0], ids[1])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("mul", [a.clone(), b.clone()], |t, ids| {
        let y = ops::mul(t, ids[0], ids[1])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("mul_broadcast", [a.clone(), b_gate.clone()], |t, ids| {
        let y = ops::mul(t, ids[0], ids[1])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("div", [a.clone(), b_safe.clone()], |t, ids| {
        let y = ops::div(t, ids[0], ids[1])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("scale", [a.clone()], |t, ids| {
        let y = ops::scale(t, ids[0], -1.7)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("add_scalar", [a.clone()], |t, ids| {
        let y = ops::add_scalar(t, ids[0], 0.35)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("neg", [a.clone()], |t, ids| {
        let y = ops::neg(t, ids[0])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("abs", [a_kink.clone()], |t, ids| {
        let y = ops::abs(t, ids[0])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("relu", [a_kink.clone()], |t, ids| {
        let y = ops::relu(t, ids[0])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("sigmoid", [a.clone()], |t, ids| {
        let y = ops::sigmoid(t, ids[0])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("softmax", [a.clone()], |t, ids| {
        let y = ops::softmax(t, ids[0], 1)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("concat", [a.clone(), b.clone()], |t, ids| {
        let y = ops::concat(t, &[ids[0], ids[1], ids[0]], 1)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("narrow", [a.clone()], |t, ids| {
        let y = ops::narrow(t, ids[0], 1, 1, 2)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("reshape", [a.clone()], |t, ids| {
        let y = ops::reshape(t, ids[0], [2, 3, 20])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("pad2d", [a.clone()], |t, ids| {
        let y = ops::pad2d(t, ids[0], 2)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("upsample_nearest2", [a.clone()], |t, ids| {
        let y = ops::upsample_nearest2(t, ids[0])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("global_avg_pool", [a.clone()], |t, ids| {
        let y = ops::global_avg_pool(t, ids[0])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    check!("sum_all", [a.clone()], |t, ids| ops::sum_all(t, ids[0]));
    check!("mean_all", [a.clone()], |t, ids| ops::mean_all(t, ids[0]));

    let cx = probe_tensor(&[2, 3, 6, 5], seed + 10);
    let cw = probe_tensor(&[4, 3, 3, 3], seed + 11);
    let cb = probe_tensor(&[4], seed + 12);
    check!("conv2d_s1", [cx.clone(), cw.clone(), cb.clone()], |t, ids| {
        let y = ops::conv2d(t, ids[0], ids[1], ids[2], 1, 1)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    let sx = probe_tensor(&[1, 2, 7, 7], seed + 13);
    let sw = probe_tensor(&[3, 2, 3, 3], seed + 14);
    let sb = probe_tensor(&[3], seed + 15);
    check!("conv2d_s2", [sx, sw, sb], |t, ids| {
        let y = ops::conv2d(t, ids[0], ids[1], ids[2], 2, 1)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    let dw = probe_tensor(&[3, 1, 3, 3], seed + 16);
    let db = probe_tensor(&[3], seed + 17);
    check!("depthwise_conv2d", [a.clone(), dw, db], |t, ids| {
        let y = ops::depthwise_conv2d(t, ids[0], ids[1], ids[2], 1)?;
        weighted_sum_loss(t, y, loss_seed)
    });
    let lx = probe_tensor(&[3, 4], seed + 18);
    let lw = probe_tensor(&[5, 4], seed + 19);
    let lb = probe_tensor(&[5], seed + 20);
    check!("linear", [lx, lw, lb], |t, ids| {
        let y = ops::linear(t, ids[0], ids[1], ids[2])?;
        weighted_sum_loss(t, y, loss_seed)
    });
    let gamma = probe_tensor(&[3], seed + 21);
    let beta = probe_tensor(&[3], seed + 22);
    check!("channel_norm", [a.clone(), gamma, beta], |t, ids| {
        let y = ops::channel_norm(t, ids[0], ids[1], ids[2])?;
        weighted_sum_loss(t, y, loss_seed)
    });

    Ok(results)
}
