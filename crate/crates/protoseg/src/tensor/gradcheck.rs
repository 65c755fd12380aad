//! Finite-difference verification of the reverse pass.
//!
//! Checks run in f64: the analytic gradient comes from one tape backward,
//! the numeric gradient from central differences per coordinate.

use super::{Tape, TensorData, Var};
use crate::error::Result;
use crate::rng::PortableRng;

/// Relative error of one (analytic, numeric) gradient pair. The floor on
/// the denominator turns the comparison into an absolute one when both
/// gradients are smaller than the floor, where the central difference is
/// dominated by f64 roundoff of the loss rather than by the true slope.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Max relative error between the tape gradient of a scalar function and
/// central differences with the given step, over every coordinate of `x`.
pub fn grad_check(
    build: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &TensorData<f64>,
    step: f64,
) -> Result<f64> {
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let loss = build(&mut tape, v)?;
        tape.backward(loss)?;
        tape.grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |data: &TensorData<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(data.clone(), false);
        let loss = build(&mut tape, v)?;
        Ok(tape.value(loss).item())
    };
    let mut worst = 0.0f64;
    let mut perturbed = x.clone();
    for i in 0..x.numel() {
        let orig = perturbed.data()[i];
        perturbed.data_mut()[i] = orig + step;
        let plus = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig - step;
        let minus = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric, 1e-8));
    }
    Ok(worst)
}

/// Gradient check over several input tensors at once, probing a deterministic
/// random subset of coordinates per tensor. Used for whole-pipeline checks
/// where exhaustive differencing would be quadratic in parameter count.
pub fn grad_check_sampled(
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[TensorData<f64>],
    step: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs.iter())
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };
    let eval = |tensors: &[TensorData<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut rng = PortableRng::new(seed);
    let mut work: Vec<TensorData<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let picks = if n <= coords_per_tensor {
            (0..n).collect::<Vec<_>>()
        } else {
            rng.sample_distinct(n, coords_per_tensor)
        };
        for ci in picks {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            // whole-pipeline losses run thousands of f64 ops, so slopes
            // below ~1e-4 sit at the differencing noise floor
            worst = worst.max(rel_err(analytic[ti][ci], numeric, 1e-4));
        }
    }
    Ok(worst)
}
