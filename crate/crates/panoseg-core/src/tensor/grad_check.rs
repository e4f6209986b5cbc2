//! Central finite-difference audit of the tape's backward rules.
//!
//! The numeric side never touches `backward`: it re-runs the forward build
//! with perturbed leaf values and differences the scalar losses. That keeps
//! it an independent oracle for the analytic gradients.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Tape, TensorError, TensorId};

/// Maximum relative gradient error over sampled coordinates.
///
/// `build` must deterministically construct a scalar loss from the given
/// leaves. `params` supplies `(shape, data)` for each leaf, `step` is the
/// central-difference half-width, and at most `coords_per_param` coordinates
/// are probed per parameter (`0` probes all of them). The error metric is
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_diff_check<F>(
    build: &F,
    params: &[(Vec<usize>, Vec<f64>)],
    step: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let analytic = analytic_grads(build, params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    for (pi, (_, data)) in params.iter().enumerate() {
        let coords: Vec<usize> = if coords_per_param == 0 || coords_per_param >= data.len() {
            (0..data.len()).collect()
        } else {
            let mut all: Vec<usize> = (0..data.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(coords_per_param);
            all
        };
        for coord in coords {
            let plus = eval_loss(build, params, pi, coord, step)?;
            let minus = eval_loss(build, params, pi, coord, -step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic[pi][coord] - numeric).abs() / (numeric.abs() + 1e-8);
            max_rel_err = max_rel_err.max(rel);
        }
    }
    Ok(max_rel_err)
}

fn analytic_grads<F>(
    build: &F,
    params: &[(Vec<usize>, Vec<f64>)],
) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(params.len());
    for (shape, data) in params {
        leaves.push(tape.leaf(data.clone(), shape.clone(), true)?);
    }
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    Ok(leaves
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| {
            vec![0.0; tape.data(id).len()]
        }))
        .collect())
}

fn eval_loss<F>(
    build: &F,
    params: &[(Vec<usize>, Vec<f64>)],
    param_idx: usize,
    coord: usize,
    delta: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(params.len());
    for (pi, (shape, data)) in params.iter().enumerate() {
        let mut values = data.clone();
        if pi == param_idx {
            values[coord] += delta;
        }
        leaves.push(tape.leaf(values, shape.clone(), false)?);
    }
    let loss = build(&mut tape, &leaves)?;
    Ok(tape.value(loss))
}
