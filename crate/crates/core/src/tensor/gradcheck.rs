//! Central finite-difference gradient verification.
//!
//! The closure receives a fresh tape and one leaf per parameter and must
//! return the scalar loss node. It has to be deterministic (no dropout).

use super::{NodeId, Result, Tape, Tensor, TensorError};

/// Forward + backward once, returning the loss value and the analytic
/// gradient of each parameter.
pub fn analytic_gradients<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p = p.requires_grad(true);
            tape.leaf(&p)
        })
        .collect();
    let loss = f(&mut tape, &ids)?;
    let value = tape.value(loss)[0];
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient populated").to_vec())
        .collect();
    Ok((value, grads))
}

fn forward_value<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &ids)?;
    let v = tape.value(loss)[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check forward" });
    }
    Ok(v)
}

/// Central differences, coordinate by coordinate.
pub fn numeric_gradients<F>(params: &[Tensor], eps: f64, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Contract(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = forward_value(&work, &f)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = forward_value(&work, &f)?;
            work[pi].data_mut()[k] = orig;
            grads[pi][k] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Max over all coordinates of `|a - n| / max(1, |a|, |n|)`.
pub fn max_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.iter().zip(n) {
            let denom = 1.0f64.max(x.abs()).max(y.abs());
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Convenience wrapper: max relative error between analytic and
/// central-difference gradients.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (_, analytic) = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, eps, &f)?;
    Ok(max_rel_error(&analytic, &numeric))
}
