use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max of a non-empty slice under total order (inputs are finite).
pub(crate) fn slice_max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// log(sum_i exp(x_i)) with the max shifted out so large-magnitude logits
/// cannot overflow.
pub(crate) fn lse_slice(xs: &[f64]) -> f64 {
    let m = slice_max(xs);
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

pub(crate) fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = slice_max(xs);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn log_softmax_slice(xs: &[f64]) -> Vec<f64> {
    let l = lse_slice(xs);
    xs.iter().map(|x| x - l).collect()
}

/// y = W x for a row-major [m, n] matrix and an [n] vector.
pub(crate) fn matvec_slice(w: &[f64], m: usize, n: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    let mut y = vec![0.0; m];
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        y[i] = acc;
    }
    y
}

fn check_logits(name: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 1 {
        return Err(Error::shape(format!(
            "{} expects a 1-d tensor, got shape {:?}",
            name,
            t.shape()
        )));
    }
    if t.is_empty() {
        return Err(Error::invalid(format!("{} on empty input", name)));
    }
    Ok(())
}

/// Stable softmax of a non-empty 1-d tensor. Output sums to 1 within 1e-12.
pub fn softmax_stable(logits: &Tensor) -> Result<Tensor> {
    check_logits("softmax_stable", logits)?;
    Ok(Tensor::vector(softmax_slice(logits.values())))
}

/// Stable log(sum_i exp(x_i)) of a non-empty 1-d tensor.
pub fn log_sum_exp(logits: &Tensor) -> Result<f64> {
    check_logits("log_sum_exp", logits)?;
    Ok(lse_slice(logits.values()))
}

/// Central-difference gradient estimate of `f` at `params`, the oracle the
/// tape's backward pass is tested against.
///
/// Perturbs one coordinate at a time by `h` (which must be positive), so it
/// costs two evaluations of `f` per parameter coordinate.
pub fn finite_diff_gradient<F>(f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite_diff_gradient requires h > 0");
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].values()[i];
            work[p].values_mut()[i] = orig + h;
            let up = f(&work);
            work[p].values_mut()[i] = orig - h;
            let down = f(&work);
            work[p].values_mut()[i] = orig;
            g.values_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}
