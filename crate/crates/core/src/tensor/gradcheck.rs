//! Finite-difference verification of analytic gradients.
//!
//! The harness runs entirely in f64: central differences at a given eps,
//! compared coordinate-wise against the reverse-mode gradient with the
//! relative error `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.

use crate::scalar::Scalar;
use crate::{Error, Result};

use super::Tensor;

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences with step `eps`.
///
/// `f` must build a scalar from its (param) input; anything else is a
/// usage error.  `eps` is restricted to `[1e-6, 1e-3]` where the f64
/// truncation/roundoff trade-off is sane.
pub fn grad_check<F>(f: F, dims: &[usize], x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    grad_check_multi(|inputs| f(&inputs[0]), &[(dims.to_vec(), x.to_vec())], eps)
}

/// [`grad_check`] over several independent inputs at once; returns the max
/// relative error across all coordinates of all inputs.
pub fn grad_check_multi<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("grad_check eps {} outside [1e-6, 1e-3]", eps)));
    }
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(dims, data)| Tensor::param(dims, data.clone()))
        .collect();
    let out = f(&params);
    if out.len() != 1 {
        return Err(Error::Usage(format!(
            "grad_check objective must be scalar, got shape {:?}",
            out.dims()
        )));
    }
    let grads = out.backward();

    let eval = |probe: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let tensors: Vec<Tensor<f64>> = probe
            .iter()
            .map(|(dims, data)| Tensor::from_vec(dims, data.clone()))
            .collect();
        let y = f(&tensors);
        if y.len() != 1 {
            return Err(Error::Usage("objective became non-scalar during probing".into()));
        }
        Ok(y.scalar_value().to_f64())
    };

    let mut max_rel = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads
            .wrt(param)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; param.len()]);
        for ci in 0..param.len() {
            let mut probe: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
            probe[pi].1[ci] += eps;
            let fp = eval(&probe)?;
            probe[pi].1[ci] -= 2.0 * eps;
            let fm = eval(&probe)?;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[ci];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Negative control for the harness: takes the true reverse-mode gradient
/// of a small objective, corrupts one coordinate, and measures it against
/// central differences.  A healthy comparison must report a large error.
pub fn corrupted_control(eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("grad_check eps {} outside [1e-6, 1e-3]", eps)));
    }
    let x = [0.5f64, -1.2, 2.0];
    let f = |v: &[f64]| -> f64 { v.iter().map(|&a| a * a).sum() };
    let param = Tensor::param(&[3], x.to_vec());
    let analytic_t = param.mul(&param).sum_all().backward();
    let mut analytic = analytic_t.wrt(&param).unwrap().to_vec();
    analytic[0] += 0.5; // the corruption under test
    let mut max_rel = 0.0f64;
    for i in 0..3 {
        let mut plus = x;
        plus[i] += eps;
        let mut minus = x;
        minus[i] -= eps;
        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
