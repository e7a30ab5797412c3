//! Verification oracles. None of these are on a training path; they exist so
//! the fast routes can be checked against slow, independent ones.

use crate::error::{check_len, Error, Result};
use crate::fpi::GradientBundle;
use crate::layers::{FpiLayer, FpiParamGrads};
use crate::linalg::DenseMatrix;

/// All singular values, descending, by one-sided Jacobi rotations.
pub fn jacobi_singular_values(a: &DenseMatrix) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    // Columns of `u` are orthogonalised in place.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (xp, xq) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (vp, vq) = (*xp, *xq);
                    *xp = c * vp - s * vq;
                    *xq = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Backpropagates through `k_steps` explicit iterations from `z0`, summing
/// the tied parameter gradients of every step. `u` is the cotangent that
/// reaches `z0`.
pub fn unrolled_backward_oracle(
    layer: &FpiLayer,
    x: &[f64],
    z0: &[f64],
    k_steps: usize,
    grad_out: &[f64],
) -> Result<GradientBundle> {
    if k_steps == 0 {
        return Err(Error::InvalidInput("k_steps must be >= 1".into()));
    }
    check_len("unrolled_backward_oracle (z0)", layer.state_dim(), z0.len())?;
    check_len("unrolled_backward_oracle (grad_out)", layer.state_dim(), grad_out.len())?;

    let mut states = Vec::with_capacity(k_steps + 1);
    states.push(z0.to_vec());
    for k in 0..k_steps {
        let next = layer.forward(&states[k], x)?;
        states.push(next);
    }

    let mut u = grad_out.to_vec();
    let mut grad_x = vec![0.0; layer.input_dim()];
    let mut grads = FpiParamGrads::zeros_like(layer);
    for k in (0..k_steps).rev() {
        let step = layer.vjp(&states[k], x, &u)?;
        grads.add_assign(&step.params);
        grad_x.iter_mut().zip(&step.u_x).for_each(|(a, b)| *a += b);
        u = step.u_z;
    }
    Ok(GradientBundle {
        u,
        grad_x,
        grad_params: grads,
        iterations: k_steps,
    })
}

/// Central differences `(L(θ + h eᵢ) − L(θ − h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad_oracle<F>(loss_fn: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = loss_fn(&theta);
        theta[i] = orig - step;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}
