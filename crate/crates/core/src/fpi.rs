//! Fixed-point forward solve and implicit backward solve.
//!
//! The forward pass iterates `z ← f(z, x)` until the relative residual
//! `‖f(z) − z‖ / ‖f(z)‖` drops below `forward_tol`. The backward pass never
//! forms a Jacobian: it solves `u = g + u J_z` by the Neumann recursion using
//! vector-Jacobian products, then pulls `u` back through one application of
//! the layer at the fixed point.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::layers::{FpiLayer, FpiParamGrads};
use crate::linalg::{distance, norm2};

/// Consecutive growth steps of the backward increment treated as divergence.
const DIVERGENCE_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Z0Policy {
    #[default]
    Zeros,
    /// Start from the injected input; requires input and state widths to agree.
    CopyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpiConfig {
    pub max_iter: usize,
    pub forward_tol: f64,
    pub backward_tol: f64,
    pub z0_policy: Z0Policy,
}

impl Default for FpiConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            forward_tol: 1e-2,
            backward_tol: 1e-5,
            z0_policy: Z0Policy::Zeros,
        }
    }
}

impl FpiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("fpi.max_iter must be >= 1".into()));
        }
        if !(self.forward_tol > 0.0 && self.backward_tol > 0.0) {
            return Err(Error::Config("fpi tolerances must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_tolerances(mut self, forward_tol: f64, backward_tol: f64) -> Self {
        self.forward_tol = forward_tol;
        self.backward_tol = backward_tol;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub z_star: Vec<f64>,
    pub iterations: usize,
    /// Relative residual `‖f(z) − z‖ / ‖f(z)‖`, one per iteration.
    pub residuals: Vec<f64>,
    /// Absolute step `‖f(z) − z‖`, one per iteration.
    pub step_norms: Vec<f64>,
    pub converged: bool,
    pub cost_units: f64,
}

/// Result of an implicit or unrolled backward pass through one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub u: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_params: FpiParamGrads,
    pub iterations: usize,
}

fn relative(step: f64, reference: f64) -> f64 {
    if step == 0.0 {
        0.0
    } else if reference == 0.0 {
        f64::INFINITY
    } else {
        step / reference
    }
}

/// Solves for the fixed point with unit cost per iteration.
pub fn fpi_forward(layer: &FpiLayer, x: &[f64], cfg: &FpiConfig) -> Result<FixedPointResult> {
    fpi_forward_weighted(layer, x, cfg, 1.0)
}

/// As [`fpi_forward`], charging `cost_weight` units per layer application.
pub fn fpi_forward_weighted(
    layer: &FpiLayer,
    x: &[f64],
    cfg: &FpiConfig,
    cost_weight: f64,
) -> Result<FixedPointResult> {
    let bound = layer.lipschitz_bound();
    if bound >= 1.0 {
        return Err(Error::NotCertified { bound });
    }
    solve(layer, x, cfg, cost_weight)
}

/// Forward solve for a layer the caller has already certified.
pub(crate) fn solve(layer: &FpiLayer, x: &[f64], cfg: &FpiConfig, cost_weight: f64) -> Result<FixedPointResult> {
    cfg.validate()?;
    check_len("fpi_forward (input)", layer.input_dim(), x.len())?;
    let mut z = match cfg.z0_policy {
        Z0Policy::Zeros => vec![0.0; layer.state_dim()],
        Z0Policy::CopyInput => {
            check_len("fpi_forward (copy-input start)", layer.state_dim(), x.len())?;
            x.to_vec()
        }
    };

    let mut residuals = Vec::new();
    let mut step_norms = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let f0 = layer.forward_unchecked(&z, x);
        let step = distance(&f0, &z);
        let rel = relative(step, norm2(&f0));
        if step.is_nan() || f0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite state after {} fixed-point iterations",
                residuals.len() + 1
            )));
        }
        residuals.push(rel);
        step_norms.push(step);
        z = f0;
        if rel < cfg.forward_tol {
            converged = true;
            break;
        }
    }
    let iterations = residuals.len();
    Ok(FixedPointResult {
        z_star: z,
        iterations,
        residuals,
        step_norms,
        converged,
        cost_units: iterations as f64 * cost_weight,
    })
}

/// Implicit gradient through the fixed point `z* = f(z*, x)`.
///
/// `z_star` should satisfy the forward tolerance; the result is only as
/// accurate as the fixed point it is evaluated at.
pub fn fpi_backward(
    layer: &FpiLayer,
    z_star: &[f64],
    x: &[f64],
    grad_out: &[f64],
    cfg: &FpiConfig,
) -> Result<GradientBundle> {
    cfg.validate()?;
    check_len("fpi_backward (state)", layer.state_dim(), z_star.len())?;
    check_len("fpi_backward (input)", layer.input_dim(), x.len())?;
    check_len("fpi_backward (grad_out)", layer.state_dim(), grad_out.len())?;

    let p = layer.pre_activation(z_star, x)?;
    let dphi = layer.act.derivative(&p);

    let mut u = grad_out.to_vec();
    let mut prev_increment = f64::INFINITY;
    let mut growth = 0usize;
    let mut iterations = 0usize;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let mut next = layer.vjp_state_with(&dphi, &u);
        crate::linalg::axpy(1.0, grad_out, &mut next);
        let increment = distance(&next, &u);
        if !increment.is_finite() {
            return Err(Error::Numeric(format!(
                "implicit backward produced a non-finite cotangent (certified bound {:.6})",
                layer.lipschitz_bound()
            )));
        }
        growth = if increment > prev_increment { growth + 1 } else { 0 };
        if growth >= DIVERGENCE_WINDOW {
            return Err(Error::Numeric(format!(
                "implicit backward diverged: increment grew {DIVERGENCE_WINDOW} times in a row \
                 (certified bound {:.6})",
                layer.lipschitz_bound()
            )));
        }
        prev_increment = increment;
        let rel = relative(increment, norm2(&next));
        u = next;
        if rel < cfg.backward_tol {
            break;
        }
    }

    let s: Vec<f64> = u.iter().zip(&dphi).map(|(a, b)| a * b).collect();
    let grad_x = layer.w_x.matvec_transposed_unchecked(&s);
    let grad_params = FpiParamGrads {
        w_z: crate::linalg::DenseMatrix::outer(&s, z_star),
        w_x: crate::linalg::DenseMatrix::outer(&s, x),
        b: s,
    };
    Ok(GradientBundle {
        u,
        grad_x,
        grad_params,
        iterations,
    })
}
