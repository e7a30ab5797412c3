//! Parametric layers: the tied-parameter fixed-point layer `f(z, x)` and the
//! plain dense layer used by the encoder, head and agent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{Activation, DenseMatrix, CERT_POWER_ITERS, CERT_SEED};

pub const DEFAULT_CONTRACTION_TARGET: f64 = 0.9;

/// Relative slack below which `enforce_contraction` leaves a layer alone.
/// Keeps the projection idempotent bit-for-bit.
const RESCALE_SLACK: f64 = 1e-12;

/// `f(z, x) = φ(W_z z + W_x x + b)` with `W_z` square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpiLayer {
    pub w_z: DenseMatrix,
    pub w_x: DenseMatrix,
    pub b: Vec<f64>,
    pub act: Activation,
    pub contraction_target: f64,
}

/// Gradients with respect to the three parameter blocks of a [`FpiLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpiParamGrads {
    pub w_z: DenseMatrix,
    pub w_x: DenseMatrix,
    pub b: Vec<f64>,
}

impl FpiParamGrads {
    pub fn zeros_like(layer: &FpiLayer) -> Self {
        Self {
            w_z: DenseMatrix::zeros(layer.w_z.rows(), layer.w_z.cols()),
            w_x: DenseMatrix::zeros(layer.w_x.rows(), layer.w_x.cols()),
            b: vec![0.0; layer.b.len()],
        }
    }

    pub fn add_assign(&mut self, other: &FpiParamGrads) {
        crate::linalg::axpy(1.0, other.w_z.data(), self.w_z.data_mut());
        crate::linalg::axpy(1.0, other.w_x.data(), self.w_x.data_mut());
        crate::linalg::axpy(1.0, &other.b, &mut self.b);
    }

    pub fn is_zero(&self) -> bool {
        self.w_z.is_zero() && self.w_x.is_zero() && self.b.iter().all(|v| *v == 0.0)
    }

    /// All entries in a fixed order: `w_z`, `w_x`, `b`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w_z.data().len() + self.w_x.data().len() + self.b.len());
        out.extend_from_slice(self.w_z.data());
        out.extend_from_slice(self.w_x.data());
        out.extend_from_slice(&self.b);
        out
    }
}

/// Output of [`FpiLayer::vjp`].
#[derive(Debug, Clone, PartialEq)]
pub struct FpiVjp {
    pub u_z: Vec<f64>,
    pub u_x: Vec<f64>,
    pub params: FpiParamGrads,
}

impl FpiLayer {
    pub fn new(
        w_z: DenseMatrix,
        w_x: DenseMatrix,
        b: Vec<f64>,
        act: Activation,
        contraction_target: f64,
    ) -> Result<Self> {
        if !w_z.is_square() {
            return Err(Error::InvalidInput(format!(
                "state map must be square (endomorphic), got {}x{}",
                w_z.rows(),
                w_z.cols()
            )));
        }
        check_len("FpiLayer::new (w_x rows)", w_z.rows(), w_x.rows())?;
        check_len("FpiLayer::new (bias)", w_z.rows(), b.len())?;
        if !(contraction_target > 0.0 && contraction_target < 1.0) {
            return Err(Error::InvalidInput(format!(
                "contraction_target must lie in (0, 1), got {contraction_target}"
            )));
        }
        Ok(Self {
            w_z,
            w_x,
            b,
            act,
            contraction_target,
        })
    }

    /// Random layer with entries in `[-scale, scale]`, then certified.
    pub fn random<R: Rng + ?Sized>(
        state_dim: usize,
        input_dim: usize,
        scale: f64,
        act: Activation,
        contraction_target: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w_z = DenseMatrix::random_uniform(state_dim, state_dim, scale, rng);
        let w_x = DenseMatrix::random_uniform(state_dim, input_dim, scale, rng);
        let b = crate::linalg::random_vector(state_dim, scale, rng);
        Self::new(w_z, w_x, b, act, contraction_target)?.enforce_contraction()
    }

    pub fn state_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }

    fn check_shapes(&self, z: &[f64], x: &[f64]) -> Result<()> {
        check_len("fpi_layer (state)", self.state_dim(), z.len())?;
        check_len("fpi_layer (input)", self.input_dim(), x.len())
    }

    pub fn pre_activation(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(z, x)?;
        Ok(self.pre_activation_unchecked(z, x))
    }

    fn pre_activation_unchecked(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let mut p = self.w_z.matvec_unchecked(z);
        let px = self.w_x.matvec_unchecked(x);
        p.iter_mut()
            .zip(px.iter().zip(&self.b))
            .for_each(|(pi, (xi, bi))| *pi += xi + bi);
        p
    }

    /// One application of the layer.
    pub fn forward(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(z, x)?;
        Ok(self.forward_unchecked(z, x))
    }

    pub(crate) fn forward_unchecked(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let mut p = self.pre_activation_unchecked(z, x);
        p.iter_mut().for_each(|v| *v = self.act.scalar(*v));
        p
    }

    /// `σ̂(W_z)·sup|φ′|`, an upper bound on the Lipschitz constant of
    /// `z ↦ f(z, x)` for every fixed `x`.
    pub fn lipschitz_bound(&self) -> f64 {
        let sigma = self
            .w_z
            .spectral_norm_estimate(CERT_POWER_ITERS, CERT_SEED)
            .expect("power iteration count is positive");
        sigma * self.act.lipschitz()
    }

    pub fn is_certified(&self) -> bool {
        self.lipschitz_bound() <= self.contraction_target * (1.0 + RESCALE_SLACK)
    }

    /// Projects `W_z` back inside the contraction ball by spectral rescaling.
    pub fn enforce_contraction(mut self) -> Result<Self> {
        if !(self.contraction_target > 0.0 && self.contraction_target < 1.0) {
            return Err(Error::InvalidInput(format!(
                "contraction_target must lie in (0, 1), got {}",
                self.contraction_target
            )));
        }
        let bound = self.lipschitz_bound();
        if bound > self.contraction_target * (1.0 + RESCALE_SLACK) {
            self.w_z = self.w_z.scaled(self.contraction_target / bound);
        }
        Ok(self)
    }

    /// Vector-Jacobian products of `f` at `(z, x)` against cotangent `u`.
    pub fn vjp(&self, z: &[f64], x: &[f64], u: &[f64]) -> Result<FpiVjp> {
        self.check_shapes(z, x)?;
        check_len("fpi_layer_vjp (cotangent)", self.state_dim(), u.len())?;
        let s = self.scaled_cotangent(z, x, u);
        Ok(FpiVjp {
            u_z: self.w_z.matvec_transposed_unchecked(&s),
            u_x: self.w_x.matvec_transposed_unchecked(&s),
            params: FpiParamGrads {
                w_z: DenseMatrix::outer(&s, z),
                w_x: DenseMatrix::outer(&s, x),
                b: s,
            },
        })
    }

    /// `s = u ⊙ φ′(p)` at the pre-activation of `(z, x)`.
    pub(crate) fn scaled_cotangent(&self, z: &[f64], x: &[f64], u: &[f64]) -> Vec<f64> {
        let p = self.pre_activation_unchecked(z, x);
        p.iter()
            .zip(u)
            .map(|(pi, ui)| ui * self.act.scalar_derivative(*pi))
            .collect()
    }

    /// `u J_z` only, reusing a precomputed `φ′(p)`.
    pub(crate) fn vjp_state_with(&self, dphi: &[f64], u: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = u.iter().zip(dphi).map(|(a, b)| a * b).collect();
        self.w_z.matvec_transposed_unchecked(&s)
    }

    /// Parameter blocks in `w_z`, `w_x`, `b` order. Mutation does not re-certify.
    pub(crate) fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [self.w_z.data_mut(), self.w_x.data_mut(), &mut self.b]
    }

    pub(crate) fn params(&self) -> [&[f64]; 3] {
        [self.w_z.data(), self.w_x.data(), &self.b]
    }
}

pub fn fpi_layer_forward(layer: &FpiLayer, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(z, x)
}

pub fn enforce_contraction(layer: FpiLayer) -> Result<FpiLayer> {
    layer.enforce_contraction()
}

pub fn lipschitz_bound(layer: &FpiLayer) -> f64 {
    layer.lipschitz_bound()
}

pub fn fpi_layer_vjp(layer: &FpiLayer, z: &[f64], x: &[f64], u: &[f64]) -> Result<FpiVjp> {
    layer.vjp(z, x, u)
}

/// `y = φ(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrads {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl DenseGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            w: DenseMatrix::zeros(layer.w.rows(), layer.w.cols()),
            b: vec![0.0; layer.b.len()],
        }
    }

    pub fn add_assign(&mut self, other: &DenseGrads) {
        crate::linalg::axpy(1.0, other.w.data(), self.w.data_mut());
        crate::linalg::axpy(1.0, &other.b, &mut self.b);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.w.data().to_vec();
        out.extend_from_slice(&self.b);
        out
    }
}

impl DenseLayer {
    pub fn new(w: DenseMatrix, b: Vec<f64>, act: Activation) -> Result<Self> {
        check_len("DenseLayer::new (bias)", w.rows(), b.len())?;
        Ok(Self { w, b, act })
    }

    pub fn zeros(input: usize, output: usize, act: Activation) -> Self {
        Self {
            w: DenseMatrix::zeros(output, input),
            b: vec![0.0; output],
            act,
        }
    }

    /// Uniform Glorot-style initialisation, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, act: Activation, rng: &mut R) -> Self {
        let scale = (6.0 / (input + output) as f64).sqrt();
        Self {
            w: DenseMatrix::random_uniform(output, input, scale, rng),
            b: vec![0.0; output],
            act,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.w.matvec(x)?;
        crate::linalg::axpy(1.0, &self.b, &mut p);
        Ok(p)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.act.apply(&self.pre_activation(x)?))
    }

    /// Returns `(∂/∂x, parameter grads)` for cotangent `u` on the output.
    pub fn vjp(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, DenseGrads)> {
        check_len("DenseLayer::vjp (cotangent)", self.output_dim(), u.len())?;
        let p = self.pre_activation(x)?;
        let s: Vec<f64> = p
            .iter()
            .zip(u)
            .map(|(pi, ui)| ui * self.act.scalar_derivative(*pi))
            .collect();
        let dx = self.w.matvec_transposed_unchecked(&s);
        Ok((
            dx,
            DenseGrads {
                w: DenseMatrix::outer(&s, x),
                b: s,
            },
        ))
    }

    pub(crate) fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.data_mut(), &mut self.b]
    }

    pub(crate) fn params(&self) -> [&[f64]; 2] {
        [self.w.data(), &self.b]
    }
}
