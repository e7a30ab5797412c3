//! Dense row-major matrices, vector helpers, activations and spectral-norm
//! estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Power iterations used whenever a layer's bound is certified.
pub const CERT_POWER_ITERS: usize = 1000;
/// Seed of the power-iteration start vector used for certification.
pub const CERT_SEED: u64 = 0x5eed;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        check_len("DenseMatrix::new", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("DenseMatrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec", self.cols, x.len())?;
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Aᵀ y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec_transposed", self.rows, y.len())?;
        Ok(self.matvec_transposed_unchecked(y))
    }

    pub(crate) fn matvec_transposed_unchecked(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Self {
            rows: u.len(),
            cols: v.len(),
            data,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &DenseMatrix) -> Result<()> {
        check_len("add_scaled", self.data.len(), other.data.len())?;
        check_len("add_scaled", self.rows, other.rows)?;
        axpy(c, &other.data, &mut self.data);
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// Largest singular value by power iteration on `AᵀA`.
    ///
    /// The start vector is drawn from a ChaCha stream keyed by `seed`, so the
    /// estimate is reproducible. The Rayleigh quotient approaches `σ_max²`
    /// from below; iteration stops early once it no longer moves.
    pub fn spectral_norm_estimate(&self, power_iters: usize, seed: u64) -> Result<f64> {
        if power_iters == 0 {
            return Err(Error::InvalidInput("power_iters must be >= 1".into()));
        }
        if self.is_zero() {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..self.cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm2(&v);
        v.iter_mut().for_each(|x| *x /= n);

        let mut best = 0.0_f64;
        for _ in 0..power_iters {
            let av = self.matvec_unchecked(&v);
            let sigma = norm2(&av);
            let y = self.matvec_transposed_unchecked(&av);
            let ny = norm2(&y);
            let prev = best;
            best = best.max(sigma);
            if ny == 0.0 {
                break;
            }
            v.iter_mut().zip(&y).for_each(|(vi, yi)| *vi = yi / ny);
            if best > 0.0 && (best - prev) <= best * 1e-16 {
                break;
            }
        }
        Ok(best)
    }
}

/// Scalar nonlinearity applied elementwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn scalar(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative at the pre-activation `v`. ReLU uses 0 at the kink.
    pub fn scalar_derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// `sup |φ′|` over the real line.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn apply(self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.scalar(x)).collect()
    }

    pub fn derivative(self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.scalar_derivative(x)).collect()
    }
}

pub fn apply_activation(a: Activation, v: &[f64]) -> Vec<f64> {
    a.apply(v)
}

pub fn activation_derivative(a: Activation, v: &[f64]) -> Vec<f64> {
    a.derivative(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += c * x`.
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += c * xi);
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn random_vector<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}
