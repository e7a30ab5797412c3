//! Synthetic datasets with known per-sample difficulty.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub difficulty: Option<Vec<Difficulty>>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        difficulty: Option<Vec<Difficulty>>,
        n_classes: usize,
    ) -> Result<Self> {
        if features.len() != labels.len() || difficulty.as_ref().is_some_and(|d| d.len() != labels.len()) {
            return Err(Error::InvalidInput("dataset columns have different lengths".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidInput(format!("label {l} >= n_classes {n_classes}")));
        }
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("features must be finite and of equal width".into()));
        }
        Ok(Self {
            features,
            labels,
            difficulty,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            difficulty: self.difficulty.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
            n_classes: self.n_classes,
        }
    }

    /// Seeded shuffle, then the first `test_fraction` of samples become the test split.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidInput(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5117));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        Ok((self.subset(&idx[n_test..]), self.subset(&idx[..n_test])))
    }

    /// CSV with header `f0,..,f{m-1},label[,difficulty]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        if self.difficulty.is_some() {
            header.push("difficulty".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features[i].iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            if let Some(d) = &self.difficulty {
                rec.push(d[i].as_str().into());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        let label_col = header
            .iter()
            .position(|h| h == "label")
            .ok_or_else(|| Error::Format(format!("{}: missing 'label' column", path.display())))?;
        let has_difficulty = header.iter().any(|h| h == "difficulty");
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut difficulty = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Format(format!("{}: line {}: bad {what}", path.display(), line + 2));
            let f: Vec<f64> = (0..label_col)
                .map(|i| rec[i].trim().parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<_>>()?;
            features.push(f);
            labels.push(rec[label_col].trim().parse::<usize>().map_err(|_| bad("label"))?);
            if has_difficulty {
                difficulty.push(match rec[label_col + 1].trim() {
                    "easy" => Difficulty::Easy,
                    "hard" => Difficulty::Hard,
                    _ => return Err(bad("difficulty")),
                });
            }
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Dataset::new(features, labels, has_difficulty.then_some(difficulty), n_classes)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Two interleaved half circles of radius 1: the upper arc centred at the
/// origin is class 0, the lower arc centred at `(1, 0.5)` is class 1.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("two-moons needs a positive even n, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidInput(format!("noise must be >= 0, got {noise}")));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let denom = (half.max(2) - 1) as f64;
    for class in 0..2 {
        for i in 0..half {
            let t = std::f64::consts::PI * i as f64 / denom;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let (dx, dy) = if noise > 0.0 {
                (normal.sample(&mut rng), normal.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            features.push(vec![x + dx, y + dy]);
            labels.push(class);
        }
    }
    Dataset::new(features, labels, None, 2)
}

/// Width of the label stripes along the boundary inside the hard band.
pub const HARD_STRIPE_WIDTH: f64 = 0.5;
/// Extent of the along-boundary coordinate.
pub const MIXTURE_SPAN: f64 = 2.0;

/// Two bands around the boundary `x₀ = 0`.
///
/// Easy samples sit at `|x₀| ≥ margin_easy` and are labelled by the side of
/// the boundary. Hard samples sit at `|x₀| ≤ margin_hard` and carry a label
/// that alternates in stripes along `x₁`; they come in mirrored pairs
/// `(±x₀, x₁)` with one label, so the boundary itself gets exactly half of
/// them right.
pub fn gen_hard_easy_mixture(n: usize, margin_easy: f64, margin_hard: f64, seed: u64) -> Result<Dataset> {
    if !(margin_easy > margin_hard && margin_hard > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need margin_easy > margin_hard > 0, got {margin_easy} and {margin_hard}"
        )));
    }
    if n < 4 || !n.is_multiple_of(4) {
        return Err(Error::InvalidInput(format!("hard/easy mixture needs n divisible by 4, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    for i in 0..n / 2 {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let x0 = side * (margin_easy + rng.gen_range(0.0..1.0));
        let x1 = rng.gen_range(-MIXTURE_SPAN..MIXTURE_SPAN);
        features.push(vec![x0, x1]);
        labels.push(usize::from(side > 0.0));
        tags.push(Difficulty::Easy);
    }
    for _ in 0..n / 4 {
        let x0 = rng.gen_range(0.0..=margin_hard);
        let x1 = rng.gen_range(-MIXTURE_SPAN..MIXTURE_SPAN);
        let label = stripe_label(x1);
        for s in [1.0, -1.0] {
            features.push(vec![s * x0, x1]);
            labels.push(label);
            tags.push(Difficulty::Hard);
        }
    }
    Dataset::new(features, labels, Some(tags), 2)
}

pub fn stripe_label(x1: f64) -> usize {
    (((x1 + MIXTURE_SPAN) / HARD_STRIPE_WIDTH).floor() as i64).rem_euclid(2) as usize
}
