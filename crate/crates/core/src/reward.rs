//! Compute-cost accounting, the episode reward and the total loss.

use serde::{Deserialize, Serialize};

use crate::agent::Action;
use crate::error::{Error, Result};

/// Coefficients of the reward and total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub alpha: f64,
    #[serde(rename = "beta")]
    pub beta_cost: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta_cost: 0.3,
            gamma: 0.2,
            lambda: 0.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta_cost, self.gamma, self.lambda];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "reward coefficients must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Deterministic per-iteration cost weight of each FPI layer. `Nop` is free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub layer_weights: Vec<f64>,
}

impl CostLedger {
    pub fn new(layer_weights: Vec<f64>) -> Result<Self> {
        if layer_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput("cost weights must be finite and > 0".into()));
        }
        Ok(Self { layer_weights })
    }

    /// `unit · d_i² / d_ref²` per iteration for layers of widths `dims`.
    pub fn scaled_by_width(dims: &[usize], d_ref: usize, unit: f64) -> Result<Self> {
        let d_ref = d_ref.max(1) as f64;
        Self::new(
            dims.iter()
                .map(|&d| unit * (d as f64 * d as f64) / (d_ref * d_ref))
                .collect(),
        )
    }

    pub fn weight(&self, layer: usize) -> f64 {
        self.layer_weights[layer]
    }

    pub fn action_weight(&self, action: Action) -> f64 {
        match action {
            Action::Nop => 0.0,
            Action::Fpi(i) => self.layer_weights[i],
        }
    }
}

/// One agent decision inside an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub action: Action,
    pub iterations: usize,
    pub cost_units: f64,
    pub log_prob: f64,
    /// Agent input at this decision; empty for scripted policies.
    #[serde(skip)]
    pub features: Vec<f64>,
}

/// Per-sample record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub sample_id: usize,
    pub steps: Vec<TraceStep>,
    pub consecutive_layer_count: usize,
    pub correct: bool,
    pub cost: f64,
    pub reward: f64,
    pub ce: f64,
    /// Scalar the agent maximises for this episode.
    pub signal: f64,
}

impl EpisodeTrace {
    pub fn fpi_actions(&self) -> usize {
        self.steps.iter().filter(|s| s.action != Action::Nop).count()
    }
}

/// `Σ iterations × weight` over the FPI steps of a trace.
pub fn compute_cost(trace: &EpisodeTrace, ledger: &CostLedger) -> f64 {
    trace
        .steps
        .iter()
        .map(|s| s.iterations as f64 * ledger.action_weight(s.action))
        .sum()
}

/// `α·1[correct] − (β + λ)·cost·consecutive`.
pub fn compute_reward(correct: bool, cost: f64, consecutive: usize, p: &RewardParams) -> f64 {
    let acc = if correct { 1.0 } else { 0.0 };
    p.alpha * acc - (p.beta_cost + p.lambda) * cost * consecutive as f64
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log softmax(logits)[label]` with a max shift.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

/// `∂ CE / ∂ logits = softmax − onehot`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

/// `ce − γ·reward`.
pub fn total_loss(ce: f64, reward: f64, p: &RewardParams) -> f64 {
    ce - p.gamma * reward
}
