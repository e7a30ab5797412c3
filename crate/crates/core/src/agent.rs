//! The introspective layer-selection policy.
//!
//! The agent sees pooled statistics of the main model's current activations,
//! the current cost penalty and the episode progress, and outputs a
//! distribution over `{Nop, Fpi(0), .., Fpi(n-1)}`. It is trained by a
//! score-function estimator on episode returns and never receives gradient
//! from, nor sends gradient to, the main model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::layers::{DenseGrads, DenseLayer};
use crate::linalg::Activation;
use crate::reward::{softmax, EpisodeTrace};

/// The agent's decision alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Emit the prediction now.
    Nop,
    /// Solve the fixed point of the given FPI layer.
    Fpi(usize),
}

impl Action {
    /// Position in the agent's output vector.
    pub fn index(self) -> usize {
        match self {
            Action::Nop => 0,
            Action::Fpi(i) => i + 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Nop
        } else {
            Action::Fpi(i - 1)
        }
    }

    pub fn label(self) -> String {
        match self {
            Action::Nop => "nop".into(),
            Action::Fpi(i) => format!("fpi{i}"),
        }
    }
}

/// Per observed activation: mean, std, max; then λ and the step ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFeatures(pub Vec<f64>);

impl AgentFeatures {
    pub fn len_for(n_observed: usize) -> usize {
        3 * n_observed + 2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn build_agent_features(
    activations: &[&[f64]],
    lambda: f64,
    step_index: usize,
    max_steps: usize,
) -> Result<AgentFeatures> {
    if activations.is_empty() {
        return Err(Error::InvalidInput("agent features need at least one activation".into()));
    }
    if max_steps == 0 {
        return Err(Error::InvalidInput("max_steps must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(AgentFeatures::len_for(activations.len()));
    for a in activations {
        if a.is_empty() {
            return Err(Error::InvalidInput("empty activation vector".into()));
        }
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend([mean, var.sqrt(), max]);
    }
    out.push(lambda);
    out.push(step_index as f64 / max_steps as f64);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite agent feature".into()));
    }
    Ok(AgentFeatures(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// ε-greedy exploration over a sample from the policy.
    TrainSample,
    /// Argmax, lowest index on ties.
    EvalGreedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNet {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
    pub epsilon: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub hidden: DenseGrads,
    pub output: DenseGrads,
}

impl AgentGrads {
    pub fn zeros_like(agent: &AgentNet) -> Self {
        Self {
            hidden: DenseGrads::zeros_like(&agent.hidden),
            output: DenseGrads::zeros_like(&agent.output),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.hidden.flatten();
        v.extend(self.output.flatten());
        v
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.hidden.w.data(), &self.hidden.b, self.output.w.data(), &self.output.b]
    }
}

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(
        n_observed: usize,
        n_fpi_layers: usize,
        hidden_dim: usize,
        epsilon: f64,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidInput(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidInput(format!("temperature must be > 0, got {temperature}")));
        }
        let input = AgentFeatures::len_for(n_observed);
        let hidden = DenseLayer::glorot(input, hidden_dim, Activation::Tanh, rng);
        let mut output = DenseLayer::glorot(hidden_dim, n_fpi_layers + 1, Activation::Identity, rng);
        // Start close to uniform so early exploration is unbiased.
        output.w = output.w.scaled(0.1);
        Ok(Self {
            hidden,
            output,
            epsilon,
            temperature,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.output.output_dim()
    }

    pub fn logits(&self, features: &AgentFeatures) -> Result<Vec<f64>> {
        check_len("agent_forward (features)", self.input_dim(), features.0.len())?;
        let h = self.hidden.forward(&features.0)?;
        let logits = self.output.forward(&h)?;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("agent produced non-finite logits".into()));
        }
        Ok(logits)
    }

    pub fn forward(&self, features: &AgentFeatures) -> Result<Vec<f64>> {
        let logits = self.logits(features)?;
        let scaled: Vec<f64> = logits.iter().map(|l| l / self.temperature).collect();
        Ok(softmax(&scaled))
    }

    pub(crate) fn params_mut(&mut self) -> [&mut [f64]; 4] {
        let [hw, hb] = self.hidden.params_mut();
        let [ow, ob] = self.output.params_mut();
        [hw, hb, ow, ob]
    }

    pub fn params(&self) -> [&[f64]; 4] {
        let [hw, hb] = self.hidden.params();
        let [ow, ob] = self.output.params();
        [hw, hb, ow, ob]
    }

    /// Accumulates `coef · ∇ log π(action | features)` into `grads`.
    fn accumulate_log_prob_grad(
        &self,
        features: &[f64],
        action: usize,
        coef: f64,
        grads: &mut AgentGrads,
    ) -> Result<()> {
        let feats = AgentFeatures(features.to_vec());
        let h = self.hidden.forward(features)?;
        let p = self.forward(&feats)?;
        let d_logits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, pi)| coef * ((i == action) as u8 as f64 - pi) / self.temperature)
            .collect();
        let (d_h, out_grads) = self.output.vjp(&h, &d_logits)?;
        let (_, hid_grads) = self.hidden.vjp(features, &d_h)?;
        grads.output.add_assign(&out_grads);
        grads.hidden.add_assign(&hid_grads);
        Ok(())
    }
}

pub fn agent_forward(agent: &AgentNet, features: &AgentFeatures) -> Result<Vec<f64>> {
    agent.forward(features)
}

/// Outcome of one decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub action: Action,
    /// `log P[action]` under the policy itself, not the ε-mixture.
    pub log_prob: f64,
    /// True when the uniform exploration branch was taken.
    pub explored: bool,
}

pub fn select_action<R: Rng + ?Sized>(probs: &[f64], epsilon: f64, mode: SelectMode, rng: &mut R) -> Selection {
    let (index, explored) = match mode {
        SelectMode::EvalGreedy => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            (best, false)
        }
        SelectMode::TrainSample => {
            if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                (rng.gen_range(0..probs.len()), true)
            } else {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                (chosen, false)
            }
        }
    };
    Selection {
        action: Action::from_index(index),
        log_prob: probs[index].ln(),
        explored,
    }
}

/// Gradient of `−(1/E) Σ_e Σ_t log π(a_t | s_t) · (signal_e − baseline)`
/// with respect to the agent's parameters only.
pub fn agent_policy_gradient(agent: &AgentNet, episodes: &[EpisodeTrace], baseline: f64) -> Result<AgentGrads> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("policy gradient needs at least one episode".into()));
    }
    let mut grads = AgentGrads::zeros_like(agent);
    let scale = 1.0 / episodes.len() as f64;
    for ep in episodes {
        let advantage = ep.signal - baseline;
        if advantage == 0.0 {
            continue;
        }
        for step in &ep.steps {
            if step.features.is_empty() {
                continue;
            }
            agent.accumulate_log_prob_grad(&step.features, step.action.index(), -scale * advantage, &mut grads)?;
        }
    }
    Ok(grads)
}

/// The surrogate whose gradient [`agent_policy_gradient`] returns.
pub fn policy_surrogate(agent: &AgentNet, episodes: &[EpisodeTrace], baseline: f64) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        for step in &ep.steps {
            let p = agent.forward(&AgentFeatures(step.features.clone()))?;
            total -= p[step.action.index()].ln() * (ep.signal - baseline);
        }
    }
    Ok(total / episodes.len() as f64)
}
