//! Training protocol: main-model warm-up, agent warm-up, joint training with
//! per-layer gradient accumulation, evaluation and checkpointing.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{
    agent_policy_gradient, build_agent_features, select_action, Action, AgentGrads, AgentNet, SelectMode,
};
use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::fpi::{self, FpiConfig};
use crate::layers::{DenseGrads, DenseLayer, FpiLayer, FpiParamGrads};
use crate::linalg::{Activation, DenseMatrix};
use crate::optim::{Optimizer, OptimizerKind};
use crate::reward::{
    compute_reward, cross_entropy, cross_entropy_grad, total_loss, CostLedger, EpisodeTrace, RewardParams,
    TraceStep,
};

/// Activations the agent observes at each decision: the current state and
/// the head's logits on it.
pub const OBSERVED_ACTIVATIONS: usize = 2;

/// FPI layers start close to `z* ≈ φ(x)`: a damped Glorot `W_z` and an
/// identity-plus-noise `W_x`, so the head reads every path's output in
/// roughly the same coordinates.
pub const FPI_INIT_STATE_SCALE: f64 = 0.3;
pub const FPI_INIT_INJECTION_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_fpi_layers: usize,
    pub contraction_target: f64,
    pub fpi_activation: Activation,
    pub agent_hidden: usize,
    pub epsilon: f64,
    pub temperature: f64,
    /// Cost units per FPI iteration at width `cost_ref_dim`.
    pub cost_unit: f64,
    /// Reference width for the `d² / d_ref²` cost scaling; defaults to `hidden_dim`.
    pub cost_ref_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            n_fpi_layers: 3,
            contraction_target: crate::layers::DEFAULT_CONTRACTION_TARGET,
            fpi_activation: Activation::Tanh,
            agent_hidden: 16,
            epsilon: 0.1,
            temperature: 1.0,
            cost_unit: 1.0,
            cost_ref_dim: None,
        }
    }
}

/// Scalar the agent's policy gradient maximises per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentSignal {
    /// The episode reward `R`.
    Reward,
    /// `−(CE − γR)`.
    #[default]
    NegTotalLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub agent_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Agent warm-up length; `None` uses `warmup_epochs`.
    pub agent_warmup_epochs: Option<usize>,
    pub max_steps_per_episode: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Decay of the moving-average policy-gradient baseline.
    pub baseline_decay: f64,
    pub agent_signal: AgentSignal,
    pub fpi: FpiConfig,
    pub reward: RewardParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            agent_learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            warmup_epochs: 20,
            agent_warmup_epochs: None,
            max_steps_per_episode: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            baseline_decay: 0.9,
            agent_signal: AgentSignal::NegTotalLoss,
            fpi: FpiConfig::default(),
            reward: RewardParams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.fpi.validate()?;
        self.reward.validate()?;
        let m = &self.model;
        if self.batch_size == 0 || self.max_steps_per_episode == 0 || m.hidden_dim == 0 || m.agent_hidden == 0 {
            return Err(Error::Config(
                "batch_size, max_steps_per_episode, hidden_dim and agent_hidden must be >= 1".into(),
            ));
        }
        if self.warmup_epochs + self.agent_warmup() > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) plus agent warm-up ({}) must not exceed epochs ({})",
                self.warmup_epochs,
                self.agent_warmup(),
                self.epochs
            )));
        }
        if !(self.learning_rate >= 0.0 && self.agent_learning_rate >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(m.contraction_target > 0.0 && m.contraction_target < 1.0) {
            return Err(Error::Config("model.contraction_target must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&m.epsilon) || !(m.temperature > 0.0) {
            return Err(Error::Config("model.epsilon must lie in [0, 1] and temperature be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay must lie in [0, 1)".into()));
        }
        if !(m.cost_unit > 0.0 && m.cost_unit.is_finite()) {
            return Err(Error::Config("model.cost_unit must be > 0".into()));
        }
        Ok(())
    }

    pub fn agent_warmup(&self) -> usize {
        self.agent_warmup_epochs.unwrap_or(self.warmup_epochs)
    }

    /// Epochs left for joint training after both warm-ups.
    pub fn joint_epochs(&self) -> usize {
        self.epochs.saturating_sub(self.warmup_epochs + self.agent_warmup())
    }

    pub fn cost_ledger(&self) -> CostLedger {
        let unit = self.model.cost_unit;
        let d_ref = self.model.cost_ref_dim.unwrap_or(self.model.hidden_dim);
        CostLedger::scaled_by_width(&vec![self.model.hidden_dim; self.model.n_fpi_layers], d_ref, unit)
            .expect("validated positive cost unit")
    }
}

/// Encoder `m → d`, a list of `d → d` FPI layers, and a linear head `d → classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMainModel")]
pub struct MainModel {
    pub encoder: DenseLayer,
    fpi_layers: Vec<FpiLayer>,
    pub head: DenseLayer,
    #[serde(skip)]
    bounds: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMainModel {
    encoder: DenseLayer,
    fpi_layers: Vec<FpiLayer>,
    head: DenseLayer,
}

impl TryFrom<RawMainModel> for MainModel {
    type Error = Error;

    fn try_from(raw: RawMainModel) -> Result<Self> {
        MainModel::new(raw.encoder, raw.fpi_layers, raw.head)
    }
}

impl MainModel {
    /// Checks the dimension chain and certifies every FPI layer.
    pub fn new(encoder: DenseLayer, fpi_layers: Vec<FpiLayer>, head: DenseLayer) -> Result<Self> {
        let d = encoder.output_dim();
        for l in &fpi_layers {
            check_len("MainModel (fpi state width)", d, l.state_dim())?;
            check_len("MainModel (fpi input width)", d, l.input_dim())?;
        }
        check_len("MainModel (head input)", d, head.input_dim())?;
        let mut model = Self {
            encoder,
            fpi_layers,
            head,
            bounds: Vec::new(),
        };
        model.recertify()?;
        Ok(model)
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, n_classes: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden_dim;
        let encoder = DenseLayer::glorot(input_dim, d, Activation::Tanh, rng);
        let mut layers = Vec::with_capacity(cfg.n_fpi_layers);
        for _ in 0..cfg.n_fpi_layers {
            let w_z = DenseLayer::glorot(d, d, Activation::Identity, rng).w.scaled(FPI_INIT_STATE_SCALE);
            let mut w_x = DenseMatrix::identity(d);
            w_x.add_scaled(FPI_INIT_INJECTION_NOISE, &DenseLayer::glorot(d, d, Activation::Identity, rng).w)?;
            layers.push(FpiLayer::new(w_z, w_x, vec![0.0; d], cfg.fpi_activation, cfg.contraction_target)?);
        }
        let head = DenseLayer::glorot(d, n_classes, Activation::Identity, rng);
        Self::new(encoder, layers, head)
    }

    pub fn fpi_layers(&self) -> &[FpiLayer] {
        &self.fpi_layers
    }

    pub fn n_fpi_layers(&self) -> usize {
        self.fpi_layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Certified bounds as of the last projection.
    pub fn certified_bounds(&self) -> &[f64] {
        &self.bounds
    }

    fn recertify(&mut self) -> Result<()> {
        let layers = std::mem::take(&mut self.fpi_layers);
        self.fpi_layers = layers
            .into_iter()
            .map(FpiLayer::enforce_contraction)
            .collect::<Result<_>>()?;
        self.bounds = self.fpi_layers.iter().map(FpiLayer::lipschitz_bound).collect();
        Ok(())
    }

    fn check_certified(&self) -> Result<()> {
        match self.bounds.iter().find(|b| **b >= 1.0) {
            Some(&bound) => Err(Error::NotCertified { bound }),
            None => Ok(()),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.encoder.params().to_vec();
        for l in &self.fpi_layers {
            v.extend(l.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.extend(self.encoder.params_mut());
        for l in &mut self.fpi_layers {
            v.extend(l.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    /// SHA-256 over the JSON serialisation of every parameter.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

pub fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("parameters serialise");
    hex::encode(Sha256::digest(&bytes))
}

/// Who picks the actions of an episode.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Agent { net: &'a AgentNet, mode: SelectMode },
    /// Fixed action list; `Nop` once exhausted.
    Script(&'a [Action]),
}

/// Forward state of one FPI application, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub layer: usize,
    pub input: Vec<f64>,
    pub z_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub logits: Vec<f64>,
    pub trace: EpisodeTrace,
    pub x: Vec<f64>,
    pub label: usize,
    /// Encoder output.
    pub h0: Vec<f64>,
    pub steps: Vec<StepCache>,
    /// State handed to the head.
    pub h_final: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs one episode for a single sample.
///
/// `h ← encoder(x)`; then up to `max_steps_per_episode` times the controller
/// picks an action, `Nop` ends the episode and `Fpi(i)` replaces `h` with the
/// fixed point of layer `i` injected with `h`. The head reads the final `h`.
#[allow(clippy::too_many_arguments)]
pub fn episode_forward<R: Rng + ?Sized>(
    model: &MainModel,
    controller: Controller<'_>,
    x: &[f64],
    label: usize,
    sample_id: usize,
    cfg: &TrainConfig,
    ledger: &CostLedger,
    rng: &mut R,
) -> Result<Episode> {
    model.check_certified()?;
    let h0 = model.encoder.forward(x)?;
    let mut h = h0.clone();
    let max_steps = cfg.max_steps_per_episode;
    let mut steps = Vec::new();
    let mut caches = Vec::new();
    for step in 0..max_steps {
        let (action, log_prob, features) = match controller {
            Controller::Agent { net, mode } => {
                let head_out = model.head.forward(&h)?;
                let feats = build_agent_features(&[&h, &head_out], cfg.reward.lambda, step, max_steps)?;
                let probs = net.forward(&feats)?;
                let sel = select_action(&probs, net.epsilon, mode, rng);
                (sel.action, sel.log_prob, feats.0)
            }
            Controller::Script(script) => (script.get(step).copied().unwrap_or(Action::Nop), 0.0, Vec::new()),
        };
        match action {
            Action::Nop => {
                steps.push(TraceStep {
                    action,
                    iterations: 0,
                    cost_units: 0.0,
                    log_prob,
                    features,
                });
                break;
            }
            Action::Fpi(i) => {
                let layer = model.fpi_layers.get(i).ok_or_else(|| {
                    Error::InvalidInput(format!("action selects FPI layer {i} of {}", model.n_fpi_layers()))
                })?;
                let res = fpi::solve(layer, &h, &cfg.fpi, ledger.weight(i))?;
                steps.push(TraceStep {
                    action,
                    iterations: res.iterations,
                    cost_units: res.cost_units,
                    log_prob,
                    features,
                });
                let input = std::mem::replace(&mut h, res.z_star.clone());
                caches.push(StepCache {
                    layer: i,
                    input,
                    z_star: res.z_star,
                });
            }
        }
    }

    let logits = model.head.forward(&h)?;
    let ce = cross_entropy(&logits, label)?;
    if !ce.is_finite() {
        return Err(Error::Numeric(format!("non-finite cross-entropy on sample {sample_id}")));
    }
    let correct = argmax(&logits) == label;
    let cost: f64 = steps.iter().map(|s| s.cost_units).sum();
    let consecutive = caches.len();
    let reward = compute_reward(correct, cost, consecutive, &cfg.reward);
    let trace = EpisodeTrace {
        sample_id,
        steps,
        consecutive_layer_count: consecutive,
        correct,
        cost,
        reward,
        ce,
        signal: match cfg.agent_signal {
            AgentSignal::Reward => reward,
            AgentSignal::NegTotalLoss => -total_loss(ce, reward, &cfg.reward),
        },
    };
    Ok(Episode {
        logits,
        trace,
        x: x.to_vec(),
        label,
        h0,
        steps: caches,
        h_final: h,
    })
}

/// Gradients for every main-model parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct MainGrads {
    pub encoder: DenseGrads,
    pub fpi: Vec<FpiParamGrads>,
    pub head: DenseGrads,
}

impl MainGrads {
    pub fn zeros_like(model: &MainModel) -> Self {
        Self {
            encoder: DenseGrads::zeros_like(&model.encoder),
            fpi: model.fpi_layers.iter().map(FpiParamGrads::zeros_like).collect(),
            head: DenseGrads::zeros_like(&model.head),
        }
    }

    pub fn add_assign(&mut self, other: &MainGrads) {
        self.encoder.add_assign(&other.encoder);
        for (a, b) in self.fpi.iter_mut().zip(&other.fpi) {
            a.add_assign(b);
        }
        self.head.add_assign(&other.head);
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.encoder.w.data(), &self.encoder.b];
        for g in &self.fpi {
            v.extend([g.w_z.data(), g.w_x.data(), &g.b[..]]);
        }
        v.extend([self.head.w.data(), &self.head.b[..]]);
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|b| b.iter().copied()).collect()
    }
}

/// Cross-entropy gradient of one episode, through exactly the layers it used.
pub fn sample_gradient(model: &MainModel, episode: &Episode, fpi_cfg: &FpiConfig) -> Result<MainGrads> {
    let mut grads = MainGrads::zeros_like(model);
    accumulate_sample_gradient(model, episode, fpi_cfg, &mut grads)?;
    Ok(grads)
}

fn accumulate_sample_gradient(
    model: &MainModel,
    episode: &Episode,
    fpi_cfg: &FpiConfig,
    grads: &mut MainGrads,
) -> Result<()> {
    let g_logits = cross_entropy_grad(&episode.logits, episode.label);
    let (mut g_h, head_g) = model.head.vjp(&episode.h_final, &g_logits)?;
    grads.head.add_assign(&head_g);
    for step in episode.steps.iter().rev() {
        let layer = &model.fpi_layers[step.layer];
        let bundle = fpi::fpi_backward(layer, &step.z_star, &step.input, &g_h, fpi_cfg)?;
        grads.fpi[step.layer].add_assign(&bundle.grad_params);
        g_h = bundle.grad_x;
    }
    let (_, enc_g) = model.encoder.vjp(&episode.x, &g_h)?;
    grads.encoder.add_assign(&enc_g);
    Ok(())
}

/// `∂L/∂W_l = Σ_s ∂L_s/∂W_l`, summed in sample order. Layers no sample used
/// keep an exactly zero gradient.
pub fn batch_gradient(model: &MainModel, episodes: &[Episode], fpi_cfg: &FpiConfig) -> Result<MainGrads> {
    let mut grads = MainGrads::zeros_like(model);
    for ep in episodes {
        accumulate_sample_gradient(model, ep, fpi_cfg, &mut grads)?;
    }
    Ok(grads)
}

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub ce: f64,
    pub reward_mean: f64,
    pub cost_mean: f64,
    pub accuracy: f64,
    /// Share of decision steps per action index.
    pub action_freq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub epoch: usize,
    pub split: String,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub rows: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
}

impl History {
    pub fn split_rows<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn write_csv(&self, metrics: &Path, timing: &Path, n_actions: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(metrics).map_err(|e| Error::Format(e.to_string()))?;
        let mut header: Vec<String> = ["epoch", "split", "ce", "reward_mean", "cost_mean", "accuracy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..n_actions).map(|i| format!("freq_{}", Action::from_index(i).label())));
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.split.clone(),
                r.ce.to_string(),
                r.reward_mean.to_string(),
                r.cost_mean.to_string(),
                r.accuracy.to_string(),
            ];
            rec.extend((0..n_actions).map(|i| r.action_freq.get(i).copied().unwrap_or(0.0).to_string()));
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(timing).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.timing {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Summary of a greedy evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ce_mean: f64,
    pub reward_mean: f64,
    /// Deterministic cost units per sample.
    pub mean_cost: f64,
    pub mean_fpi_actions: f64,
    /// Decision counts per action index (`Nop` first).
    pub histogram: Vec<usize>,
    pub decision_steps: usize,
    pub wall_seconds: f64,
    pub traces: Vec<EpisodeTrace>,
}

impl EvalReport {
    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.decision_steps.max(1) as f64;
        self.histogram.iter().map(|&c| c as f64 / total).collect()
    }

    /// Mean FPI actions over samples whose tag matches.
    pub fn mean_fpi_actions_where(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let (sum, n) = self
            .traces
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .fold((0usize, 0usize), |(s, n), (_, t)| (s + t.fpi_actions(), n + 1));
        sum as f64 / n.max(1) as f64
    }

    fn from_episodes(episodes: &[Episode], n_actions: usize, wall_seconds: f64) -> Self {
        let n = episodes.len().max(1) as f64;
        let mut histogram = vec![0usize; n_actions];
        let mut decision_steps = 0;
        for ep in episodes {
            for s in &ep.trace.steps {
                histogram[s.action.index()] += 1;
                decision_steps += 1;
            }
        }
        let mean = |f: &dyn Fn(&EpisodeTrace) -> f64| episodes.iter().map(|e| f(&e.trace)).sum::<f64>() / n;
        Self {
            accuracy: mean(&|t| f64::from(u8::from(t.correct))),
            ce_mean: mean(&|t| t.ce),
            reward_mean: mean(&|t| t.reward),
            mean_cost: mean(&|t| t.cost),
            mean_fpi_actions: mean(&|t| t.fpi_actions() as f64),
            histogram,
            decision_steps,
            wall_seconds,
            traces: episodes.iter().map(|e| e.trace.clone()).collect(),
        }
    }

    fn metrics_row(&self, epoch: usize, split: &str) -> MetricsRow {
        MetricsRow {
            epoch,
            split: split.into(),
            ce: self.ce_mean,
            reward_mean: self.reward_mean,
            cost_mean: self.mean_cost,
            accuracy: self.accuracy,
            action_freq: self.frequencies(),
        }
    }
}

/// Greedy (or scripted) pass over `data`; deterministic given the model.
pub fn evaluate(model: &MainModel, controller: Controller<'_>, data: &Dataset, cfg: &TrainConfig) -> Result<EvalReport> {
    let controller = match controller {
        Controller::Agent { net, .. } => Controller::Agent {
            net,
            mode: SelectMode::EvalGreedy,
        },
        c => c,
    };
    let ledger = cfg.cost_ledger();
    // Greedy selection never draws from the stream.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start = Instant::now();
    let episodes = data
        .features
        .iter()
        .zip(&data.labels)
        .enumerate()
        .map(|(i, (x, &y))| episode_forward(model, controller, x, y, i, cfg, &ledger, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_episodes(
        &episodes,
        model.n_fpi_layers() + 1,
        start.elapsed().as_secs_f64(),
    ))
}

/// Full training state: models, optimisers, RNG and history.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: MainModel,
    pub agent: AgentNet,
    pub history: History,
    pub epoch: usize,
    main_opt: Optimizer,
    agent_opt: Optimizer,
    baseline: Option<f64>,
    rng: ChaCha8Rng,
    ledger: CostLedger,
}

impl Trainer {
    /// Fresh model and agent drawn from `cfg.seed`.
    pub fn new(cfg: TrainConfig, input_dim: usize, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = MainModel::init(input_dim, n_classes, &cfg.model, &mut rng)?;
        let agent = AgentNet::new(
            OBSERVED_ACTIVATIONS,
            cfg.model.n_fpi_layers,
            cfg.model.agent_hidden,
            cfg.model.epsilon,
            cfg.model.temperature,
            &mut rng,
        )?;
        Ok(Self::from_parts(cfg, model, agent, rng))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(ck.config.seed.wrapping_add(ck.epoch as u64));
        let mut t = Self::from_parts(ck.config, ck.main, ck.agent, rng);
        t.epoch = ck.epoch;
        Ok(t)
    }

    fn from_parts(cfg: TrainConfig, model: MainModel, agent: AgentNet, rng: ChaCha8Rng) -> Self {
        let ledger = cfg.cost_ledger();
        Self {
            main_opt: Optimizer::new(cfg.optimizer),
            agent_opt: Optimizer::new(cfg.optimizer),
            cfg,
            model,
            agent,
            history: History::default(),
            epoch: 0,
            baseline: None,
            rng,
            ledger,
        }
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn n_actions(&self) -> usize {
        self.model.n_fpi_layers() + 1
    }

    pub fn rng_digest(&self) -> String {
        let state = format!(
            "{}:{}:{}",
            hex::encode(self.rng.get_seed()),
            self.rng.get_stream(),
            self.rng.get_word_pos()
        );
        hex::encode(Sha256::digest(state.as_bytes()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            main: self.model.clone(),
            agent: self.agent.clone(),
            rng_digest: self.rng_digest(),
        }
    }

    fn shuffled_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn run_episodes(&mut self, controller: Controller<'_>, data: &Dataset, batch: &[usize]) -> Result<Vec<Episode>> {
        let mut out = Vec::with_capacity(batch.len());
        for &i in batch {
            out.push(episode_forward(
                &self.model,
                controller,
                &data.features[i],
                data.labels[i],
                i,
                &self.cfg,
                &self.ledger,
                &mut self.rng,
            )?);
        }
        Ok(out)
    }

    /// Optimiser step on the batch-mean gradient, then projection back onto
    /// the contraction set.
    fn main_step(&mut self, grads: &MainGrads, batch_len: usize) -> Result<()> {
        let scale = 1.0 / batch_len as f64;
        let scaled: Vec<Vec<f64>> = grads
            .blocks()
            .into_iter()
            .map(|b| b.iter().map(|g| g * scale).collect())
            .collect();
        let refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        let lr = self.cfg.learning_rate;
        let mut params = self.model.params_mut();
        self.main_opt.step(&mut params, &refs, lr);
        self.model.recertify()
    }

    fn agent_step(&mut self, episodes: &[Episode]) -> Result<()> {
        let traces: Vec<EpisodeTrace> = episodes.iter().map(|e| e.trace.clone()).collect();
        let mean = traces.iter().map(|t| t.signal).sum::<f64>() / traces.len() as f64;
        let baseline = self.baseline.unwrap_or(mean);
        let grads: AgentGrads = agent_policy_gradient(&self.agent, &traces, baseline)?;
        let lr = self.cfg.agent_learning_rate;
        self.agent_opt.step(&mut self.agent.params_mut(), &grads.blocks(), lr);
        let decay = self.cfg.baseline_decay;
        self.baseline = Some(decay * baseline + (1.0 - decay) * mean);
        Ok(())
    }

    fn log_epoch(&mut self, split: &str, episodes: &[Episode], started: Instant) {
        let report = EvalReport::from_episodes(episodes, self.n_actions(), 0.0);
        self.history.rows.push(report.metrics_row(self.epoch, split));
        self.history.timing.push(TimingRow {
            epoch: self.epoch,
            split: split.into(),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    fn numeric_context(e: Error, batch: usize) -> Error {
        match e {
            Error::Numeric(m) => Error::Numeric(format!("batch {batch}: {m}")),
            other => other,
        }
    }

    /// Trains along a fixed action script for `epochs` epochs, CE only.
    pub fn train_scripted(&mut self, script: &[Action], data: &Dataset, epochs: usize, split: &str) -> Result<()> {
        for _ in 0..epochs {
            self.epoch += 1;
            let started = Instant::now();
            let mut seen = Vec::with_capacity(data.len());
            for (b, batch) in self.shuffled_batches(data.len()).into_iter().enumerate() {
                let episodes = self
                    .run_episodes(Controller::Script(script), data, &batch)
                    .map_err(|e| Self::numeric_context(e, b))?;
                let grads = batch_gradient(&self.model, &episodes, &self.cfg.fpi)
                    .map_err(|e| Self::numeric_context(e, b))?;
                self.main_step(&grads, batch.len())?;
                seen.extend(episodes);
            }
            self.log_epoch(split, &seen, started);
        }
        Ok(())
    }

    /// Main-model warm-up: every FPI layer applied once, in order.
    pub fn pretrain_main(&mut self, data: &Dataset) -> Result<()> {
        let script: Vec<Action> = (0..self.model.n_fpi_layers()).map(Action::Fpi).collect();
        self.train_scripted(&script, data, self.cfg.warmup_epochs, "warmup_main")
    }

    /// Agent warm-up against the frozen main model.
    pub fn pretrain_agent(&mut self, data: &Dataset) -> Result<()> {
        for _ in 0..self.cfg.agent_warmup() {
            self.epoch += 1;
            let started = Instant::now();
            let mut seen = Vec::with_capacity(data.len());
            for (b, batch) in self.shuffled_batches(data.len()).into_iter().enumerate() {
                let agent = self.agent.clone();
                let controller = Controller::Agent {
                    net: &agent,
                    mode: SelectMode::TrainSample,
                };
                let episodes = self
                    .run_episodes(controller, data, &batch)
                    .map_err(|e| Self::numeric_context(e, b))?;
                self.agent_step(&episodes).map_err(|e| Self::numeric_context(e, b))?;
                seen.extend(episodes);
            }
            self.log_epoch("warmup_agent", &seen, started);
        }
        Ok(())
    }

    /// Joint training. Both updates of a batch are computed from the same
    /// episodes; main first, then agent.
    pub fn train_joint(&mut self, data: &Dataset, test: Option<&Dataset>, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.epoch += 1;
            let started = Instant::now();
            let mut seen = Vec::with_capacity(data.len());
            for (b, batch) in self.shuffled_batches(data.len()).into_iter().enumerate() {
                let agent = self.agent.clone();
                let controller = Controller::Agent {
                    net: &agent,
                    mode: SelectMode::TrainSample,
                };
                let episodes = self
                    .run_episodes(controller, data, &batch)
                    .map_err(|e| Self::numeric_context(e, b))?;
                let grads = batch_gradient(&self.model, &episodes, &self.cfg.fpi)
                    .map_err(|e| Self::numeric_context(e, b))?;
                self.main_step(&grads, batch.len())?;
                self.agent_step(&episodes).map_err(|e| Self::numeric_context(e, b))?;
                seen.extend(episodes);
            }
            self.log_epoch("train", &seen, started);
            if let Some(test) = test {
                let report = self.evaluate(test)?;
                self.history.rows.push(report.metrics_row(self.epoch, "test"));
                self.history.timing.push(TimingRow {
                    epoch: self.epoch,
                    split: "test".into(),
                    wall_seconds: report.wall_seconds,
                });
            }
        }
        Ok(())
    }

    /// Main warm-up, agent warm-up, then joint training for the remaining epochs.
    pub fn run_protocol(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
        self.pretrain_main(train)?;
        self.pretrain_agent(train)?;
        self.train_joint(train, test, self.cfg.joint_epochs())
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        evaluate(
            &self.model,
            Controller::Agent {
                net: &self.agent,
                mode: SelectMode::EvalGreedy,
            },
            data,
            &self.cfg,
        )
    }
}

/// Spec-named wrappers over [`Trainer`].
pub fn pretrain_main(trainer: &mut Trainer, data: &Dataset) -> Result<()> {
    trainer.pretrain_main(data)
}

pub fn pretrain_agent(trainer: &mut Trainer, data: &Dataset) -> Result<()> {
    trainer.pretrain_agent(data)
}

pub fn train_joint(trainer: &mut Trainer, data: &Dataset, test: Option<&Dataset>, epochs: usize) -> Result<()> {
    trainer.train_joint(data, test, epochs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub main: MainModel,
    pub agent: AgentNet,
    pub rng_digest: String,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ck).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Format(format!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}
