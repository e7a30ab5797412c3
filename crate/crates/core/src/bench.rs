//! Dataset configs and experiment presets: two-moons, the hard/easy mixture,
//! the λ sweep and the FPI ablation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::Action;
use crate::data::{gen_hard_easy_mixture, gen_two_moons, Dataset, Difficulty};
use crate::error::{Error, Result};
use crate::plot::{export_svg_plot, PlotKind};
use crate::trainer::{evaluate, Controller, EvalReport, TrainConfig, Trainer};

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    TwoMoons {
        n: usize,
        noise: f64,
        seed: u64,
    },
    HardEasy {
        n: usize,
        margin_easy: f64,
        margin_hard: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

/// A dataset plus its train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DataConfig {
    pub fn two_moons(seed: u64) -> Self {
        Self {
            source: DataSource::TwoMoons {
                n: 1000,
                noise: 0.15,
                seed,
            },
            test_fraction: default_test_fraction(),
            split_seed: seed,
        }
    }

    pub fn hard_easy(seed: u64) -> Self {
        Self {
            source: DataSource::HardEasy {
                n: 1000,
                margin_easy: 1.0,
                margin_hard: 0.05,
                seed,
            },
            test_fraction: default_test_fraction(),
            split_seed: seed,
        }
    }

    /// Full dataset. Relative CSV paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        match &self.source {
            DataSource::TwoMoons { n, noise, seed } => gen_two_moons(*n, *noise, *seed),
            DataSource::HardEasy {
                n,
                margin_easy,
                margin_hard,
                seed,
            } => gen_hard_easy_mixture(*n, *margin_easy, *margin_hard, *seed),
            DataSource::Csv { path } => Dataset::read_csv(&base_dir.join(path)),
        }
    }

    /// `(train, test)`.
    pub fn load_split(&self, base_dir: &Path) -> Result<(Dataset, Dataset)> {
        self.load(base_dir)?.split(self.test_fraction, self.split_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    TwoMoons,
    HardEasyMix,
    LambdaSweep,
    FpiAblation,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [
        PresetName::TwoMoons,
        PresetName::HardEasyMix,
        PresetName::LambdaSweep,
        PresetName::FpiAblation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::TwoMoons => "two-moons",
            PresetName::HardEasyMix => "hard-easy-mix",
            PresetName::LambdaSweep => "lambda-sweep",
            PresetName::FpiAblation => "fpi-ablation",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|p| p.as_str()).collect();
            Error::Config(format!("unknown preset '{s}' (known: {})", known.join(", ")))
        })
    }
}

pub const LAMBDA_GRID: [f64; 4] = [0.0, 0.1, 0.5, 1.0];
pub const ABLATION_MODELS: usize = 4;

/// Overrides the hard/easy presets apply on top of the base config: one FPI
/// layer, a main warm-up long enough to fit the hard band, an agent warm-up
/// long enough for a 20-epoch moving average, and a cost unit that keeps the
/// cost term comparable to the cross-entropy differences.
fn hard_easy_overrides() -> Value {
    serde_json::json!({
        "learning_rate": 0.01,
        "agent_learning_rate": 0.01,
        "epochs": 250,
        "warmup_epochs": 100,
        "agent_warmup_epochs": 40,
        "model": { "n_fpi_layers": 1, "cost_unit": 0.1 }
    })
}

/// A named experiment: resolved config, seed list and per-seed data.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentPreset {
    pub fn overrides(name: PresetName) -> Value {
        match name {
            PresetName::TwoMoons => serde_json::json!({
                "learning_rate": 0.01,
                "agent_learning_rate": 0.01,
                "epochs": 200,
            }),
            PresetName::HardEasyMix | PresetName::LambdaSweep => hard_easy_overrides(),
            PresetName::FpiAblation => serde_json::json!({
                "learning_rate": 0.01,
                "epochs": 100,
            }),
        }
    }

    pub fn default_seeds(name: PresetName) -> Vec<u64> {
        match name {
            PresetName::FpiAblation => (0..10).collect(),
            _ => (0..5).collect(),
        }
    }

    /// Applies the preset's overrides to `base`.
    pub fn resolve(name: PresetName, base: &TrainConfig) -> Result<Self> {
        let mut value = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, &Self::overrides(name));
        let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(Self {
            name,
            config,
            seeds: Self::default_seeds(name),
        })
    }

    pub fn data(&self, seed: u64) -> DataConfig {
        match self.name {
            PresetName::TwoMoons | PresetName::FpiAblation => DataConfig::two_moons(seed),
            PresetName::HardEasyMix | PresetName::LambdaSweep => DataConfig::hard_easy(seed),
        }
    }

    fn seed_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.config.clone()
        }
    }
}

/// JSON merge: objects merge key by key, everything else replaces.
pub fn merge(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                merge(t.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (t, p) => *t = p.clone(),
    }
}

/// Outcome of one agent-driven training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub lambda: f64,
    pub report: EvalReport,
    /// Mean FPI actions on Hard / Easy test samples, when tagged.
    pub fpi_hard: Option<f64>,
    pub fpi_easy: Option<f64>,
    /// Per-epoch mean episode reward `R` during the agent warm-up.
    pub agent_warmup_reward: Vec<f64>,
    /// Per-epoch mean of the agent's training signal `γR − CE` during the agent warm-up.
    pub agent_warmup_signal: Vec<f64>,
}

/// One scripted run of the FPI ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub model: usize,
    pub seed: u64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PresetReport {
    pub runs: Vec<RunSummary>,
    pub ablation: Vec<AblationRun>,
    pub files: Vec<PathBuf>,
}

fn tagged_means(report: &EvalReport, test: &Dataset) -> (Option<f64>, Option<f64>) {
    match &test.difficulty {
        Some(tags) => (
            Some(report.mean_fpi_actions_where(|i| tags[i] == Difficulty::Hard)),
            Some(report.mean_fpi_actions_where(|i| tags[i] == Difficulty::Easy)),
        ),
        None => (None, None),
    }
}

fn summarise(trainer: &Trainer, seed: u64, test: &Dataset) -> Result<RunSummary> {
    let report = trainer.evaluate(test)?;
    let (fpi_hard, fpi_easy) = tagged_means(&report, test);
    let gamma = trainer.cfg.reward.gamma;
    let warm: Vec<_> = trainer.history.split_rows("warmup_agent").collect();
    Ok(RunSummary {
        seed,
        lambda: trainer.cfg.reward.lambda,
        fpi_hard,
        fpi_easy,
        agent_warmup_reward: warm.iter().map(|r| r.reward_mean).collect(),
        agent_warmup_signal: warm.iter().map(|r| gamma * r.reward_mean - r.ce).collect(),
        report,
    })
}

/// Full protocol for each seed (the λ sweep shares each seed's main warm-up
/// across λ values; it does not depend on λ).
fn run_agent_preset(preset: &ExperimentPreset, lambdas: &[f64], out: &Path) -> Result<Vec<RunSummary>> {
    let mut runs = Vec::new();
    for &seed in &preset.seeds {
        let (train, test) = preset.data(seed).load_split(out)?;
        let mut warm = Trainer::new(preset.seed_config(seed), train.input_dim(), train.n_classes)?;
        warm.pretrain_main(&train)?;
        for &lambda in lambdas {
            let mut t = warm.clone();
            t.cfg.reward.lambda = lambda;
            t.pretrain_agent(&train)?;
            let joint = t.cfg.joint_epochs();
            t.train_joint(&train, Some(&test), joint)?;
            let tag = if lambdas.len() > 1 {
                format!("seed{seed}_lambda{lambda}")
            } else {
                format!("seed{seed}")
            };
            t.history.write_csv(
                &out.join(format!("metrics_{tag}.csv")),
                &out.join(format!("timing_{tag}.csv")),
                t.n_actions(),
            )?;
            runs.push(summarise(&t, seed, &test)?);
        }
    }
    Ok(runs)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fmt_err)?;
    for r in rows {
        w.write_record(r).map_err(fmt_err)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_runs(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let n_actions = runs.first().map_or(0, |r| r.report.histogram.len());
    let mut header: Vec<String> = [
        "seed",
        "lambda",
        "accuracy",
        "ce",
        "reward_mean",
        "mean_cost",
        "mean_fpi_actions",
        "fpi_hard",
        "fpi_easy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n_actions).map(|i| format!("freq_{}", Action::from_index(i).label())));
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let mut row = vec![
                r.seed.to_string(),
                r.lambda.to_string(),
                r.report.accuracy.to_string(),
                r.report.ce_mean.to_string(),
                r.report.reward_mean.to_string(),
                r.report.mean_cost.to_string(),
                r.report.mean_fpi_actions.to_string(),
                opt(r.fpi_hard),
                opt(r.fpi_easy),
            ];
            row.extend(r.report.frequencies().iter().map(f64::to_string));
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Action histogram summed over runs, as `action,count`.
fn write_action_histogram(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let n_actions = runs.first().map_or(0, |r| r.report.histogram.len());
    let rows: Vec<Vec<String>> = (0..n_actions)
        .map(|a| {
            let count: usize = runs.iter().map(|r| r.report.histogram[a]).sum();
            vec![Action::from_index(a).label(), count.to_string()]
        })
        .collect();
    write_rows(path, &["action".into(), "count".into()], &rows)
}

/// One row per (λ, action): frequency over all seeds' decisions, plus the
/// λ's mean validation accuracy and cost.
fn write_lambda_sweep(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let mut rows = Vec::new();
    for &lambda in &LAMBDA_GRID {
        let at: Vec<&RunSummary> = runs.iter().filter(|r| r.lambda == lambda).collect();
        if at.is_empty() {
            continue;
        }
        let n_actions = at[0].report.histogram.len();
        let steps: usize = at.iter().map(|r| r.report.decision_steps).sum();
        let acc = at.iter().map(|r| r.report.accuracy).sum::<f64>() / at.len() as f64;
        let cost = at.iter().map(|r| r.report.mean_cost).sum::<f64>() / at.len() as f64;
        for a in 0..n_actions {
            let count: usize = at.iter().map(|r| r.report.histogram[a]).sum();
            rows.push(vec![
                lambda.to_string(),
                Action::from_index(a).label(),
                (count as f64 / steps.max(1) as f64).to_string(),
                acc.to_string(),
                cost.to_string(),
            ]);
        }
    }
    let header: Vec<String> = ["lambda", "action", "frequency", "val_accuracy", "mean_cost"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_rows(path, &header, &rows)
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Five-number summary plus mean, in that order.
pub fn box_stats(values: &[f64]) -> [f64; 6] {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
    [
        quantile(&s, 0.0),
        quantile(&s, 0.25),
        quantile(&s, 0.5),
        quantile(&s, 0.75),
        quantile(&s, 1.0),
        mean,
    ]
}

/// Script for ablation model `k`: FPI on the first `k` layers, then `Nop`.
pub fn ablation_script(k: usize) -> Vec<Action> {
    (0..k).map(Action::Fpi).collect()
}

fn run_ablation(preset: &ExperimentPreset, out: &Path) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for model in 0..ABLATION_MODELS {
        let script = ablation_script(model);
        for &seed in &preset.seeds {
            let (train, test) = preset.data(seed).load_split(out)?;
            let mut t = Trainer::new(preset.seed_config(seed), train.input_dim(), train.n_classes)?;
            if model > t.model.n_fpi_layers() {
                return Err(Error::Config(format!(
                    "fpi-ablation needs at least {} FPI layers, config has {}",
                    ABLATION_MODELS - 1,
                    t.model.n_fpi_layers()
                )));
            }
            let epochs = t.cfg.epochs;
            t.train_scripted(&script, &train, epochs, "train")?;
            let report = evaluate(&t.model, Controller::Script(&script), &test, &t.cfg)?;
            runs.push(AblationRun {
                model,
                seed,
                test_loss: report.ce_mean,
                test_accuracy: report.accuracy,
            });
        }
    }
    Ok(runs)
}

fn write_ablation(dir: &Path, runs: &[AblationRun]) -> Result<[PathBuf; 3]> {
    let raw = dir.join("fpi_ablation.csv");
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                format!("model{}", r.model),
                r.seed.to_string(),
                r.test_loss.to_string(),
                r.test_accuracy.to_string(),
            ]
        })
        .collect();
    let header: Vec<String> = ["model", "seed", "test_loss", "test_accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_rows(&raw, &header, &rows)?;

    let summary = dir.join("fpi_ablation_summary.csv");
    let mut header = vec!["model".to_string(), "metric".into(), "n".into()];
    header.extend(["min", "q1", "median", "q3", "max", "mean"].map(String::from));
    let mut rows = Vec::new();
    for model in 0..ABLATION_MODELS {
        let of: Vec<&AblationRun> = runs.iter().filter(|r| r.model == model).collect();
        for (metric, vals) in [
            ("test_accuracy", of.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()),
            ("test_loss", of.iter().map(|r| r.test_loss).collect()),
        ] {
            let mut row = vec![format!("model{model}"), metric.to_string(), vals.len().to_string()];
            row.extend(box_stats(&vals).iter().map(f64::to_string));
            rows.push(row);
        }
    }
    write_rows(&summary, &header, &rows)?;

    let means = dir.join("fpi_ablation_accuracy.csv");
    let rows: Vec<Vec<String>> = (0..ABLATION_MODELS)
        .map(|m| {
            let v: Vec<f64> = runs.iter().filter(|r| r.model == m).map(|r| r.test_accuracy).collect();
            vec![format!("model{m}"), box_stats(&v)[5].to_string()]
        })
        .collect();
    write_rows(&means, &["model".into(), "mean_test_accuracy".into()], &rows)?;
    Ok([raw, summary, means])
}

/// Runs a preset and writes its CSV and SVG reports under `out`.
pub fn run_preset(preset: &ExperimentPreset, out: &Path) -> Result<PresetReport> {
    std::fs::create_dir_all(out)?;
    let mut report = PresetReport::default();
    match preset.name {
        PresetName::TwoMoons | PresetName::HardEasyMix => {
            report.runs = run_agent_preset(preset, &[preset.config.reward.lambda], out)?;
            let runs = out.join("runs.csv");
            write_runs(&runs, &report.runs)?;
            let hist = out.join("actions.csv");
            write_action_histogram(&hist, &report.runs)?;
            let svg = out.join("actions.svg");
            export_svg_plot(&hist, PlotKind::Histogram, &svg)?;
            report.files.extend([runs, hist, svg]);
        }
        PresetName::LambdaSweep => {
            report.runs = run_agent_preset(preset, &LAMBDA_GRID, out)?;
            let runs = out.join("runs.csv");
            write_runs(&runs, &report.runs)?;
            let sweep = out.join("lambda_sweep.csv");
            write_lambda_sweep(&sweep, &report.runs)?;
            let cost = out.join("lambda_cost.csv");
            let rows: Vec<Vec<String>> = LAMBDA_GRID
                .iter()
                .map(|&l| {
                    let v: Vec<f64> = report
                        .runs
                        .iter()
                        .filter(|r| r.lambda == l)
                        .map(|r| r.report.mean_cost)
                        .collect();
                    vec![l.to_string(), box_stats(&v)[5].to_string()]
                })
                .collect();
            write_rows(&cost, &["lambda".into(), "mean_cost".into()], &rows)?;
            let svg = out.join("lambda_cost.svg");
            export_svg_plot(&cost, PlotKind::Curve, &svg)?;
            report.files.extend([runs, sweep, cost, svg]);
        }
        PresetName::FpiAblation => {
            report.ablation = run_ablation(preset, out)?;
            let [raw, summary, means] = write_ablation(out, &report.ablation)?;
            let svg = out.join("fpi_ablation_accuracy.svg");
            export_svg_plot(&means, PlotKind::Histogram, &svg)?;
            report.files.extend([raw, summary, means, svg]);
        }
    }
    Ok(report)
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Trailing moving average with window `w`.
pub fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    if w == 0 {
        return Vec::new();
    }
    v.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

/// Least-squares slope of `v` against its index.
pub fn trend_slope(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = v.iter().sum::<f64>() / n;
    let num: f64 = v.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let den: f64 = (0..v.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}
