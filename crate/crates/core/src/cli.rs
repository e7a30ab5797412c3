//! Command-line entry points: `train`, `eval` and `preset`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::agent::Action;
use crate::bench::{run_preset, DataConfig, ExperimentPreset, PresetName};
use crate::error::{Error, Result};
use crate::plot::{export_svg_plot, PlotKind};
use crate::trainer::{evaluate, load_checkpoint, save_checkpoint, Controller, EvalReport, TrainConfig, Trainer};
use crate::SelectMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dynalay", version, about = "Fixed-point layers with a layer-selection agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warm-up, agent warm-up and joint training from a JSON config.
    Train { config: PathBuf, out: PathBuf },
    /// Greedy evaluation of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        data_config: PathBuf,
        out: PathBuf,
    },
    /// Runs a named experiment preset.
    Preset { name: String, config: PathBuf, out: PathBuf },
}

/// Training config plus the dataset it runs on.
///
/// On disk this is a single JSON object: every `TrainConfig` key at the top
/// level, plus optional `"data"` (a [`DataConfig`]).
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| json_error("config", &e))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let data = obj.remove("data");
        let train: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        train.validate()?;
        let data = match data {
            Some(d) => serde_json::from_value(d).map_err(|e| Error::Config(format!("config.data: {e}")))?,
            None => DataConfig::two_moons(train.seed),
        };
        Ok(Self { train, data })
    }

    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(&self.train).expect("config serialises");
        value
            .as_object_mut()
            .expect("object")
            .insert("data".into(), serde_json::to_value(&self.data).expect("data config serialises"));
        serde_json::to_string_pretty(&value).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn json_error(what: &str, e: &serde_json::Error) -> Error {
    Error::Config(format!("{what}: line {} column {}: {e}", e.line(), e.column()))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::NotCertified { .. } => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

pub fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = CliConfig::load(config_path)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved_config.json"), cfg.to_json())?;
    let (train, test) = cfg.data.load_split(&base_dir(config_path))?;
    let mut trainer = Trainer::new(cfg.train.clone(), train.input_dim(), train.n_classes)?;
    let test = (!test.is_empty()).then_some(&test);
    trainer.run_protocol(&train, test)?;
    trainer
        .history
        .write_csv(&out.join("metrics.csv"), &out.join("timing.csv"), trainer.n_actions())?;
    save_checkpoint(&out.join("checkpoint.json"), &trainer.checkpoint())?;
    Ok(())
}

/// `metric,value` summary, per-action frequencies and per-sample traces.
pub fn write_eval_report(report: &EvalReport, out: &Path) -> Result<()> {
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(out.join("eval_report.csv")).map_err(fmt_err)?;
    w.write_record(["metric", "value"]).map_err(fmt_err)?;
    for (k, v) in [
        ("accuracy", report.accuracy),
        ("ce_mean", report.ce_mean),
        ("reward_mean", report.reward_mean),
        ("mean_cost", report.mean_cost),
        ("mean_fpi_actions", report.mean_fpi_actions),
        ("decision_steps", report.decision_steps as f64),
    ] {
        w.write_record([k.to_string(), v.to_string()]).map_err(fmt_err)?;
    }
    w.flush()?;

    let freq_path = out.join("action_frequencies.csv");
    let mut w = csv::Writer::from_path(&freq_path).map_err(fmt_err)?;
    w.write_record(["action", "frequency", "count"]).map_err(fmt_err)?;
    for (i, (f, c)) in report.frequencies().iter().zip(&report.histogram).enumerate() {
        w.write_record([Action::from_index(i).label(), f.to_string(), c.to_string()])
            .map_err(fmt_err)?;
    }
    w.flush()?;
    export_svg_plot(&freq_path, PlotKind::Histogram, &out.join("action_frequencies.svg"))?;

    let mut w = csv::Writer::from_path(out.join("traces.csv")).map_err(fmt_err)?;
    w.write_record(["sample_id", "actions", "iterations", "cost", "correct", "ce", "reward"])
        .map_err(fmt_err)?;
    for t in &report.traces {
        let actions: Vec<String> = t.steps.iter().map(|s| s.action.label()).collect();
        let iters: Vec<String> = t.steps.iter().map(|s| s.iterations.to_string()).collect();
        w.write_record([
            t.sample_id.to_string(),
            actions.join(" "),
            iters.join(" "),
            t.cost.to_string(),
            t.correct.to_string(),
            t.ce.to_string(),
            t.reward.to_string(),
        ])
        .map_err(fmt_err)?;
    }
    w.flush()?;

    std::fs::write(
        out.join("eval_timing.csv"),
        format!("wall_seconds\n{}\n", report.wall_seconds),
    )?;
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data_config: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", checkpoint.display())),
        other => other,
    })?;
    let text = read(data_config)?;
    let data: DataConfig = serde_json::from_str(&text).map_err(|e| json_error(&data_config.display().to_string(), &e))?;
    let full = data.load(&base_dir(data_config))?;
    let eval_set = if data.test_fraction > 0.0 {
        full.split(data.test_fraction, data.split_seed)?.1
    } else {
        full
    };
    let report = evaluate(
        &ck.main,
        Controller::Agent {
            net: &ck.agent,
            mode: SelectMode::EvalGreedy,
        },
        &eval_set,
        &ck.config,
    )?;
    std::fs::create_dir_all(out)?;
    write_eval_report(&report, out)
}

pub fn cmd_preset(name: &str, config_path: &Path, out: &Path) -> Result<()> {
    let name: PresetName = name.parse()?;
    let cfg = CliConfig::load(config_path)?;
    let preset = ExperimentPreset::resolve(name, &cfg.train)?;
    std::fs::create_dir_all(out)?;
    let resolved = CliConfig {
        train: preset.config.clone(),
        data: preset.data(preset.seeds[0]),
    };
    std::fs::write(out.join("resolved_config.json"), resolved.to_json())?;
    run_preset(&preset, out)?;
    Ok(())
}

/// Runs a parsed command and maps the outcome to an exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval {
            checkpoint,
            data_config,
            out,
        } => cmd_eval(checkpoint, data_config, out),
        Command::Preset { name, config, out } => cmd_preset(name, config, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
