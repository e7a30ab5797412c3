use std::path::Path;
use std::process::{Command, Output};

use dynalay::cli::CliConfig;
use dynalay::trainer::load_checkpoint;

const SMALL: &str = r#"{
  "epochs": 5,
  "warmup_epochs": 2,
  "agent_warmup_epochs": 1,
  "batch_size": 32,
  "learning_rate": 0.01,
  "seed": 4,
  "data": {"source": {"kind": "two_moons", "n": 160, "noise": 0.1, "seed": 4}}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynalay"))
}

fn run(args: &[&Path]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn train(dir: &Path, cfg: &Path, out: &str) -> std::path::PathBuf {
    let out = dir.join(out);
    let o = run(&[Path::new("train"), cfg, &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_writes_all_artifacts_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let a = train(d.path(), &cfg, "a");
    let b = train(d.path(), &cfg, "b");
    for f in ["checkpoint.json", "metrics.csv", "timing.csv", "resolved_config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
    assert_eq!(read(&a.join("checkpoint.json")), read(&b.join("checkpoint.json")));

    let original = CliConfig::from_json(SMALL).unwrap();
    let resolved = std::fs::read_to_string(a.join("resolved_config.json")).unwrap();
    assert_eq!(CliConfig::from_json(&resolved).unwrap(), original);

    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,ce,reward_mean,cost_mean,accuracy,freq_nop,freq_fpi0"));
    assert!(metrics.lines().any(|l| l.contains(",test,")));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let a = train(d.path(), &cfg, "a");
    let b = train(d.path(), &a.join("resolved_config.json"), "b");
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn zero_epochs_write_an_untrained_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "cfg.json", r#"{"epochs": 0, "warmup_epochs": 0, "seed": 9}"#);
    let out = train(d.path(), &cfg, "o");
    let ck = load_checkpoint(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.epoch, 0);
    let fresh = dynalay::Trainer::new(ck.config.clone(), 2, 2).unwrap();
    assert_eq!(ck.main, fresh.model);
    assert_eq!(ck.agent, fresh.agent);
}

#[test]
fn eval_writes_report_and_plot() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let out = train(d.path(), &cfg, "t");
    let data = write(
        d.path(),
        "data.json",
        r#"{"source": {"kind": "two_moons", "n": 100, "noise": 0.1, "seed": 8}, "test_fraction": 0.5}"#,
    );
    let ev = d.path().join("ev");
    let o = run(&[Path::new("eval"), &out.join("checkpoint.json"), &data, &ev]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let freqs = std::fs::read_to_string(ev.join("action_frequencies.csv")).unwrap();
    let total: f64 = freqs
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");
    let svg = std::fs::read_to_string(ev.join("action_frequencies.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains(r#"class="bars""#));
    let traces = std::fs::read_to_string(ev.join("traces.csv")).unwrap();
    assert_eq!(traces.lines().count(), 1 + 50);
}

#[test]
fn input_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let out = d.path().join("o");

    let o = run(&[Path::new("train"), &d.path().join("missing.json"), &out]);
    assert_eq!(code(&o), 2);

    let unknown = write(d.path(), "u.json", r#"{"epochs": 3, "learning_rat": 0.1}"#);
    let o = run(&[Path::new("train"), &unknown, &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let bad_budget = write(d.path(), "b.json", r#"{"epochs": 3, "warmup_epochs": 5}"#);
    assert_eq!(code(&run(&[Path::new("train"), &bad_budget, &out])), 2);

    let o = run(&[Path::new("preset"), Path::new("no-such-preset"), &cfg, &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("two-moons"));

    let t = train(d.path(), &cfg, "t");
    let text = std::fs::read_to_string(t.join("checkpoint.json")).unwrap();
    let broken = write(d.path(), "broken.json", &text[..text.len() * 2 / 3]);
    let data = write(d.path(), "data.json", r#"{"source": {"kind": "two_moons", "n": 20, "noise": 0.1, "seed": 1}}"#);
    let o = run(&[Path::new("eval"), &broken, &data, &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    let o = run(&[Path::new("eval"), &d.path().join("nope.json"), &data, &out]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_exits_with_three() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "cfg.json",
        r#"{"epochs": 3, "warmup_epochs": 3, "agent_warmup_epochs": 0, "learning_rate": 1e308, "optimizer": "sgd", "seed": 1}"#,
    );
    let o = run(&[Path::new("train"), &cfg, &d.path().join("o")]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
