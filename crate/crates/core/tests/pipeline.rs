use std::fs;
use std::path::Path;
use std::process::Command;

use protokb::model::Variant;
use protokb::pipeline::{self, RunConfig};
use protokb::Error;

fn config(out: &Path) -> RunConfig {
    let mut c = RunConfig::from_toml(include_str!("../examples/configs/run.toml")).unwrap();
    c.paths.out = out.to_path_buf();
    c.synth.n_studies = 200;
    c.train.max_steps = Some(40);
    c
}

#[test]
fn missing_inputs_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path());
    for result in [
        pipeline::cmd_mine(&c).map(|_| ()),
        pipeline::cmd_build_bank(&c).map(|_| ()),
        pipeline::cmd_train(&c).map(|_| ()),
        pipeline::cmd_populate(&c).map(|_| ()),
        pipeline::cmd_evaluate(&c).map(|_| ()),
    ] {
        assert!(matches!(result, Err(Error::Io { .. })), "{result:?}");
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(RunConfig::from_toml("sed = 3").is_err());
    assert!(RunConfig::from_toml("[train]\nlearning_rate = -1.0").unwrap().validate().is_err());
}

#[test]
fn evaluating_gold_against_itself_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    pipeline::cmd_synth(&c).unwrap();
    c.paths.predictions = Some(c.gold_path());
    let r = pipeline::cmd_evaluate(&c).unwrap();
    let m = r.metrics;
    assert_eq!(
        [m.overall_f1, m.l1_f1, m.l2_f1, m.l3_f1, m.report_accuracy],
        [1.0; 5]
    );
    assert_eq!(r.seed, Some(c.seed));
}

#[test]
fn full_run_writes_artifacts_and_resolved_configs() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path());
    let report = pipeline::run_all(&c).unwrap();
    assert!(report.studies > 0);
    let v = c.variant_dir();
    for p in [
        dir.path().join("lexicon.tsv"),
        dir.path().join("pools.json"),
        dir.path().join("pool_stats.tsv"),
        dir.path().join("coverage.tsv"),
        v.join("checkpoint.json"),
        v.join("train_log.jsonl"),
        v.join("predictions.jsonl"),
        v.join("metrics.json"),
    ] {
        assert!(p.exists(), "{} missing", p.display());
    }
    let resolved = RunConfig::load(&v.join("train.config.toml")).unwrap();
    assert_eq!(resolved, c);
    let header = fs::read_to_string(v.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["seed"], c.seed);
}

#[test]
fn variants_keep_separate_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    pipeline::cmd_synth(&c).unwrap();
    pipeline::cmd_mine(&c).unwrap();
    pipeline::cmd_build_bank(&c).unwrap();
    for v in [Variant::NoKnowledge, Variant::RandomizedPrototypes] {
        c.variant = v;
        pipeline::cmd_train(&c).unwrap();
        assert!(dir.path().join(v.as_str()).join("checkpoint.json").exists());
    }
    // The no-knowledge variant trains against an empty bank.
    let nk = fs::read_to_string(dir.path().join("no-knowledge/bank.jsonl")).unwrap();
    assert_eq!(nk.lines().count(), 1);
}

#[test]
fn binary_runs_commands_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, include_str!("../examples/configs/run.toml")).unwrap();
    let out = dir.path().join("out");
    let run = |cmd: &str| {
        Command::new(env!("CARGO_BIN_EXE_protokb"))
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3", cmd])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    };
    let failed = run("mine");
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("error:"));

    assert!(run("synth").status.success());
    let synth = fs::read_to_string(out.join("world/synth.config.toml")).unwrap();
    assert!(synth.contains("seed = 3"));
    assert!(run("mine").status.success());
    let bank = run("build-bank");
    assert!(bank.status.success());
    assert!(String::from_utf8_lossy(&bank.stdout).contains("Covered categories"));

    let bad = Command::new(env!("CARGO_BIN_EXE_protokb"))
        .args(["--variant", "nonsense", "synth"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
