use std::path::Path;
use std::process::{Command, Output};

use fedmma_core::datagen::PartitionPlan;
use fedmma_core::evalrun::{ExperimentConfig, ExperimentSummary, PartitionSettings, SUMMARY_FILE};

fn fedmma(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedmma"));
    cmd.args(args);
    for var in ["FEDMMA_CONFIG", "FEDMMA_OUT", "FEDMMA_SEED", "FEDMMA_TRIALS", "FEDMMA_IN"] {
        cmd.env_remove(var);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.classes = 10;
    c.data.novel_classes = 2;
    c.data.train_per_class = 6;
    c.data.test_per_class = 4;
    c.data.pretrain_per_class = 4;
    c.data.shots = 2;
    c.data.partition = PartitionSettings::Pathological { classes_per_client: 4 };
    c.federation.clients = 2;
    c.federation.rounds = 1;
    c.pretrain.steps = 5;
    c.eval.seeds = vec![1, 2];
    c
}

#[test]
fn infeasible_partition_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.data.partition = PartitionSettings::Pathological { classes_per_client: 7 };
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let out = tmp.path().join("out");
    let o = fedmma(&["run", "--config", &path, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pathological partition infeasible"), "{err}");
    assert!(err.contains("exceeds data.classes (25)"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(fedmma(&["run", "--bogus"], &[]).status.code(), Some(2));
    assert_eq!(fedmma(&[], &[]).status.code(), Some(2));
    let o = fedmma(&["partition", "--config", "/nonexistent/cfg.json"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.json");
    std::fs::write(&p, "{\"adapter\": {\"rank\": 4}}").unwrap();
    assert_eq!(fedmma(&["partition", "--config", p.to_str().unwrap()], &[]).status.code(), Some(2));
}

#[test]
fn partition_dump_is_json_and_seed_flag_beats_env() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.data.partition = PartitionSettings::Dirichlet { beta: 0.5 };
    let path = write_config(tmp.path(), "c.json", &cfg);
    let plan = |o: &Output| -> PartitionPlan {
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str(&stdout(o)).unwrap()
    };
    let by_flag = plan(&fedmma(&["partition", "--config", &path, "--dump", "--seed", "7"], &[("FEDMMA_SEED", "8")]));
    let by_env = plan(&fedmma(&["partition", "--dump"], &[("FEDMMA_SEED", "7"), ("FEDMMA_CONFIG", &path)]));
    let other = plan(&fedmma(&["partition", "--config", &path, "--dump", "--seed", "8"], &[]));
    assert_eq!(by_flag, by_env);
    assert_ne!(by_flag, other);
    assert_eq!(by_flag.clients, 2);

    let o = fedmma(&["partition", "--config", &path], &[]);
    assert!(stdout(&o).contains("client 1:"));
}

#[test]
fn run_then_report_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &small());
    let out = tmp.path().join("run");
    let o = fedmma(&["run", "--config", &path], &[("FEDMMA_OUT", out.to_str().unwrap())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: ExperimentSummary = serde_json::from_str(&stdout(&o)).unwrap();
    let written: ExperimentSummary = serde_json::from_str(&std::fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert!(out.join("seed-1").join("metrics.csv").exists());

    let o = fedmma(&["report", "--in", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    let reported: ExperimentSummary = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(reported, written);

    let o = fedmma(&["report", "--in", tmp.path().join("missing").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_narrows_a_run_to_one_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &small());
    let out = tmp.path().join("one");
    let o = fedmma(&["run", "--config", &path, "--out", out.to_str().unwrap(), "--seed", "4"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let s: ExperimentSummary = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![4]);
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn gradcheck_prints_one_line() {
    let o = fedmma(&["gradcheck", "--trials", "2"], &[("FEDMMA_SEED", "3")]);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1, "{text}");
    assert!(text.starts_with("trials 2 "), "{text}");
    assert!(text.contains("max_rel_error"));
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
}
