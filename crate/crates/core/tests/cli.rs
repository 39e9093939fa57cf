use std::path::Path;
use std::process::{Command, Output};

use offload::cli::{CHECKPOINT, METRIC_MAP, SUMMARY_KV, TRAIN_POPULATION, TRAIN_TRACE};
use offload::config::ScenarioConfig;
use offload::dqn::{HistoryWindow, QNetwork};
use offload::scenario::trainer_seed;
use offload::trace_gen::read_trace;

fn tiny() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::desk();
    cfg.population.train_size = 2000;
    cfg.population.test_size = 1000;
    cfg.population.mdp_bins = 64;
    cfg.eval.train_length = 4000;
    cfg.eval.test_length = 3000;
    cfg.eval.seeds = vec![1, 2];
    cfg.trainer.window = 8;
    cfg.trainer.hidden_layers = 2;
    cfg.trainer.hidden_units = 8;
    cfg.trainer.segments_per_sync = 64;
    cfg.trainer.sync_count = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &ScenarioConfig) -> std::path::PathBuf {
    let path = dir.join("scenario.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn offload(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offload")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = offload(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = ok(&["generate", "--config", s(&cfg_path), "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg_path), "--out", s(&b)]);
    assert!(report.contains("trace_length=4000"));
    assert_eq!(read_trace(&a.join(TRAIN_TRACE)).unwrap().len(), 4000);
    for f in [TRAIN_POPULATION, METRIC_MAP, TRAIN_TRACE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn iid_trace_reward_matches_population() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.selection.sp = 1.0;
    cfg.eval.train_length = 100_000;
    let cfg_path = write_config(dir.path(), &cfg);
    let report = ok(&["generate", "--config", s(&cfg_path), "--out", s(dir.path())]);
    let get = |key: &str| -> f64 {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (pop, trace, se) = (get("population_mean_reward"), get("trace_mean_reward"), get("trace_reward_se"));
    assert!((trace - pop).abs() < 3.0 * se, "{trace} vs {pop} (se {se})");
}

#[test]
fn train_eval_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.trainer.sync_count = 0;
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    ok(&["generate", "--config", s(&cfg_path), "--out", s(&out)]);
    ok(&["train", "--config", s(&cfg_path), "--out", s(&out)]);
    let ckpt = out.join(CHECKPOINT);
    let net = QNetwork::load(&ckpt).unwrap();
    let fresh = QNetwork::new(cfg.trainer(0).architecture(), cfg.params().unwrap(), trainer_seed(&cfg)).unwrap();
    assert_eq!(net, fresh);
    let probe = HistoryWindow { gaps: vec![1, 2, 1, 1, 3, 1, 1], metrics: vec![0.1, 0.5, 0.2, 0.9, 0.0, 0.3, 0.7] };
    assert_eq!(net.forward(&probe).unwrap(), fresh.forward(&probe).unwrap());

    let e1 = dir.path().join("e1");
    let table = ok(&["eval", "--config", s(&cfg_path), "--out", s(&e1)]);
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(!table.contains("dqn"));
    let e2 = dir.path().join("e2");
    let e3 = dir.path().join("e3");
    ok(&["eval", "--config", s(&cfg_path), "--out", s(&e2), "--checkpoint", s(&ckpt)]);
    ok(&["eval", "--config", s(&cfg_path), "--out", s(&e3), "--checkpoint", s(&ckpt)]);
    let kv = std::fs::read_to_string(e2.join(SUMMARY_KV)).unwrap();
    assert!(kv.contains("dqn.mean_loss="));
    assert_eq!(kv, std::fs::read_to_string(e3.join(SUMMARY_KV)).unwrap());
    assert!(e2.join("decisions_mdp.csv").exists());

    let bench = ok(&["bench", "--checkpoint", s(&ckpt), "--iterations", "1"]);
    assert!(bench.contains("iterations=1"));
    assert!(bench.contains("std_ms=0.000000"));
}

#[test]
fn seed_override_changes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--config", s(&cfg_path), "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg_path), "--out", s(&b), "--seed-override", "99"]);
    assert_ne!(std::fs::read(a.join(TRAIN_TRACE)).unwrap(), std::fs::read(b.join(TRAIN_TRACE)).unwrap());
}

#[test]
fn sweeps_write_one_directory_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.sweep.insert("selection.rprob".into(), vec![toml::Value::Float(0.01), toml::Value::Float(1.0)]);
    let cfg_path = write_config(dir.path(), &cfg);
    let report = ok(&["generate", "--config", s(&cfg_path), "--out", s(dir.path())]);
    assert!(report.contains("# selection.rprob=0.01"));
    assert!(dir.path().join("point_000").join(TRAIN_TRACE).exists());
    assert!(dir.path().join("point_001").join(TRAIN_TRACE).exists());
}

#[test]
fn errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = offload(&["bench", "--checkpoint", s(&missing)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: kind=missing_artifact msg="), "{err}");

    let bad = dir.path().join("bad.toml");
    let text = tiny().to_toml().unwrap().replacen("sp = ", "spread = ", 1);
    std::fs::write(&bad, text).unwrap();
    let out = offload(&["generate", "--config", s(&bad), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=invalid_config"), "{err}");

    let out = offload(&["train", "--config", s(&write_config(dir.path(), &tiny())), "--out", s(&dir.path().join("x"))]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: kind=missing_artifact"));
}
