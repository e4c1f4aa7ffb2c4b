use std::path::Path;
use std::process::{Command, Output};

use wdlab::harness::{default_spiral_config, stress_config, Phase};
use wdlab::model::{LossKind, MLPSpec};
use wdlab::optim::Schedule;

fn wdlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wdlab")).args(args).current_dir(cwd).output().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = default_spiral_config(0);
    cfg.task.n_train = 64;
    cfg.model = MLPSpec::new(vec![2, 8, 2], LossKind::CrossEntropy);
    cfg.phases = vec![Phase { steps: 40, schedule: Schedule::constant(0.3, 40) }];
    cfg.probes_every = 10;
    cfg.snapshot_every = 10;
    cfg.probes.probe_subset = 16;
    cfg.probes.trace_probes = 2;
    cfg.finetune = Some(wdlab::harness::FinetuneConfig { steps: 3, lr: 0.05 });
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_finetune_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = wdlab(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = tmp.path().join("runs/small");
    for f in ["config.json", "probes.jsonl", "summary.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let out = wdlab(&["finetune", "runs/small"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("finetune.json").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("step,train_loss,test_metric,trace,trace_stderr"));
    for kind in ["loss_curve", "norm_curve", "elr_curve", "trace_trend"] {
        let svg = format!("{kind}.svg");
        let out = wdlab(&["plot", "runs/small", "--kind", kind, "--out", &svg], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(std::fs::read_to_string(tmp.path().join(&svg)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn bad_configs_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let text = std::fs::read_to_string(&cfg).unwrap().replacen("\"seed\"", "\"colour\"", 1);
    std::fs::write(tmp.path().join("bad.json"), text).unwrap();
    assert_eq!(wdlab(&["run", "bad.json"], tmp.path()).status.code(), Some(2));
    std::fs::write(tmp.path().join("junk.json"), "{not json").unwrap();
    assert_eq!(wdlab(&["run", "junk.json"], tmp.path()).status.code(), Some(2));
    assert_eq!(wdlab(&["sweep", "small.json", "--grid", "speed=1"], tmp.path()).status.code(), Some(2));
    assert_eq!(wdlab(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(wdlab(&["plot", "small.json", "--kind", "pie", "--out", "x.svg"], tmp.path()).status.code(), Some(2));
    assert!(!tmp.path().join("x.svg").exists());
}

#[test]
fn divergence_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = stress_config(0);
    cfg.precision = wdlab::MixedPrecisionPolicy::FULL;
    cfg.phases = vec![Phase { steps: 60, schedule: Schedule::constant(50.0, 60) }];
    cfg.optimizer.lambda_wd = 0.0;
    std::fs::write(tmp.path().join("hot.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = wdlab(&["run", "hot.json", "--out", "hot"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(tmp.path().join("hot/summary.json")).unwrap();
    assert!(summary.contains("\"diverged\": true"));
}

#[test]
fn sweep_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let out = wdlab(&["sweep", "small.json", "--grid", "lambda_wd=0,0.01;seed=0,1", "--out", "s.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let out = wdlab(&["plot", "s.csv", "--kind", "ushape", "--out", "u.svg"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bf16_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = wdlab(&["bf16-check"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("qadd(256, 1, bf16)") && !text.contains("FAIL"));
}

#[test]
fn sa_lab_writes_risk_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"problem": {"spectrum": [1.0, 0.25], "w_star": [0.5, 0.0], "noise_var": 1.0, "w0": [0.0, 1.0]},
        "schedule": {"kind": "constant", "base_lr": 0.1, "total_steps": 30},
        "horizon": 30, "replicas": 128, "seed": 2}"#;
    std::fs::write(tmp.path().join("sa.json"), cfg).unwrap();
    let out = wdlab(&["sa-lab", "sa.json", "--out", "sa"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sa/risk.csv")).unwrap();
    assert_eq!(csv.lines().count(), 32);
    let out = wdlab(&["plot", "sa/risk.csv", "--kind", "risk_curve", "--out", "r.svg"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
