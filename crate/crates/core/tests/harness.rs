mod common;

use std::path::Path;

use wdlab::harness::*;
use wdlab::model::{make_scale_invariant, LossKind, MLPSpec};
use wdlab::optim::{OptimizerConfig, OptimizerKind, Schedule};
use wdlab::plot::{plot, PlotKind};
use wdlab::probes::hutchinson_trace;
use wdlab::Model;

fn small(seed: u64) -> RunConfig {
    let mut cfg = default_spiral_config(seed);
    cfg.task.n_train = 64;
    cfg.model = MLPSpec::new(vec![2, 12, 2], LossKind::CrossEntropy);
    cfg.phases = vec![
        Phase { steps: 60, schedule: Schedule::constant(0.5, 60) },
        Phase { steps: 20, schedule: Schedule::constant(0.05, 20) },
    ];
    cfg.probes_every = 10;
    cfg.snapshot_every = 20;
    cfg.probes.probe_subset = 32;
    cfg.probes.trace_probes = 4;
    cfg.finetune = Some(FinetuneConfig { steps: 10, lr: 0.05 });
    cfg
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_with_plots(cfg: &RunConfig, dir: &Path) {
    let rec = run(cfg).unwrap();
    write_run_dir(dir, cfg, &rec).unwrap();
    for kind in [PlotKind::LossCurve, PlotKind::NormCurve, PlotKind::ElrCurve] {
        plot(dir, kind, &dir.join(format!("{}.svg", kind.name()))).unwrap();
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(3);
    run_with_plots(&cfg, &tmp.path().join("a"));
    run_with_plots(&cfg, &tmp.path().join("b"));
    let (a, b) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    assert!(a.len() >= 8);
    assert_eq!(a, b);
}

#[test]
fn run_directory_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(1);
    let rec = run(&cfg).unwrap();
    write_run_dir(tmp.path(), &cfg, &rec).unwrap();
    assert_eq!(read_probes(&tmp.path().join("probes.jsonl")).unwrap(), rec.records);
    assert_eq!(read_snapshots(tmp.path()).unwrap(), rec.snapshots);
    assert_eq!(load_config(&tmp.path().join("config.json")).unwrap(), cfg);
    let mid = &rec.snapshots[2];
    let resumed = resume(&cfg, mid).unwrap();
    assert_eq!(resumed.final_params, rec.final_params);
    assert_eq!(resumed.summary, rec.summary);
}

#[test]
fn sphere_runs_keep_unit_norm() {
    let mut cfg = small(2);
    cfg.model = make_scale_invariant(&MLPSpec::new(vec![2, 12, 12, 2], LossKind::CrossEntropy)).unwrap();
    cfg.optimizer = OptimizerConfig::new(OptimizerKind::SphereSgd, 0.0);
    let rec = run(&cfg).unwrap();
    assert!(!rec.records.is_empty());
    for r in &rec.records {
        assert!((r.param_norm - 1.0).abs() < 1e-10, "{}", r.param_norm);
    }
    let fine = finetune_along_trajectory(&cfg, &rec.snapshots, 5, 0.1).unwrap();
    for s in &rec.snapshots {
        assert!((common::norm(&s.params.flatten()) - 1.0).abs() < 1e-10);
    }
    assert_eq!(fine.rows.len(), rec.snapshots.len());
}

#[test]
fn single_cell_sweep_equals_run() {
    let cfg = small(4);
    let grid = GridSpec::parse("seed=4").unwrap();
    let rows = sweep(&cfg, &grid).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].summary.as_ref().unwrap(), &run(&cfg).unwrap().summary);
}

#[test]
fn sweep_rows_follow_the_grid() {
    let cfg = small(0);
    let rows = sweep(&cfg, &GridSpec::parse("lr=0.2,0.4;seed=0,1,2").unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[3].cell.lr, 0.4);
    assert_eq!(rows[3].cell.seed, 0);
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER);
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == SWEEP_HEADER.split(',').count()));
    // a failing cell is reported, not fatal
    let bad = sweep(&cfg, &GridSpec::parse("lambda_wd=-1").unwrap()).unwrap();
    assert!(bad[0].error.is_some() && sweep_csv(&bad).contains("error"));
}

#[test]
fn zero_step_finetune_reports_raw_values() {
    let cfg = small(5);
    let rec = run(&cfg).unwrap();
    let report = finetune_along_trajectory(&cfg, &rec.snapshots, 0, 0.1).unwrap();
    let exp = Experiment::new(&cfg).unwrap();
    for (row, snap) in report.rows.iter().zip(&rec.snapshots) {
        let loss = exp.model.forward(&snap.params, &exp.train, &wdlab::MixedPrecisionPolicy::FULL).unwrap().loss;
        assert_eq!(row.train_loss, loss);
        assert_eq!(row.step, snap.step);
        let t = hutchinson_trace(&exp.model, &snap.params, &exp.probe_batch, 4, 0).unwrap();
        assert!(t.value.is_finite() && row.trace.value.is_finite());
    }
    assert!(finetune_along_trajectory(&cfg, &rec.snapshots[..1], 0, 0.1).is_err());
}

#[test]
fn converged_trajectory_has_steady_traces() {
    let mut cfg = small(6);
    cfg.phases = vec![Phase { steps: 600, schedule: Schedule::constant(0.02, 600) }];
    cfg.snapshot_every = 100;
    cfg.probes.probe_subset = 0;
    cfg.probes.trace_probes = 0;
    let rec = run(&cfg).unwrap();
    let tail = &rec.snapshots[rec.snapshots.len() - 3..];
    let report = finetune_along_trajectory(&cfg, tail, 200, 0.05).unwrap();
    for w in report.rows.windows(2) {
        let (a, b) = (w[0].trace.value, w[1].trace.value);
        assert!((a - b).abs() < 0.05 * a.abs().max(b.abs()), "{a} {b}");
    }
}

#[test]
fn stress_sweep_emits_a_well_formed_table() {
    let mut cfg = stress_config(0);
    cfg.phases[0] = Phase { steps: 40, schedule: Schedule::constant(0.1, 40) };
    let rows = sweep(&cfg, &GridSpec::parse("lr=0.05,1.0;precision=full,bf16").unwrap()).unwrap();
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 11);
        assert!(["ok", "diverged"].contains(&f[4]), "{line}");
        assert_eq!(f[6] == "true", f[4] == "diverged");
    }
}

#[test]
fn config_errors() {
    let text = serde_json::to_string(&small(0)).unwrap();
    assert!(parse_config(&text).is_ok());
    let bad = text.replacen("\"seed\"", "\"sed\"", 1);
    assert!(matches!(parse_config(&bad), Err(wdlab::Error::Config(_))));
    let mut cfg = small(0);
    cfg.phases.clear();
    assert!(matches!(cfg.validate(), Err(wdlab::Error::Config(_))));
}
