use wdlab::optim::Schedule;
use wdlab::salab::*;

#[test]
fn simulation_tracks_exact_risk() {
    for (k, p) in default_problems().iter().enumerate() {
        let eta = 0.5 / p.max_curvature();
        let sched = Schedule::cosine_warmup(eta, 100, 5, 0.2);
        let exact = exact_risk(p, &sched, 100).unwrap();
        let sim = simulate_sgd(p, &sched, 100, 4000, 10 + k as u64).unwrap();
        for t in [1, 10, 50, 100] {
            let z = (sim.mean[t] - exact.expected_error[t]).abs() / sim.stderr[t];
            assert!(z < 3.0, "problem {k} step {t}: z = {z}");
        }
    }
}

#[test]
fn simulation_is_deterministic_and_thread_independent() {
    let p = &default_problems()[2];
    let s = Schedule::constant(0.2, 30);
    let a = simulate_sgd(p, &s, 30, 300, 5).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| simulate_sgd(p, &s, 30, 300, 5).unwrap());
    assert_eq!(a, b);
}

#[test]
fn stationary_monte_carlo_matches_closed_form() {
    let est = stationary_variance_mc(1.0, 1.0, 0.1, 2000, 200, 200, 3).unwrap();
    let exact = 0.1 / 1.9;
    assert!((est.value - exact).abs() < 4.0 * est.stderr, "{est:?}");
}

#[test]
fn bias_dominates_early_and_variance_late() {
    let p = &default_problems()[0];
    let c = exact_risk(p, &Schedule::constant(0.5, 2000), 2000).unwrap();
    assert!(c.bias_part[1] > c.variance_part[1]);
    assert!(c.variance_part[2000] > c.bias_part[2000]);
    let floor: f64 = p.spectrum.iter().map(|&s| stationary_variance(s, p.noise_var, 0.5)).sum();
    assert!((c.variance_part[2000] - floor).abs() < 1e-9 * floor);
}

#[test]
fn bound_dominates_exact_risk() {
    for p in default_problems() {
        let lrs = lr_sequence(&Schedule::cosine_warmup(0.8 / p.max_curvature(), 300, 10, 0.05), 300).unwrap();
        let exact = exact_risk_lrs(&p, &lrs).unwrap();
        let bound = risk_bound_lrs(&p, &lrs);
        for (e, b) in exact.expected_error.iter().zip(&bound) {
            assert!(e <= &(b * (1.0 + 1e-12)));
        }
    }
}

#[test]
fn equivalence_demo_with_decay() {
    let p = &default_problems()[0];
    let r = effective_lr_equivalence_demo(p, 0.2, 0.5, 400, 0.3).unwrap();
    assert!(r.contract_applies);
    assert!(r.contract_holds, "{r:?}");
    assert!(r.terminal_eta_eff > r.terminal_base_lr);
    assert_eq!(r.eta_eff.len(), 400);
}

#[test]
fn config_runner_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"problem": {"spectrum": [1.0, 0.5], "w_star": [0.0, 1.0], "noise_var": 0.5, "w0": [1.0, 0.0]},
        "schedule": {"kind": "constant", "base_lr": 0.1, "total_steps": 50},
        "horizon": 50, "replicas": 64, "seed": 1,
        "equivalence": {"eta": 0.2, "lambda": 0.5, "norm_floor": 0.3}}"#;
    let cfg = parse_sa_config(text).unwrap();
    let out = run_sa_lab(&cfg, dir.path()).unwrap();
    assert_eq!(out.exact.steps.len(), 51);
    assert!(dir.path().join("risk.csv").is_file() && dir.path().join("equivalence.json").is_file());
    let bad = text.replace("\"seed\"", "\"sede\"");
    assert!(matches!(parse_sa_config(&bad), Err(wdlab::Error::Config(_))));
}
