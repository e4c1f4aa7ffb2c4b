//! Exact bias/variance bookkeeping for SGD on diagonal quadratics.
//!
//! With loss `1/2 (w - w*)^T diag(s) (w - w*)` and isotropic Gaussian gradient
//! noise of variance `sigma2`, each eigendirection evolves independently:
//!
//! ```text
//! bias'     = (1 - eta s)^2 bias
//! variance' = (1 - eta s)^2 variance + eta^2 sigma2
//! ```
//!
//! so expected errors can be tracked exactly and compared with sampled runs.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::Schedule;
use crate::probes::Estimate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadProblem {
    /// Hessian eigenvalues.
    pub spectrum: Vec<f64>,
    pub w_star: Vec<f64>,
    /// Variance of the additive gradient noise per coordinate.
    pub noise_var: f64,
    pub w0: Vec<f64>,
}

impl QuadProblem {
    pub fn validate(&self) -> Result<()> {
        let d = self.spectrum.len();
        if d == 0 || self.spectrum.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("spectrum must be non-empty and strictly positive"));
        }
        if self.w_star.len() != d {
            return Err(Error::DimMismatch { expected: d, got: self.w_star.len() });
        }
        if self.w0.len() != d {
            return Err(Error::DimMismatch { expected: d, got: self.w0.len() });
        }
        if !(self.noise_var >= 0.0) {
            return Err(invalid("noise_var must be non-negative"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    pub fn mu(&self) -> f64 {
        self.spectrum.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_curvature(&self) -> f64 {
        self.spectrum.iter().cloned().fold(0.0, f64::max)
    }

    pub fn initial_error(&self) -> f64 {
        self.w0.iter().zip(&self.w_star).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Log-spaced spectrum on `[lo, hi]` with a seeded Gaussian start and `w* = 0`.
    pub fn log_spaced(dim: usize, lo: f64, hi: f64, noise_var: f64, seed: u64) -> Self {
        let spectrum = (0..dim)
            .map(|i| {
                if dim == 1 {
                    lo
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (dim - 1) as f64).exp()
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        QuadProblem { spectrum, w_star: vec![0.0; dim], noise_var, w0 }
    }
}

/// The problems every agreement check runs on.
pub fn default_problems() -> Vec<QuadProblem> {
    vec![
        QuadProblem::log_spaced(10, 0.1, 1.0, 1.0, 0),
        QuadProblem { spectrum: vec![1.0], w_star: vec![0.5], noise_var: 1.0, w0: vec![0.5] },
        QuadProblem { spectrum: vec![0.5, 1.0, 2.0], w_star: vec![1.0, -1.0, 0.0], noise_var: 0.25, w0: vec![3.0, 2.0, -2.0] },
    ]
}

/// Expected squared distance to the optimum, split into its two sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub steps: Vec<usize>,
    pub expected_error: Vec<f64>,
    pub bias_part: Vec<f64>,
    pub variance_part: Vec<f64>,
}

/// Learning rates `schedule.lr_at(0..horizon)`.
pub fn lr_sequence(schedule: &Schedule, horizon: usize) -> Result<Vec<f64>> {
    (0..horizon).map(|t| schedule.lr_at(t)).collect()
}

/// Exact risk for an explicit learning-rate sequence; entry `t` is after `t` steps.
pub fn exact_risk_lrs(problem: &QuadProblem, lrs: &[f64]) -> Result<RiskCurve> {
    problem.validate()?;
    let l_max = problem.max_curvature();
    if let Some((t, eta)) = lrs.iter().enumerate().find(|(_, eta)| !(**eta > 0.0) || **eta * l_max >= 2.0) {
        return Err(invalid(format!("step {t}: eta = {eta} violates 0 < eta * max_curvature < 2")));
    }
    let d = problem.dim();
    let mut bias: Vec<f64> = (0..d).map(|i| (problem.w0[i] - problem.w_star[i]).powi(2)).collect();
    let mut var = vec![0.0; d];
    let sigma2 = problem.noise_var;
    let mut curve = RiskCurve {
        steps: Vec::with_capacity(lrs.len() + 1),
        expected_error: Vec::with_capacity(lrs.len() + 1),
        bias_part: Vec::with_capacity(lrs.len() + 1),
        variance_part: Vec::with_capacity(lrs.len() + 1),
    };
    let mut record = |t: usize, bias: &[f64], var: &[f64]| {
        let b: f64 = bias.iter().sum();
        let v: f64 = var.iter().sum();
        curve.steps.push(t);
        curve.bias_part.push(b);
        curve.variance_part.push(v);
        curve.expected_error.push(b + v);
    };
    record(0, &bias, &var);
    for (t, &eta) in lrs.iter().enumerate() {
        for i in 0..d {
            let c = (1.0 - eta * problem.spectrum[i]).powi(2);
            bias[i] *= c;
            var[i] = c * var[i] + eta * eta * sigma2;
        }
        record(t + 1, &bias, &var);
    }
    Ok(curve)
}

/// Exact expected error over `horizon` steps of `schedule`.
pub fn exact_risk(problem: &QuadProblem, schedule: &Schedule, horizon: usize) -> Result<RiskCurve> {
    exact_risk_lrs(problem, &lr_sequence(schedule, horizon)?)
}

/// Stationary per-direction variance under constant `eta`: `eta sigma2 / (s (2 - eta s))`.
pub fn stationary_variance(s: f64, sigma2: f64, eta: f64) -> f64 {
    eta * sigma2 / (s * (2.0 - eta * s))
}

/// Upper bound with the bias/variance functional form:
/// `prod_t rho_t^2 ||w0 - w*||^2 + max_t eta_t sigma2 dim / (mu (2 - max_t eta_t L))`,
/// where `rho_t = max(|1 - eta_t mu|, |1 - eta_t L|)` is the contraction of the
/// slowest direction (`1 - eta_t mu` whenever `eta_t (mu + L) <= 2`).
pub fn risk_bound_lrs(problem: &QuadProblem, lrs: &[f64]) -> Vec<f64> {
    let (mu, l) = (problem.mu(), problem.max_curvature());
    let eta_max = lrs.iter().cloned().fold(0.0, f64::max);
    let floor = if eta_max > 0.0 {
        eta_max * problem.noise_var * problem.dim() as f64 / (mu * (2.0 - eta_max * l))
    } else {
        0.0
    };
    let mut contraction = 1.0;
    let e0 = problem.initial_error();
    let mut out = Vec::with_capacity(lrs.len() + 1);
    out.push(e0 + floor);
    for &eta in lrs {
        let rho = (1.0 - eta * mu).abs().max((1.0 - eta * l).abs());
        contraction *= rho * rho;
        out.push(contraction * e0 + floor);
    }
    out
}

/// Sampled estimate of the expected error with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCurve {
    pub steps: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub replicas: usize,
}

const REPLICA_BLOCK: usize = 64;

fn replica_rng(seed: u64, replica: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(replica as u64);
    r
}

/// Run `replicas` independent noisy SGD trajectories and average `||w_t - w*||^2`.
pub fn simulate_sgd_lrs(problem: &QuadProblem, lrs: &[f64], replicas: usize, seed: u64) -> Result<EmpiricalCurve> {
    problem.validate()?;
    if replicas == 0 {
        return Err(invalid("need at least one replica"));
    }
    let horizon = lrs.len();
    let sigma = problem.noise_var.sqrt();
    let d = problem.dim();
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..replicas.div_ceil(REPLICA_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut sum = vec![0.0; horizon + 1];
            let mut sum_sq = vec![0.0; horizon + 1];
            for r in b * REPLICA_BLOCK..((b + 1) * REPLICA_BLOCK).min(replicas) {
                let mut rng = replica_rng(seed, r);
                let mut e: Vec<f64> = (0..d).map(|i| problem.w0[i] - problem.w_star[i]).collect();
                let err0: f64 = e.iter().map(|x| x * x).sum();
                sum[0] += err0;
                sum_sq[0] += err0 * err0;
                for (t, &eta) in lrs.iter().enumerate() {
                    for (ei, s) in e.iter_mut().zip(&problem.spectrum) {
                        let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                        *ei -= eta * (s * *ei + noise);
                    }
                    let err: f64 = e.iter().map(|x| x * x).sum();
                    sum[t + 1] += err;
                    sum_sq[t + 1] += err * err;
                }
            }
            (sum, sum_sq)
        })
        .collect();
    let mut sum = vec![0.0; horizon + 1];
    let mut sum_sq = vec![0.0; horizon + 1];
    for (s, q) in &blocks {
        for t in 0..=horizon {
            sum[t] += s[t];
            sum_sq[t] += q[t];
        }
    }
    let n = replicas as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr = if replicas < 2 {
        vec![0.0; horizon + 1]
    } else {
        sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (((q - n * m * m) / (n - 1.0)).max(0.0) / n).sqrt())
            .collect()
    };
    Ok(EmpiricalCurve { steps: (0..=horizon).collect(), mean, stderr, replicas })
}

pub fn simulate_sgd(problem: &QuadProblem, schedule: &Schedule, horizon: usize, replicas: usize, seed: u64) -> Result<EmpiricalCurve> {
    simulate_sgd_lrs(problem, &lr_sequence(schedule, horizon)?, replicas, seed)
}

/// Monte-Carlo stationary variance of one direction started at the optimum:
/// each replica averages `e_t^2` over `tail` steps after `burn_in` steps.
pub fn stationary_variance_mc(
    s: f64,
    sigma2: f64,
    eta: f64,
    replicas: usize,
    burn_in: usize,
    tail: usize,
    seed: u64,
) -> Result<Estimate> {
    if replicas < 2 || tail == 0 {
        return Err(invalid("need at least two replicas and a non-empty tail"));
    }
    if !(eta * s > 0.0 && eta * s < 2.0) {
        return Err(invalid("eta * s must lie in (0, 2)"));
    }
    let sigma = sigma2.sqrt();
    let per_replica: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let mut e = 0.0f64;
            let mut acc = 0.0;
            for t in 0..burn_in + tail {
                let noise: f64 = rng.sample(StandardNormal);
                e -= eta * (s * e + sigma * noise);
                if t >= burn_in {
                    acc += e * e;
                }
            }
            acc / tail as f64
        })
        .collect();
    Ok(Estimate::from_samples(&per_replica))
}

/// Terminal risks of the weight-decay / effective-LR comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub note: String,
    /// `eta_t / ((1 - eta_t lambda) n_t)` along run (a).
    pub eta_eff: Vec<f64>,
    pub terminal_eta_eff: f64,
    pub terminal_base_lr: f64,
    /// (a) base schedule with weight decay folded into the effective LR.
    pub terminal_a: f64,
    /// (b) base schedule, no weight decay.
    pub terminal_b: f64,
    /// (c) no weight decay, cosine decay ending at (a)'s terminal effective LR.
    pub terminal_c: f64,
    pub floor_ratio_c: f64,
    /// Terminal effective LR exceeds the base terminal LR by at least 10%.
    pub contract_applies: bool,
    /// `|a - c| < |a - b|`.
    pub contract_holds: bool,
}

/// Compare a weight-decayed run, viewed through its effective LR, with plain
/// runs at the base schedule and at a schedule matched to its terminal effective LR.
///
/// The parameter norm is modeled by the pure shrink `n_{t+1} = max((1 - eta_t lambda) n_t, norm_floor)`
/// from `n_0 = 1`; the quadratic is not scale-invariant, so this is an illustration only.
pub fn effective_lr_equivalence_demo(
    problem: &QuadProblem,
    eta: f64,
    lambda: f64,
    horizon: usize,
    norm_floor: f64,
) -> Result<EquivalenceReport> {
    if !(norm_floor > 0.0 && norm_floor <= 1.0) {
        return Err(invalid("norm_floor must lie in (0, 1]"));
    }
    let base = Schedule::cosine_warmup(eta, horizon, 0, 0.1);
    let base_lrs = lr_sequence(&base, horizon)?;
    let mut norm = 1.0;
    let mut eta_eff = Vec::with_capacity(horizon);
    for &lr in &base_lrs {
        eta_eff.push(crate::probes::effective_lr(lr, lambda, norm)?);
        norm = ((1.0 - lr * lambda) * norm).max(norm_floor);
    }
    let terminal_eta_eff = *eta_eff.last().unwrap();
    let terminal_base_lr = *base_lrs.last().unwrap();
    let floor_ratio_c = terminal_eta_eff / eta;
    if floor_ratio_c > 1.0 {
        return Err(invalid("terminal effective LR exceeds the base LR; raise norm_floor"));
    }
    let matched = Schedule::cosine_warmup(eta, horizon, 0, floor_ratio_c);
    let last = |c: RiskCurve| *c.expected_error.last().unwrap();
    let terminal_a = last(exact_risk_lrs(problem, &eta_eff)?);
    let terminal_b = last(exact_risk_lrs(problem, &base_lrs)?);
    let terminal_c = last(exact_risk(problem, &matched, horizon)?);
    Ok(EquivalenceReport {
        note: "illustrative: weight decay enters only through an effective-LR trajectory on a quadratic".into(),
        eta_eff,
        terminal_eta_eff,
        terminal_base_lr,
        terminal_a,
        terminal_b,
        terminal_c,
        floor_ratio_c,
        contract_applies: terminal_eta_eff >= 1.1 * terminal_base_lr,
        contract_holds: (terminal_a - terminal_c).abs() < (terminal_a - terminal_b).abs(),
    })
}

/// CSV with columns `step,exact_total,bias,variance,empirical_mean,empirical_stderr`.
pub fn write_risk_csv(path: &Path, exact: &RiskCurve, empirical: Option<&EmpiricalCurve>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,exact_total,bias,variance,empirical_mean,empirical_stderr")?;
    for (i, step) in exact.steps.iter().enumerate() {
        let (m, s) = match empirical {
            Some(e) => (format!("{:?}", e.mean[i]), format!("{:?}", e.stderr[i])),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{step},{:?},{:?},{:?},{m},{s}",
            exact.expected_error[i], exact.bias_part[i], exact.variance_part[i]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Parameters of the weight-decay / effective-LR comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub eta: f64,
    pub lambda: f64,
    pub norm_floor: f64,
}

/// Input of a lab run: one problem, one schedule, optional sampling and comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaLabConfig {
    pub problem: QuadProblem,
    pub schedule: Schedule,
    pub horizon: usize,
    /// 0 skips the sampled curve.
    pub replicas: usize,
    pub seed: u64,
    pub equivalence: Option<EquivalenceConfig>,
}

/// What a lab run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SaLabOutput {
    pub exact: RiskCurve,
    pub empirical: Option<EmpiricalCurve>,
    pub equivalence: Option<EquivalenceReport>,
}

pub fn parse_sa_config(text: &str) -> Result<SaLabConfig> {
    let cfg: SaLabConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.problem.validate().map_err(|e| Error::Config(e.to_string()))?;
    cfg.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
    if cfg.horizon > cfg.schedule.total_steps {
        return Err(Error::Config("horizon exceeds schedule.total_steps".into()));
    }
    Ok(cfg)
}

/// Run `cfg` and write `risk.csv` (and `equivalence.json`) into `dir`.
pub fn run_sa_lab(cfg: &SaLabConfig, dir: &Path) -> Result<SaLabOutput> {
    let exact = exact_risk(&cfg.problem, &cfg.schedule, cfg.horizon)?;
    let empirical = if cfg.replicas > 0 {
        Some(simulate_sgd(&cfg.problem, &cfg.schedule, cfg.horizon, cfg.replicas, cfg.seed)?)
    } else {
        None
    };
    let equivalence = match &cfg.equivalence {
        Some(e) => Some(effective_lr_equivalence_demo(&cfg.problem, e.eta, e.lambda, cfg.horizon, e.norm_floor)?),
        None => None,
    };
    std::fs::create_dir_all(dir)?;
    write_risk_csv(&dir.join("risk.csv"), &exact, empirical.as_ref())?;
    if let Some(report) = &equivalence {
        std::fs::write(dir.join("equivalence.json"), serde_json::to_string_pretty(report)? + "\n")?;
    }
    Ok(SaLabOutput { exact, empirical, equivalence })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_is_pure_bias() {
        let p = QuadProblem { spectrum: vec![0.5, 2.0], w_star: vec![0.0, 1.0], noise_var: 0.0, w0: vec![1.0, 0.0] };
        let c = exact_risk(&p, &Schedule::constant(0.3, 20), 20).unwrap();
        for t in 0..=20 {
            let expected = 0.85f64.powi(2 * t as i32) + 0.4f64.powi(2 * t as i32);
            assert!((c.expected_error[t] - expected).abs() < 1e-14);
            assert_eq!(c.variance_part[t], 0.0);
        }
    }

    #[test]
    fn stationary_variance_closed_form() {
        assert!((stationary_variance(1.0, 1.0, 0.1) - 0.1 / 1.9).abs() < 1e-15);
        let p = QuadProblem { spectrum: vec![1.0], w_star: vec![0.0], noise_var: 1.0, w0: vec![0.0] };
        let c = exact_risk(&p, &Schedule::constant(0.1, 500), 500).unwrap();
        assert!((c.expected_error[500] - 0.1 / 1.9).abs() < 1e-12);
        let ratio = stationary_variance(1.0, 1.0, 0.02) / stationary_variance(1.0, 1.0, 0.01);
        assert!((1.9..=2.1).contains(&ratio));
    }

    #[test]
    fn instability_is_rejected() {
        let p = QuadProblem { spectrum: vec![4.0], w_star: vec![0.0], noise_var: 1.0, w0: vec![1.0] };
        assert!(exact_risk(&p, &Schedule::constant(0.5, 5), 5).is_err());
        assert!(exact_risk(&p, &Schedule::constant(0.49, 5), 5).is_ok());
    }

    #[test]
    fn noiseless_simulation_is_exact() {
        let mut p = default_problems()[0].clone();
        p.noise_var = 0.0;
        let sched = Schedule::cosine_warmup(0.5, 200, 10, 0.1);
        let exact = exact_risk(&p, &sched, 200).unwrap();
        let sim = simulate_sgd(&p, &sched, 200, 3, 1).unwrap();
        for t in 0..=200 {
            assert!((sim.mean[t] - exact.expected_error[t]).abs() <= 1e-12 * exact.expected_error[t].max(1.0));
        }
    }

    #[test]
    fn equivalence_without_decay_is_trivial() {
        let p = default_problems()[0].clone();
        let r = effective_lr_equivalence_demo(&p, 0.2, 0.0, 300, 0.5).unwrap();
        assert_eq!(r.terminal_a, r.terminal_b);
        assert!((r.terminal_c - r.terminal_a).abs() <= 1e-12 * r.terminal_a);
        assert!(!r.contract_applies);
    }

    #[test]
    fn risk_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("risk.csv");
        let p = default_problems()[1].clone();
        let s = Schedule::constant(0.1, 3);
        let exact = exact_risk(&p, &s, 3).unwrap();
        let emp = simulate_sgd(&p, &s, 3, 4, 0).unwrap();
        write_risk_csv(&path, &exact, Some(&emp)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,exact_total,bias,variance,empirical_mean,empirical_stderr");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,0.0,0.0,0.0,"));
    }
}
