//! Config-driven training runs, snapshots, fine-tuning and sweeps.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradient;
use crate::data::{generate, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{build_mlp, DataBatch, Labels, LossKind, MLPSpec, Mlp, Model, Normalization};
use crate::optim::{step_sphere, OptState, Optimizer, OptimizerConfig, OptimizerKind, Schedule};
use crate::precision::{quantize_slice, MixedPrecisionPolicy, NumericMode};
use crate::probes::{
    detect_divergence, detect_stabilization, effective_lr, ema_update, hutchinson_trace, noise_scale, tail_average,
    AveragerState, Estimate, Flag, ProbeRecord,
};
use crate::stats::spearman;
use crate::tensor::{FlatVector, ParamSet};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub steps: usize,
    /// Schedule over this phase; its `total_steps` must equal `steps`.
    pub schedule: Schedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
}

/// What gets measured at each probe step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Hutchinson probes per trace estimate (0 disables the trace).
    pub trace_probes: usize,
    /// Training examples used for noise scale and trace (0 disables the noise scale).
    pub probe_subset: usize,
    pub divergence_factor: f64,
    pub divergence_persist: usize,
    pub stabilization_window: usize,
    pub stabilization_band: f64,
    pub ema_beta: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            trace_probes: 0,
            probe_subset: 512,
            divergence_factor: 10.0,
            divergence_persist: 3,
            stabilization_window: 10,
            stabilization_band: 0.1,
            ema_beta: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: MLPSpec,
    pub optimizer: OptimizerConfig,
    pub precision: MixedPrecisionPolicy,
    pub phases: Vec<Phase>,
    pub probes_every: usize,
    /// 0 disables snapshots.
    pub snapshot_every: usize,
    pub finetune: Option<FinetuneConfig>,
    pub seed: u64,
    pub batch_size: usize,
    pub probes: ProbeConfig,
}

impl RunConfig {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => config_err(other.to_string()),
        };
        self.task.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.optimizer.validate().map_err(wrap)?;
        if self.phases.is_empty() {
            return Err(config_err("phases must be non-empty"));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.steps == 0 || p.schedule.total_steps != p.steps {
                return Err(config_err(format!("phase {i}: schedule.total_steps must equal steps and be positive")));
            }
            p.schedule.validate().map_err(wrap)?;
        }
        if self.probes_every == 0 {
            return Err(config_err("probes_every must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        let widths = &self.model.layer_widths;
        if widths[0] != self.task.dim {
            return Err(config_err(format!("model input width {} != task dim {}", widths[0], self.task.dim)));
        }
        let out = *widths.last().unwrap();
        match (self.task.kind, self.model.loss) {
            (TaskKind::Linreg, LossKind::Squared) if out == 1 => {}
            (TaskKind::GaussBlobs | TaskKind::Spiral, LossKind::CrossEntropy) if out == self.task.classes => {}
            (TaskKind::GaussBlobs | TaskKind::Spiral, LossKind::Bce) if self.task.classes == 2 => {}
            (kind, loss) => {
                return Err(config_err(format!("{loss:?} with {out} outputs does not fit task {kind:?}")));
            }
        }
        if self.optimizer.kind == OptimizerKind::SphereSgd && !self.precision.master_weights_full {
            return Err(config_err("sphere_sgd needs full-precision master weights"));
        }
        if let Some(ft) = &self.finetune {
            if !(ft.lr > 0.0) {
                return Err(config_err("finetune.lr must be positive"));
            }
        }
        let p = &self.probes;
        if !(p.divergence_factor > 1.0) || p.divergence_persist == 0 {
            return Err(config_err("divergence_factor must exceed 1 and divergence_persist be at least 1"));
        }
        if p.stabilization_window < 2 || !(p.stabilization_band >= 0.0) {
            return Err(config_err("stabilization_window must be at least 2 and the band non-negative"));
        }
        if !(0.0..=1.0).contains(&p.ema_beta) {
            return Err(config_err("ema_beta must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate of step `t`; steps past the end use the final rate.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        let mut start = 0;
        for p in &self.phases {
            if t < start + p.steps {
                return p.schedule.lr_at(t - start);
            }
            start += p.steps;
        }
        let last = self.phases.last().ok_or_else(|| config_err("no phases"))?;
        last.schedule.lr_at(last.steps - 1)
    }

    fn last_phase_start(&self) -> usize {
        self.total_steps() - self.phases.last().map_or(0, |p| p.steps)
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Restorable mid-run state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub step: usize,
    pub params: ParamSet,
    pub opt_state: OptState,
    pub averager: AveragerState,
    /// Train losses probed before `step`, needed by the detectors.
    #[serde(with = "nullable_vec")]
    pub loss_history: Vec<f64>,
}

mod nullable_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(xs.iter().map(|x| x.is_finite().then_some(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

/// End-of-run metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_completed: usize,
    pub diverged: bool,
    pub divergence_onset: Option<usize>,
    #[serde(with = "crate::probes::nullable")]
    pub final_train_loss: f64,
    #[serde(with = "crate::probes::nullable")]
    pub final_test_metric: f64,
    #[serde(with = "crate::probes::nullable")]
    pub final_param_norm: f64,
    pub ema_test_metric: Option<f64>,
    pub tail_test_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub records: Vec<ProbeRecord>,
    pub snapshots: Vec<Snapshot>,
    pub final_params: ParamSet,
    pub averager: AveragerState,
    pub summary: RunSummary,
}

/// Model, data and initial parameters materialized from a config.
pub struct Experiment {
    pub config: RunConfig,
    pub model: Mlp,
    pub init: ParamSet,
    pub train: DataBatch,
    pub test: DataBatch,
    /// Leading training examples used by the noise and curvature probes.
    pub probe_batch: DataBatch,
    pub mask: FlatVector,
}

impl Experiment {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = generate(&config.task)?;
        let (model, mut init) = build_mlp(&config.model, config.seed)?;
        if config.optimizer.kind == OptimizerKind::SphereSgd {
            let w = crate::optim::project_sphere(&init.flatten())?;
            init.unflatten(&w)?;
        }
        let weight_mode = config.precision.weight_mode();
        if !weight_mode.is_full() {
            let mut w = init.flatten();
            quantize_slice(&mut w, weight_mode);
            init.unflatten(&w)?;
        }
        let subset = if config.probes.probe_subset == 0 { train.len() } else { config.probes.probe_subset };
        let probe_batch = train.head(subset.min(train.len()));
        let mask = init.decay_mask(config.optimizer.decay_layernorm_params);
        Ok(Experiment { config: config.clone(), model, init, train, test, probe_batch, mask })
    }

    pub fn initial_snapshot(&self) -> Result<Snapshot> {
        Ok(Snapshot {
            step: 0,
            params: self.init.clone(),
            opt_state: OptState::default(),
            averager: AveragerState::new(self.config.probes.ema_beta)?,
            loss_history: Vec::new(),
        })
    }

    /// Test error rate for classification, mean squared error for regression.
    pub fn test_metric(&self, params: &ParamSet, policy: &MixedPrecisionPolicy) -> Result<f64> {
        metric(&self.model, params, &self.test, policy)
    }
}

/// Error rate (classification) or mean squared error (regression) on `data`.
pub fn metric(model: &Mlp, params: &ParamSet, data: &DataBatch, policy: &MixedPrecisionPolicy) -> Result<f64> {
    let out = model.predict(params, &data.inputs, policy)?;
    let n = data.len();
    match &data.labels {
        Labels::Classes(c) => {
            let mut wrong = 0usize;
            for (i, &y) in c.iter().enumerate() {
                let row = out.row_slice(i);
                let pred = if row.len() == 1 {
                    usize::from(row[0] > 0.0)
                } else {
                    let mut best = 0;
                    for j in 1..row.len() {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    best
                };
                if pred != y || row.iter().any(|v| !v.is_finite()) {
                    wrong += 1;
                }
            }
            Ok(wrong as f64 / n as f64)
        }
        Labels::Targets(t) => {
            let se: f64 = out.data().iter().zip(t.data()).map(|(p, y)| (p - y) * (p - y)).sum();
            Ok(se / t.len() as f64)
        }
    }
}

const BATCH_SALT: u64 = 0x6261_7463_6800_0000;
const TRACE_SALT: u64 = 0x7472_6163_6500_0000;

/// Minibatch indices of step `t`, uniform with replacement.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_SALT);
    rng.set_stream(step as u64);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn trace_seed(seed: u64, step: usize) -> u64 {
    seed ^ TRACE_SALT ^ (step as u64).rotate_left(17)
}

fn diverged_record(step: usize, loss: f64, params: &ParamSet) -> ProbeRecord {
    ProbeRecord {
        step,
        train_loss: loss,
        reg_loss: f64::NAN,
        test_metric: f64::NAN,
        param_norm: params.norm(),
        grad_norm: f64::NAN,
        noise_scale: None,
        eff_lr: None,
        trace_estimate: None,
        flags: vec![Flag::Diverged],
    }
}

struct Probed {
    record: ProbeRecord,
    onset: Option<usize>,
}

fn probe(exp: &Experiment, params: &ParamSet, opt: &Optimizer, step: usize, history: &mut Vec<f64>) -> Result<Probed> {
    let cfg = &exp.config;
    let policy = cfg.precision;
    let fwd = exp.model.forward(params, &exp.train, &policy)?;
    let train_loss = fwd.loss;
    history.push(train_loss);
    let w = params.flatten();
    let decay_sq: f64 = w.iter().zip(opt.decay()).map(|(x, l)| l * x * x).sum();
    let grad_norm = if fwd.non_finite() {
        f64::NAN
    } else {
        gradient(&fwd.tape, params).map(|g| linalg::norm(&g)).unwrap_or(f64::NAN)
    };
    let param_norm = linalg::norm(&w);
    let finite = train_loss.is_finite() && params.all_finite();
    let eta = cfg.lr_at(step)?;
    let p = &cfg.probes;
    let noise = if finite && p.probe_subset > 0 {
        Some(noise_scale(&exp.model, params, &exp.probe_batch)?)
    } else {
        None
    };
    let trace = if finite && p.trace_probes > 0 {
        Some(hutchinson_trace(&exp.model, params, &exp.probe_batch, p.trace_probes, trace_seed(cfg.seed, step))?)
    } else {
        None
    };
    let mut flags = Vec::new();
    if detect_stabilization(history, p.stabilization_window, p.stabilization_band)? {
        flags.push(Flag::Stabilized);
    }
    let div = detect_divergence(history, p.divergence_factor, p.divergence_persist)?;
    if div.flagged || !finite {
        flags.push(Flag::Diverged);
    }
    let onset = if div.flagged {
        div.onset.map(|i| i * cfg.probes_every)
    } else if !finite {
        Some(step)
    } else {
        None
    };
    Ok(Probed {
        record: ProbeRecord {
            step,
            train_loss,
            reg_loss: train_loss + 0.5 * decay_sq,
            test_metric: exp.test_metric(params, &policy)?,
            param_norm,
            grad_norm,
            noise_scale: noise,
            eff_lr: effective_lr(eta, cfg.optimizer.lambda_wd, param_norm).ok(),
            trace_estimate: trace,
            flags,
        },
        onset,
    })
}

/// Run `config` from scratch.
pub fn run(config: &RunConfig) -> Result<RunRecord> {
    let exp = Experiment::new(config)?;
    let start = exp.initial_snapshot()?;
    run_from(&exp, start)
}

/// Continue a run from `snapshot`; records cover steps from `snapshot.step` on.
pub fn resume(config: &RunConfig, snapshot: &Snapshot) -> Result<RunRecord> {
    let exp = Experiment::new(config)?;
    run_from(&exp, snapshot.clone())
}

pub fn run_from(exp: &Experiment, start: Snapshot) -> Result<RunRecord> {
    let cfg = &exp.config;
    let total = cfg.total_steps();
    if start.step > total {
        return Err(config_err(format!("snapshot step {} beyond run length {total}", start.step)));
    }
    let policy = cfg.precision;
    let weight_mode = policy.weight_mode();
    let mut params = start.params;
    let mut opt = Optimizer::with_state(cfg.optimizer.clone(), &exp.mask, start.opt_state)?;
    let mut averager = start.averager;
    let mut history = start.loss_history;
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut onset = None;
    let tail_start = if cfg.phases.len() > 1 { Some(cfg.last_phase_start()) } else { None };
    let mut t = start.step;
    loop {
        if cfg.snapshot_every > 0 && t.is_multiple_of(cfg.snapshot_every) {
            snapshots.push(Snapshot {
                step: t,
                params: params.clone(),
                opt_state: opt.state().clone(),
                averager: averager.clone(),
                loss_history: history.clone(),
            });
        }
        if t.is_multiple_of(cfg.probes_every) {
            let probed = probe(exp, &params, &opt, t, &mut history)?;
            records.push(probed.record);
            if probed.onset.is_some() {
                onset = probed.onset;
                break;
            }
        }
        if t == total {
            break;
        }
        if tail_start == Some(t) {
            averager.enable_tail();
        }
        let batch = exp.train.select(&batch_indices(cfg.seed, t, exp.train.len(), cfg.batch_size));
        let fwd = exp.model.forward(&params, &batch, &policy)?;
        if fwd.non_finite() {
            records.push(diverged_record(t, fwd.loss, &params));
            onset = Some(t);
            break;
        }
        let g = gradient(&fwd.tape, &params)?;
        let mut w = params.flatten();
        match opt.step(&mut w, &g, cfg.lr_at(t)?) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { .. }) => {
                records.push(diverged_record(t, fwd.loss, &params));
                onset = Some(t);
                break;
            }
            Err(e) => return Err(e),
        }
        quantize_slice(&mut w, weight_mode);
        if w.iter().any(|x| !x.is_finite()) {
            params.unflatten(&w)?;
            records.push(diverged_record(t + 1, f64::NAN, &params));
            onset = Some(t + 1);
            break;
        }
        params.unflatten(&w)?;
        averager = ema_update(&averager, &w)?;
        t += 1;
    }
    let summary = summarize(exp, &params, &averager, t, onset)?;
    Ok(RunRecord { records, snapshots, final_params: params, averager, summary })
}

fn summarize(exp: &Experiment, params: &ParamSet, averager: &AveragerState, steps: usize, onset: Option<usize>) -> Result<RunSummary> {
    let policy = exp.config.precision;
    let loss = exp.model.forward(params, &exp.train, &policy)?.loss;
    let averaged_metric = |w: &[f64]| -> Result<Option<f64>> {
        let p = params.with_flat(w)?;
        Ok(Some(exp.test_metric(&p, &policy)?))
    };
    let ema_test_metric = match &averager.ema {
        Some(w) if onset.is_none() => averaged_metric(w)?,
        _ => None,
    };
    let tail_test_metric = match tail_average(averager) {
        Ok(w) if onset.is_none() => averaged_metric(&w)?,
        _ => None,
    };
    Ok(RunSummary {
        steps_completed: steps,
        diverged: onset.is_some(),
        divergence_onset: onset,
        final_train_loss: loss,
        final_test_metric: exp.test_metric(params, &policy)?,
        final_param_norm: params.norm(),
        ema_test_metric,
        tail_test_metric,
    })
}

fn snapshot_name(step: usize) -> String {
    format!("step_{step:08}.json")
}

/// Write `config.json`, `probes.jsonl`, `summary.json` and `snapshots/` under `dir`.
pub fn write_run_dir(dir: &Path, config: &RunConfig, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir.join("snapshots"))?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    write_probes(&dir.join("probes.jsonl"), &record.records)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&record.summary)? + "\n")?;
    for s in &record.snapshots {
        std::fs::write(dir.join("snapshots").join(snapshot_name(s.step)), serde_json::to_string(s)? + "\n")?;
    }
    Ok(())
}

pub fn write_probes(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_probes(path: &Path) -> Result<Vec<ProbeRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Snapshots of a run directory in step order.
pub fn read_snapshots(dir: &Path) -> Result<Vec<Snapshot>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.join("snapshots"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)).collect()
}

/// One fine-tuned snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub step: usize,
    #[serde(with = "crate::probes::nullable")]
    pub train_loss: f64,
    #[serde(with = "crate::probes::nullable")]
    pub test_metric: f64,
    pub trace: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub ft_steps: usize,
    pub ft_lr: f64,
    pub rows: Vec<FinetuneRow>,
    /// Rank correlation of step against fine-tuned trace.
    pub trace_step_spearman: Option<f64>,
}

/// Default probe count when the run itself did not estimate traces.
pub const FINETUNE_TRACE_PROBES: usize = 20;

/// Project each snapshot to a nearby low-loss point with `ft_steps` of full-batch
/// gradient descent (no weight decay) and measure loss, test metric and trace there.
pub fn finetune_along_trajectory(config: &RunConfig, snapshots: &[Snapshot], ft_steps: usize, ft_lr: f64) -> Result<FinetuneReport> {
    if snapshots.len() < 2 {
        return Err(config_err("fine-tuning needs at least two snapshots"));
    }
    if !(ft_lr > 0.0) {
        return Err(config_err("fine-tune lr must be positive"));
    }
    let exp = Experiment::new(config)?;
    let probes = if config.probes.trace_probes > 0 { config.probes.trace_probes } else { FINETUNE_TRACE_PROBES };
    let sphere = config.optimizer.kind == OptimizerKind::SphereSgd;
    let full = MixedPrecisionPolicy::FULL;
    let rows: Vec<FinetuneRow> = snapshots
        .par_iter()
        .map(|snap| -> Result<FinetuneRow> {
            let mut params = snap.params.clone();
            let mut w = params.flatten();
            for _ in 0..ft_steps {
                let fwd = exp.model.forward(&params, &exp.train, &full)?;
                if fwd.non_finite() {
                    break;
                }
                let g = gradient(&fwd.tape, &params)?;
                if sphere {
                    w = step_sphere(&w, &g, ft_lr)?;
                } else {
                    linalg::axpy(-ft_lr, &g, &mut w);
                }
                params.unflatten(&w)?;
            }
            let train_loss = exp.model.forward(&params, &exp.train, &full)?.loss;
            let trace = if train_loss.is_finite() {
                hutchinson_trace(&exp.model, &params, &exp.probe_batch, probes, trace_seed(config.seed, usize::MAX))?
            } else {
                Estimate { value: f64::NAN, stderr: f64::NAN }
            };
            Ok(FinetuneRow { step: snap.step, train_loss, test_metric: exp.test_metric(&params, &full)?, trace })
        })
        .collect::<Result<_>>()?;
    let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let traces: Vec<f64> = rows.iter().map(|r| r.trace.value).collect();
    Ok(FinetuneReport { ft_steps, ft_lr, trace_step_spearman: spearman(&steps, &traces).ok(), rows })
}

/// Values swept per axis; an empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub lambda_wd: Vec<f64>,
    #[serde(default)]
    pub precision: Vec<NumericMode>,
    #[serde(default)]
    pub seed: Vec<u64>,
}

impl GridSpec {
    /// Parse `lr=0.1,0.2;lambda_wd=0,0.1;precision=bf16;seed=0,1` or a JSON object.
    pub fn parse(text: &str) -> Result<GridSpec> {
        let text = text.trim();
        if text.starts_with('{') {
            return serde_json::from_str(text).map_err(|e| config_err(format!("grid: {e}")));
        }
        let mut grid = GridSpec::default();
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part.split_once('=').ok_or_else(|| config_err(format!("grid: `{part}` lacks `=`")))?;
            let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            let bad = |v: &str| config_err(format!("grid: bad value `{v}` for {key}"));
            match key.trim() {
                "lr" => grid.lr = values.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                "lambda_wd" => {
                    grid.lambda_wd = values.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?
                }
                "precision" => {
                    grid.precision = values.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?
                }
                "seed" => grid.seed = values.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
                other => return Err(config_err(format!("grid: unknown axis `{other}`"))),
            }
        }
        if grid.lr.is_empty() && grid.lambda_wd.is_empty() && grid.precision.is_empty() && grid.seed.is_empty() {
            return Err(config_err("grid is empty"));
        }
        Ok(grid)
    }

    /// Cells in row-major order over (lr, lambda_wd, precision, seed).
    pub fn cells(&self, base: &RunConfig) -> Vec<Cell> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let lrs = or(&self.lr, base.phases[0].schedule.base_lr);
        let lambdas = or(&self.lambda_wd, base.optimizer.lambda_wd);
        let modes = if self.precision.is_empty() { vec![base.precision.compute_mode] } else { self.precision.clone() };
        let seeds = if self.seed.is_empty() { vec![base.seed] } else { self.seed.clone() };
        let mut out = Vec::new();
        for &lr in &lrs {
            for &lambda_wd in &lambdas {
                for &precision in &modes {
                    for &seed in &seeds {
                        out.push(Cell { lr, lambda_wd, precision, seed });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lr: f64,
    pub lambda_wd: f64,
    pub precision: NumericMode,
    pub seed: u64,
}

impl Cell {
    /// `base` with this cell's values; `lr` rescales every phase by the same factor.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let factor = self.lr / base.phases[0].schedule.base_lr;
        cfg.phases[0].schedule.base_lr = self.lr;
        for p in cfg.phases.iter_mut().skip(1) {
            p.schedule.base_lr *= factor;
            if let Some(post) = &mut p.schedule.post_decay_lr {
                *post *= factor;
            }
        }
        cfg.optimizer.lambda_wd = self.lambda_wd;
        cfg.precision.compute_mode = self.precision;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: Cell,
    /// `None` when the cell ran; the error text otherwise.
    pub error: Option<String>,
    pub summary: Option<RunSummary>,
}

/// Run every cell (in parallel) and collect rows in grid order.
pub fn sweep(base: &RunConfig, grid: &GridSpec) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(config_err("grid is empty"));
    }
    Ok(cells
        .par_iter()
        .map(|cell| match cell.apply(base).and_then(|cfg| run(&cfg)) {
            Ok(rec) => SweepRow { cell: *cell, error: None, summary: Some(rec.summary) },
            Err(e) => SweepRow { cell: *cell, error: Some(e.to_string()), summary: None },
        })
        .collect())
}

pub const SWEEP_HEADER: &str =
    "lr,lambda_wd,precision,seed,status,steps_completed,diverged,divergence_onset,final_train_loss,final_test_metric,final_param_norm";

fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        String::new()
    }
}

/// The sweep table as CSV; errors are recorded in `status`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let c = &r.cell;
        let head = format!("{:?},{:?},{},{}", c.lr, c.lambda_wd, c.precision, c.seed);
        let line = match (&r.summary, &r.error) {
            (Some(s), _) => format!(
                "{head},{},{},{},{},{},{},{}",
                if s.diverged { "diverged" } else { "ok" },
                s.steps_completed,
                s.diverged,
                s.divergence_onset.map(|v| v.to_string()).unwrap_or_default(),
                fmt_f(s.final_train_loss),
                fmt_f(s.final_test_metric),
                fmt_f(s.final_param_norm),
            ),
            (None, err) => {
                let msg = err.as_deref().unwrap_or("error").replace([',', '\n'], ";");
                format!("{head},error: {msg},,,,,,")
            }
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Spiral classification with a large-LR phase followed by a small-LR phase.
pub fn default_spiral_config(seed: u64) -> RunConfig {
    let mut model = MLPSpec::new(vec![2, 32, 32, 2], LossKind::CrossEntropy);
    model.normalization = Normalization::None;
    RunConfig {
        task: TaskSpec { kind: TaskKind::Spiral, n_train: 256, dim: 2, classes: 2, noise_std: 0.2, seed: 1 },
        model,
        optimizer: OptimizerConfig::new(OptimizerKind::SgdDecoupledWd, 0.0005),
        precision: MixedPrecisionPolicy::FULL,
        phases: vec![
            Phase { steps: 2000, schedule: Schedule::constant(0.5, 2000) },
            Phase { steps: 500, schedule: Schedule::constant(0.05, 500) },
        ],
        probes_every: 100,
        snapshot_every: 200,
        finetune: Some(FinetuneConfig { steps: 200, lr: 0.05 }),
        seed,
        batch_size: 16,
        probes: ProbeConfig { probe_subset: 256, trace_probes: 10, ..ProbeConfig::default() },
    }
}

/// Deep residual network without normalization under pure bf16.
pub fn stress_config(seed: u64) -> RunConfig {
    let mut model = MLPSpec::new(vec![8, 32, 32, 32, 32, 32, 32, 2], LossKind::CrossEntropy);
    model.skip_connections = true;
    model.init_std = 0.5;
    RunConfig {
        task: TaskSpec { kind: TaskKind::GaussBlobs, n_train: 256, dim: 8, classes: 2, noise_std: 3.0, seed: 3 },
        model,
        optimizer: OptimizerConfig::new(OptimizerKind::SgdDecoupledWd, 0.1),
        precision: MixedPrecisionPolicy::pure(NumericMode::Bf16),
        phases: vec![Phase { steps: 200, schedule: Schedule::constant(0.1, 200) }],
        probes_every: 10,
        snapshot_every: 0,
        finetune: None,
        seed,
        batch_size: 32,
        probes: ProbeConfig { probe_subset: 0, ..ProbeConfig::default() },
    }
}
