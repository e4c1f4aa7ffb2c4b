//! Update rules and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::tensor::FlatVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    StepDecay,
    CosineWarmup,
}

/// Learning rate as a function of the step index within a phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: usize,
    /// `cosine_warmup` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    /// `cosine_warmup` only: terminal LR as a fraction of `base_lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_ratio: Option<f64>,
    /// `step_decay` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_step: Option<usize>,
    /// `step_decay` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_decay_lr: Option<f64>,
}

impl Schedule {
    pub fn constant(base_lr: f64, total_steps: usize) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            base_lr,
            total_steps,
            warmup_steps: None,
            floor_ratio: None,
            decay_step: None,
            post_decay_lr: None,
        }
    }

    pub fn step_decay(base_lr: f64, total_steps: usize, decay_step: usize, post_decay_lr: f64) -> Self {
        Schedule {
            kind: ScheduleKind::StepDecay,
            decay_step: Some(decay_step),
            post_decay_lr: Some(post_decay_lr),
            ..Schedule::constant(base_lr, total_steps)
        }
    }

    pub fn cosine_warmup(base_lr: f64, total_steps: usize, warmup_steps: usize, floor_ratio: f64) -> Self {
        Schedule {
            kind: ScheduleKind::CosineWarmup,
            warmup_steps: Some(warmup_steps),
            floor_ratio: Some(floor_ratio),
            ..Schedule::constant(base_lr, total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(invalid("base_lr must be positive"));
        }
        if self.total_steps == 0 {
            return Err(invalid("total_steps must be positive"));
        }
        match self.kind {
            ScheduleKind::Constant => Ok(()),
            ScheduleKind::StepDecay => {
                self.decay_step.ok_or_else(|| invalid("step_decay needs decay_step"))?;
                match self.post_decay_lr {
                    Some(lr) if lr > 0.0 => Ok(()),
                    _ => Err(invalid("step_decay needs a positive post_decay_lr")),
                }
            }
            ScheduleKind::CosineWarmup => {
                let w = self.warmup_steps.ok_or_else(|| invalid("cosine_warmup needs warmup_steps"))?;
                if w >= self.total_steps {
                    return Err(invalid("warmup_steps must be below total_steps"));
                }
                match self.floor_ratio {
                    Some(r) if r > 0.0 && r <= 1.0 => Ok(()),
                    _ => Err(invalid("cosine_warmup needs floor_ratio in (0, 1]")),
                }
            }
        }
    }

    /// Learning rate at step `t`, `0 <= t < total_steps`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t >= self.total_steps {
            return Err(invalid(format!("step {t} outside schedule of {} steps", self.total_steps)));
        }
        self.validate()?;
        let base = self.base_lr;
        Ok(match self.kind {
            ScheduleKind::Constant => base,
            ScheduleKind::StepDecay => {
                if t < self.decay_step.unwrap() {
                    base
                } else {
                    self.post_decay_lr.unwrap()
                }
            }
            ScheduleKind::CosineWarmup => {
                let w = self.warmup_steps.unwrap();
                let floor = self.floor_ratio.unwrap() * base;
                if w > 0 && t < w {
                    // linear from base / w at t = 0 to base at t = w
                    let start = base / w as f64;
                    start + (base - start) * t as f64 / w as f64
                } else {
                    let span = self.total_steps - 1 - w;
                    if span == 0 {
                        base
                    } else {
                        let p = (t - w) as f64 / span as f64;
                        floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                    }
                }
            }
        })
    }
}

/// Plain-SGD regularization variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgdVariant {
    /// `lambda / 2 * ||w||^2` added to the loss.
    CoupledL2,
    /// Multiplicative shrink applied outside the loss gradient.
    Decoupled,
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected: a, got: b })
    }
}

fn check_lr(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("learning rate must be positive, got {eta}")))
    }
}

fn sgd_into(w: &mut [f64], g: &[f64], eta: f64, lambda: &[f64]) {
    // For plain SGD the coupled gradient g + lambda w and the decoupled
    // shrink give the same map; both evaluate this expression.
    for ((wi, gi), li) in w.iter_mut().zip(g).zip(lambda) {
        *wi = *wi * (1.0 - eta * li) - eta * gi;
    }
}

/// `w' = w(1 - eta lambda) - eta g`.
pub fn step_sgd(w: &[f64], g: &[f64], eta: f64, lambda: f64, variant: SgdVariant) -> Result<FlatVector> {
    check_dims(w.len(), g.len())?;
    check_lr(eta)?;
    let _ = variant;
    let mut out = w.to_vec();
    sgd_into(&mut out, g, eta, &vec![lambda; w.len()]);
    Ok(out)
}

/// Slack allowed on `| ||w|| - 1 |` for a point to count as on the sphere.
pub const SPHERE_TOL: f64 = 4.0 * f64::EPSILON;

/// Project onto the unit sphere. Points already within [`SPHERE_TOL`] are returned unchanged.
pub fn project_sphere(v: &[f64]) -> Result<FlatVector> {
    let n = linalg::norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(invalid("cannot project a zero or non-finite vector onto the sphere"));
    }
    if (n - 1.0).abs() <= SPHERE_TOL {
        return Ok(v.to_vec());
    }
    let mut u: Vec<f64> = v.iter().map(|x| x / n).collect();
    let m = linalg::norm(&u);
    if (m - 1.0).abs() > SPHERE_TOL {
        for x in &mut u {
            *x /= m;
        }
    }
    Ok(u)
}

/// Projected step `w' = (w - eta g) / ||w - eta g||` for `||w|| = 1`.
pub fn step_sphere(w: &[f64], g: &[f64], eta: f64) -> Result<FlatVector> {
    check_dims(w.len(), g.len())?;
    check_lr(eta)?;
    let n = linalg::norm(w);
    if (n - 1.0).abs() > 1e-12 {
        return Err(invalid(format!("sphere step needs a unit-norm iterate, got norm {n}")));
    }
    let mut v = w.to_vec();
    linalg::axpy(-eta, g, &mut v);
    project_sphere(&v)
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn signgd_into(w: &mut [f64], g: &[f64], eta: f64, lambda: &[f64]) {
    for ((wi, gi), li) in w.iter_mut().zip(g).zip(lambda) {
        *wi = (1.0 - eta * li) * *wi - eta * sign(*gi);
    }
}

/// `w' = (1 - eta lambda) w - eta sign(g)`, with `sign(0) = 0`.
pub fn step_signgd(w: &[f64], g: &[f64], eta: f64, lambda: f64) -> Result<FlatVector> {
    check_dims(w.len(), g.len())?;
    check_lr(eta)?;
    if eta * lambda >= 1.0 {
        return Err(invalid(format!("eta * lambda = {} >= 1 collapses the norm", eta * lambda)));
    }
    let mut out = w.to_vec();
    signgd_into(&mut out, g, eta, &vec![lambda; w.len()]);
    Ok(out)
}

/// Per-trajectory optimizer buffers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_buf: Option<FlatVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_moment: Option<FlatVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_moment: Option<FlatVector>,
    pub step_count: u64,
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

fn adamw_into(w: &mut [f64], g: &[f64], state: &mut OptState, eta: f64, lambda: &[f64], hp: AdamParams) {
    let dim = w.len();
    let m = state.first_moment.get_or_insert_with(|| vec![0.0; dim]);
    let v = state.second_moment.get_or_insert_with(|| vec![0.0; dim]);
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..dim {
        w[i] *= 1.0 - eta * lambda[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        w[i] -= eta * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// One AdamW step: decoupled shrink `w(1 - eta lambda)`, then the bias-corrected adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn step_adamw(
    w: &[f64],
    g: &[f64],
    state: &OptState,
    eta: f64,
    lambda: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(FlatVector, OptState)> {
    check_dims(w.len(), g.len())?;
    check_lr(eta)?;
    check_state(state, w.len())?;
    let mut out = w.to_vec();
    let mut st = state.clone();
    adamw_into(&mut out, g, &mut st, eta, &vec![lambda; w.len()], AdamParams { beta1, beta2, eps });
    check_moments(&st)?;
    Ok((out, st))
}

fn momentum_into(w: &mut [f64], g: &[f64], state: &mut OptState, eta: f64, lambda: &[f64], mu: f64) {
    let dim = w.len();
    let buf = state.momentum_buf.get_or_insert_with(|| vec![0.0; dim]);
    state.step_count += 1;
    for i in 0..dim {
        buf[i] = mu * buf[i] + g[i] + lambda[i] * w[i];
        w[i] -= eta * buf[i];
    }
}

/// Heavy-ball step: `buf = mu buf + g + lambda w`, `w' = w - eta buf`.
pub fn step_momentum(
    w: &[f64],
    g: &[f64],
    state: &OptState,
    eta: f64,
    lambda: f64,
    mu: f64,
) -> Result<(FlatVector, OptState)> {
    check_dims(w.len(), g.len())?;
    check_lr(eta)?;
    check_state(state, w.len())?;
    let mut out = w.to_vec();
    let mut st = state.clone();
    momentum_into(&mut out, g, &mut st, eta, &vec![lambda; w.len()], mu);
    Ok((out, st))
}

fn check_state(state: &OptState, dim: usize) -> Result<()> {
    for buf in [&state.momentum_buf, &state.first_moment, &state.second_moment].into_iter().flatten() {
        check_dims(dim, buf.len())?;
    }
    Ok(())
}

fn check_moments(state: &OptState) -> Result<()> {
    for buf in [&state.first_moment, &state.second_moment].into_iter().flatten() {
        if buf.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { step: state.step_count as usize });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain SGD, no regularization.
    Sgd,
    SgdL2,
    SgdDecoupledWd,
    SgdMomentum,
    Signgd,
    SigngdWd,
    Adamw,
    /// Projected SGD on the unit sphere.
    SphereSgd,
}

impl OptimizerKind {
    pub fn uses_weight_decay(self) -> bool {
        matches!(
            self,
            OptimizerKind::SgdL2
                | OptimizerKind::SgdDecoupledWd
                | OptimizerKind::SgdMomentum
                | OptimizerKind::SigngdWd
                | OptimizerKind::Adamw
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lambda_wd: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Apply decay to normalization gains and shifts too.
    pub decay_layernorm_params: bool,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lambda_wd: f64) -> Self {
        OptimizerConfig {
            kind,
            lambda_wd,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            decay_layernorm_params: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_wd >= 0.0) {
            return Err(invalid("lambda_wd must be non-negative"));
        }
        if !self.kind.uses_weight_decay() && self.lambda_wd != 0.0 {
            return Err(invalid(format!("{:?} takes no weight decay; set lambda_wd to 0", self.kind)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// Stateful optimizer applying one [`OptimizerConfig`] to a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// Per-coordinate decay strength.
    decay: FlatVector,
    state: OptState,
}

impl Optimizer {
    /// `mask` holds 1 for decayed coordinates and 0 for exempt ones.
    pub fn new(config: OptimizerConfig, mask: &[f64]) -> Result<Self> {
        config.validate()?;
        let decay = mask.iter().map(|m| m * config.lambda_wd).collect();
        Ok(Optimizer { config, decay, state: OptState::default() })
    }

    pub fn with_state(config: OptimizerConfig, mask: &[f64], state: OptState) -> Result<Self> {
        check_state(&state, mask.len())?;
        let mut opt = Optimizer::new(config, mask)?;
        opt.state = state;
        Ok(opt)
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptState {
        &self.state
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    /// Apply one update in place.
    pub fn step(&mut self, w: &mut [f64], g: &[f64], eta: f64) -> Result<()> {
        check_dims(self.decay.len(), w.len())?;
        check_dims(w.len(), g.len())?;
        check_lr(eta)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { step: self.state.step_count as usize });
        }
        let cfg = &self.config;
        match cfg.kind {
            OptimizerKind::Sgd | OptimizerKind::SgdL2 | OptimizerKind::SgdDecoupledWd => {
                sgd_into(w, g, eta, &self.decay);
                self.state.step_count += 1;
            }
            OptimizerKind::SgdMomentum => momentum_into(w, g, &mut self.state, eta, &self.decay, cfg.momentum),
            OptimizerKind::Signgd | OptimizerKind::SigngdWd => {
                if self.decay.iter().any(|l| eta * l >= 1.0) {
                    return Err(invalid("eta * lambda >= 1 collapses the norm"));
                }
                signgd_into(w, g, eta, &self.decay);
                self.state.step_count += 1;
            }
            OptimizerKind::Adamw => {
                let hp = AdamParams { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps };
                adamw_into(w, g, &mut self.state, eta, &self.decay, hp);
                check_moments(&self.state)?;
            }
            OptimizerKind::SphereSgd => {
                let next = step_sphere(w, g, eta)?;
                w.copy_from_slice(&next);
                self.state.step_count += 1;
            }
        }
        Ok(())
    }
}
