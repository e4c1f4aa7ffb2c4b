//! Measurement machinery read off a parameter snapshot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, hvp, hvp_step};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{loss_bce, loss_bce_derivative, DataBatch, Labels, LossKind, Model};
use crate::precision::MixedPrecisionPolicy;
use crate::tensor::{FlatVector, ParamSet};

pub(crate) fn probe_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn rademacher(dim: usize, rng: &mut impl Rng) -> FlatVector {
    (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

pub fn gaussian(dim: usize, rng: &mut impl Rng) -> FlatVector {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(with = "nullable")]
    pub value: f64,
    #[serde(with = "nullable")]
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        Estimate { value: linalg::mean(samples), stderr: linalg::sample_std(samples) / (samples.len() as f64).sqrt() }
    }
}

/// Hutchinson estimate of `Tr(H)` from `k` Rademacher probes.
pub fn hutchinson_trace(model: &dyn Model, params: &ParamSet, batch: &DataBatch, k: usize, seed: u64) -> Result<Estimate> {
    if k == 0 {
        return Err(invalid("hutchinson_trace needs at least one probe"));
    }
    let dim = params.total_dim();
    let mut rng = probe_rng(seed, 0);
    let mut samples = Vec::with_capacity(k);
    for _ in 0..k {
        let v = rademacher(dim, &mut rng);
        let hv = hvp(model, params, batch, &v)?;
        samples.push(linalg::dot(&v, &hv));
    }
    Ok(Estimate::from_samples(&samples))
}

/// Gradient of each single-example loss, in dataset order.
pub fn per_example_gradients(model: &dyn Model, params: &ParamSet, data: &DataBatch) -> Result<Vec<FlatVector>> {
    let policy = MixedPrecisionPolicy::FULL;
    (0..data.len())
        .map(|i| {
            let f = model.forward(params, &data.example(i), &policy)?;
            gradient(&f.tape, params)
        })
        .collect()
}

pub fn mean_vector(vs: &[FlatVector]) -> FlatVector {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        linalg::axpy(1.0, v, &mut m);
    }
    let n = vs.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// `(1/n) sum_i ||g_i - mean(g)||^2`.
pub fn noise_scale_from_gradients(grads: &[FlatVector]) -> Result<f64> {
    if grads.len() < 2 {
        return Err(invalid("noise scale needs at least two examples"));
    }
    let g_bar = mean_vector(grads);
    let total: f64 = grads.iter().map(|g| linalg::norm_sq(&linalg::sub(g, &g_bar))).sum();
    Ok(total / grads.len() as f64)
}

/// Expected squared norm of single-sample SGD noise `E ||grad L - grad l_i||^2`,
/// by enumeration over the dataset.
pub fn noise_scale(model: &dyn Model, params: &ParamSet, data: &DataBatch) -> Result<f64> {
    noise_scale_from_gradients(&per_example_gradients(model, params, data)?)
}

/// `Sigma v = (1/n) sum_i g_i (g_i . v) - g_bar (g_bar . v)`.
pub fn covariance_vp(grads: &[FlatVector], v: &[f64]) -> FlatVector {
    let n = grads.len() as f64;
    let mut out = vec![0.0; v.len()];
    for g in grads {
        linalg::axpy(linalg::dot(g, v) / n, g, &mut out);
    }
    let g_bar = mean_vector(grads);
    linalg::axpy(-linalg::dot(&g_bar, v), &g_bar, &mut out);
    out
}

/// Average cosine between `H v` and `S v` over Gaussian probes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Monte-Carlo `E_v[cos(A v, B v)]` for Gaussian `v`; probes where either image vanishes are skipped.
pub fn cosine_similarity_mc(
    dim: usize,
    k: usize,
    seed: u64,
    mut apply_a: impl FnMut(&[f64]) -> Result<FlatVector>,
    mut apply_b: impl FnMut(&[f64]) -> Result<FlatVector>,
) -> Result<CosineEstimate> {
    if k == 0 {
        return Err(invalid("cosine similarity needs at least one probe"));
    }
    let mut rng = probe_rng(seed, 1);
    let mut samples = Vec::with_capacity(k);
    let mut skipped = 0;
    for _ in 0..k {
        let v = gaussian(dim, &mut rng);
        let a = apply_a(&v)?;
        let b = apply_b(&v)?;
        match linalg::cosine(&a, &b) {
            Some(c) => samples.push(c),
            None => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(invalid("every cosine probe produced a zero vector"));
    }
    let est = Estimate::from_samples(&samples);
    Ok(CosineEstimate { mean: est.value, stderr: est.stderr, used: samples.len(), skipped })
}

/// Cosine similarity between the Hessian and the SGD noise covariance.
pub fn cov_hessian_cosine(model: &dyn Model, params: &ParamSet, data: &DataBatch, k: usize, seed: u64) -> Result<CosineEstimate> {
    let grads = per_example_gradients(model, params, data)?;
    cosine_similarity_mc(
        params.total_dim(),
        k,
        seed,
        |v| hvp(model, params, data, v),
        |v| Ok(covariance_vp(&grads, v)),
    )
}

/// `H_l a` for the per-example loss Hessian with respect to outputs `o`.
fn output_hessian_vp(kind: LossKind, o: &[f64], a: &[f64]) -> FlatVector {
    match kind {
        LossKind::CrossEntropy => {
            let mx = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = o.iter().map(|z| (z - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / s).collect();
            let pa = linalg::dot(&p, a);
            p.iter().zip(a).map(|(pi, ai)| pi * ai - pi * pa).collect()
        }
        LossKind::Bce => {
            let s = 1.0 / (1.0 + (-o[0]).exp());
            vec![s * (1.0 - s) * a[0]]
        }
        LossKind::Squared => {
            let k = o.len() as f64;
            a.iter().map(|x| 2.0 / k * x).collect()
        }
    }
}

/// Gauss-Newton product `G v = (1/n) sum_i J_i^T H_l,i J_i v`.
///
/// `J_i v` comes from central differences of the outputs, `J_i^T u` from a
/// backward pass seeded at the output node.
pub fn gauss_newton_vp(model: &dyn Model, params: &ParamSet, batch: &DataBatch, v: &[f64]) -> Result<FlatVector> {
    let kind = model.loss_kind().ok_or_else(|| invalid("model exposes no per-example outputs"))?;
    let dim = params.total_dim();
    if v.len() != dim {
        return Err(Error::DimMismatch { expected: dim, got: v.len() });
    }
    let v_norm = linalg::norm(v);
    if v_norm == 0.0 {
        return Err(invalid("direction must be non-zero"));
    }
    let policy = MixedPrecisionPolicy::FULL;
    let w = params.flatten();
    let h = hvp_step(linalg::norm(&w), v_norm);
    let mut plus = w.clone();
    linalg::axpy(h, v, &mut plus);
    let mut minus = w;
    linalg::axpy(-h, v, &mut minus);
    let op = model.forward(&params.with_flat(&plus)?, batch, &policy)?;
    let om = model.forward(&params.with_flat(&minus)?, batch, &policy)?;
    let jv: Vec<f64> = op.outputs().data().iter().zip(om.outputs().data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();

    let fwd = model.forward(params, batch, &policy)?;
    let outputs = fwd.outputs();
    let (n, k) = (outputs.rows(), outputs.cols());
    let mut seed = Vec::with_capacity(n * k);
    for i in 0..n {
        let u = output_hessian_vp(kind, outputs.row_slice(i), &jv[i * k..(i + 1) * k]);
        seed.extend(u.into_iter().map(|x| x / n as f64));
    }
    let grads = fwd.tape.backward_from(fwd.output, &seed)?;
    fwd.tape.param_gradient(&grads, params)
}

/// Residual curvature `E v = H v - G v`.
pub fn residual_curvature_vp(model: &dyn Model, params: &ParamSet, batch: &DataBatch, v: &[f64]) -> Result<FlatVector> {
    let hv = hvp(model, params, batch, v)?;
    let gv = gauss_newton_vp(model, params, batch, v)?;
    Ok(linalg::sub(&hv, &gv))
}

/// `eta / ((1 - eta lambda) ||w||)`: step size of the direction `w / ||w||`.
pub fn effective_lr(eta: f64, lambda: f64, w_norm: f64) -> Result<f64> {
    if !(eta > 0.0) || !(lambda >= 0.0) {
        return Err(invalid("effective_lr needs eta > 0 and lambda >= 0"));
    }
    if eta * lambda >= 1.0 {
        return Err(invalid(format!("eta * lambda = {} must be below 1", eta * lambda)));
    }
    if !(w_norm > 0.0) || !w_norm.is_finite() {
        return Err(invalid(format!("parameter norm must be positive, got {w_norm}")));
    }
    Ok(eta / ((1.0 - eta * lambda) * w_norm))
}

/// Bounds of the noise-scale-to-loss ratio for binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLossBand {
    pub noise_scale: f64,
    pub train_loss: f64,
    /// `noise_scale / train_loss`.
    pub ratio: f64,
    /// min and max of `||grad_w h(w, x_i)||` over the data.
    pub grad_min: f64,
    pub grad_max: f64,
    /// min over the data of `l'^2 / l`.
    pub self_bound_min: f64,
}

impl NoiseLossBand {
    pub fn lower(&self) -> f64 {
        self.self_bound_min * self.grad_min * self.grad_min
    }

    pub fn upper(&self) -> f64 {
        self.grad_max * self.grad_max
    }

    pub fn contains_ratio(&self) -> bool {
        self.lower() <= self.ratio && self.ratio <= self.upper()
    }
}

/// Measure the noise scale of a scalar-output binary classifier together with
/// the data-dependent band `[c m^2, M^2]` it should fall into.
pub fn noise_loss_band(model: &dyn Model, params: &ParamSet, data: &DataBatch) -> Result<NoiseLossBand> {
    if model.loss_kind() != Some(LossKind::Bce) {
        return Err(invalid("noise/loss band applies to binary cross-entropy models"));
    }
    let Labels::Classes(labels) = &data.labels else {
        return Err(invalid("binary task needs class labels"));
    };
    let policy = MixedPrecisionPolicy::FULL;
    let mut grads = Vec::with_capacity(data.len());
    let (mut m, mut big_m, mut c) = (f64::INFINITY, 0.0f64, f64::INFINITY);
    let mut total_loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let f = model.forward(params, &data.example(i), &policy)?;
        let z = f.outputs().data()[0];
        let y = y as f64;
        let ell = loss_bce(z, y)?;
        let d = loss_bce_derivative(z, y);
        let out_grads = f.tape.backward_from(f.output, &[1.0])?;
        let dh = f.tape.param_gradient(&out_grads, params)?;
        let nh = linalg::norm(&dh);
        m = m.min(nh);
        big_m = big_m.max(nh);
        if ell > 0.0 {
            c = c.min(d * d / ell);
        }
        total_loss += ell;
        grads.push(linalg::scale(d, &dh));
    }
    let noise = noise_scale_from_gradients(&grads)?;
    let train_loss = total_loss / data.len() as f64;
    Ok(NoiseLossBand {
        noise_scale: noise,
        train_loss,
        ratio: noise / train_loss,
        grad_min: m,
        grad_max: big_m,
        self_bound_min: c,
    })
}

/// EMA and tail average of iterates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragerState {
    pub ema: Option<FlatVector>,
    pub beta: f64,
    pub tail_sum: Option<FlatVector>,
    pub tail_count: u64,
    pub tail_enabled: bool,
}

impl AveragerState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(invalid("EMA beta must lie in [0, 1]"));
        }
        Ok(AveragerState { ema: None, beta, tail_sum: None, tail_count: 0, tail_enabled: false })
    }

    /// Start accumulating the tail average from the next update on.
    pub fn enable_tail(&mut self) {
        self.tail_enabled = true;
    }
}

/// `ema = beta ema + (1 - beta) w`, initialized at the first `w`; adds `w` to the tail sum when enabled.
pub fn ema_update(state: &AveragerState, w: &[f64]) -> Result<AveragerState> {
    let mut next = state.clone();
    match &mut next.ema {
        None => next.ema = Some(w.to_vec()),
        Some(ema) => {
            if ema.len() != w.len() {
                return Err(Error::DimMismatch { expected: ema.len(), got: w.len() });
            }
            let b = state.beta;
            for (e, x) in ema.iter_mut().zip(w) {
                *e = b * *e + (1.0 - b) * x;
            }
        }
    }
    if next.tail_enabled {
        let sum = next.tail_sum.get_or_insert_with(|| vec![0.0; w.len()]);
        if sum.len() != w.len() {
            return Err(Error::DimMismatch { expected: sum.len(), got: w.len() });
        }
        linalg::axpy(1.0, w, sum);
        next.tail_count += 1;
    }
    Ok(next)
}

/// Mean of the iterates seen since the tail was enabled.
pub fn tail_average(state: &AveragerState) -> Result<FlatVector> {
    match (&state.tail_sum, state.tail_count) {
        (Some(sum), n) if n > 0 => Ok(linalg::scale(1.0 / n as f64, sum)),
        _ => Err(invalid("tail average requested before any averaged update")),
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The last `window` losses fit in a band of width `band * median`.
pub fn detect_stabilization(losses: &[f64], window: usize, band: f64) -> Result<bool> {
    if window < 2 {
        return Err(invalid("stabilization window must be at least 2"));
    }
    if losses.len() < window {
        return Ok(false);
    }
    let tail = &losses[losses.len() - window..];
    if tail.iter().any(|x| !x.is_finite()) {
        return Ok(false);
    }
    let mx = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(mx - mn <= band * median(tail).abs())
}

/// Outcome of [`detect_divergence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub flagged: bool,
    pub onset: Option<usize>,
}

/// First index where the loss reaches `factor` times the running minimum of the
/// preceding losses and stays at or above that bar for `persist` evaluations.
/// Non-finite losses count as above any bar.
pub fn detect_divergence(losses: &[f64], factor: f64, persist: usize) -> Result<Divergence> {
    if !(factor > 1.0) || persist == 0 {
        return Err(invalid("divergence needs factor > 1 and persist >= 1"));
    }
    let above = |x: f64, bar: f64| !x.is_finite() || x >= bar;
    let mut running_min = f64::INFINITY;
    for (i, &x) in losses.iter().enumerate() {
        if running_min.is_finite() {
            let bar = factor * running_min;
            if above(x, bar) && i + persist <= losses.len() && losses[i..i + persist].iter().all(|&y| above(y, bar)) {
                return Ok(Divergence { flagged: true, onset: Some(i) });
            }
        }
        if x.is_finite() {
            running_min = running_min.min(x);
        }
    }
    Ok(Divergence { flagged: false, onset: None })
}

/// `L(w) + lambda/2 ||w||^2 + eta sigma2 Tr(H)` with a Hutchinson trace.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_regularized_objective(
    model: &dyn Model,
    params: &ParamSet,
    data: &DataBatch,
    eta: f64,
    sigma2: f64,
    lambda: f64,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if !(sigma2 >= 0.0) || !(eta >= 0.0) || !(lambda >= 0.0) {
        return Err(invalid("eta, sigma2 and lambda must be non-negative"));
    }
    let f = model.forward(params, data, &MixedPrecisionPolicy::FULL)?;
    let reg = f.loss + 0.5 * lambda * linalg::norm_sq(&params.flatten());
    if eta == 0.0 || sigma2 == 0.0 {
        return Ok(reg);
    }
    let trace = hutchinson_trace(model, params, data, probes, seed)?;
    Ok(reg + eta * sigma2 * trace.value)
}

/// Regularization strength estimate: mean noise scale over the last `window` records.
pub fn estimate_sigma2(records: &[ProbeRecord], window: usize) -> Option<f64> {
    let vals: Vec<f64> = records.iter().filter_map(|r| r.noise_scale).filter(|v| v.is_finite()).collect();
    if vals.is_empty() || window == 0 {
        return None;
    }
    let tail = &vals[vals.len().saturating_sub(window)..];
    Some(linalg::mean(tail))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Stabilized,
    Diverged,
}

/// One row of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRecord {
    pub step: usize,
    #[serde(with = "nullable")]
    pub train_loss: f64,
    #[serde(with = "nullable")]
    pub reg_loss: f64,
    #[serde(with = "nullable")]
    pub test_metric: f64,
    #[serde(with = "nullable")]
    pub param_norm: f64,
    #[serde(with = "nullable")]
    pub grad_norm: f64,
    pub noise_scale: Option<f64>,
    pub eff_lr: Option<f64>,
    pub trace_estimate: Option<Estimate>,
    pub flags: Vec<Flag>,
}

impl ProbeRecord {
    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

/// Serialize non-finite floats as `null` and read `null` back as NaN.
pub mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
