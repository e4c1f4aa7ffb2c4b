//! Differentiable models built on the tape, plus their loss functions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{invalid, Error, Result};
use crate::precision::MixedPrecisionPolicy;
use crate::tensor::{ParamRole, ParamSet, Tensor};

/// Targets attached to a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Classes(Vec<usize>),
    /// Real-valued targets, `n x k`.
    Targets(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
            Labels::Targets(t) => Labels::Targets(t.select_rows(idx)),
        }
    }
}

/// Inputs (`n x features`) with one label per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    pub inputs: Tensor,
    pub labels: Labels,
}

impl DataBatch {
    pub fn new(inputs: Tensor, labels: Labels) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(invalid(format!("batch inputs must be a matrix, got {:?}", inputs.shape())));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "batch",
                detail: format!("{} input rows, {} labels", inputs.rows(), labels.len()),
            });
        }
        Ok(DataBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> DataBatch {
        DataBatch { inputs: self.inputs.select_rows(idx), labels: self.labels.select(idx) }
    }

    pub fn example(&self, i: usize) -> DataBatch {
        self.select(&[i])
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> DataBatch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Bce,
    /// Mean over outputs of the squared error.
    Squared,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: f64,
    pub tape: Tape,
    /// Per-example model outputs (`n x k`); the loss node for models without outputs.
    pub output: NodeId,
    pub loss_kind: Option<LossKind>,
}

impl Forward {
    /// Loss, or [`Error::NonFiniteLoss`] tagged with `step`.
    pub fn finite_loss(&self, step: usize) -> Result<f64> {
        if self.loss.is_finite() {
            Ok(self.loss)
        } else {
            Err(Error::NonFiniteLoss { step })
        }
    }

    /// Divergence flag: some forward value overflowed or became NaN.
    pub fn non_finite(&self) -> bool {
        !self.loss.is_finite() || self.tape.has_non_finite()
    }

    pub fn outputs(&self) -> &Tensor {
        self.tape.value(self.output)
    }
}

/// Differentiable map from parameters and data to a scalar loss.
pub trait Model: Send + Sync {
    fn forward(&self, params: &ParamSet, batch: &DataBatch, policy: &MixedPrecisionPolicy) -> Result<Forward>;

    /// Loss applied to the per-example outputs, when the model has outputs.
    fn loss_kind(&self) -> Option<LossKind> {
        None
    }
}

/// Loss value and tape in full precision.
pub fn forward(model: &dyn Model, params: &ParamSet, batch: &DataBatch) -> Result<(f64, Tape)> {
    let f = model.forward(params, batch, &MixedPrecisionPolicy::FULL)?;
    Ok((f.loss, f.tape))
}

/// Mean softmax cross-entropy of `(n x c)` logits.
pub fn loss_crossentropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = logits.cols();
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch { op: "loss_crossentropy", detail: "row/label count".into() });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = logits.row_slice(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Binary cross-entropy of one logit against a label in `{0, 1}`.
pub fn loss_bce(logit: f64, label: f64) -> Result<f64> {
    if label != 0.0 && label != 1.0 {
        return Err(invalid(format!("binary label must be 0 or 1, got {label}")));
    }
    Ok(logit.max(0.0) + (-logit.abs()).exp().ln_1p() - label * logit)
}

/// Derivative of [`loss_bce`] with respect to the logit.
pub fn loss_bce_derivative(logit: f64, label: f64) -> f64 {
    1.0 / (1.0 + (-logit).exp()) - label
}

/// Mean squared error over all entries.
pub fn loss_sq(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::DimMismatch { expected: target.len(), got: pred.len() });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Attach `kind` to `outputs` on the tape and designate it as the loss.
pub(crate) fn attach_loss(tape: &mut Tape, outputs: NodeId, labels: &Labels, kind: LossKind) -> Result<NodeId> {
    let loss = match (kind, labels) {
        (LossKind::CrossEntropy, Labels::Classes(c)) => tape.softmax_cross_entropy(outputs, c)?,
        (LossKind::Bce, Labels::Classes(c)) => {
            if let Some(&bad) = c.iter().find(|&&y| y > 1) {
                return Err(Error::LabelOutOfRange { label: bad, classes: 2 });
            }
            let y: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            tape.logistic_cross_entropy(outputs, &y)?
        }
        (LossKind::Squared, Labels::Targets(t)) => {
            let neg = tape.constant(t.map(|v| -v));
            let diff = tape.add(outputs, neg)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)?
        }
        (kind, _) => return Err(invalid(format!("labels do not match loss {kind:?}"))),
    };
    tape.set_output(loss)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Per-example standardization over features, no learnable parameters.
    NonAffine,
    /// Standardization followed by a learnable gain and shift.
    Affine,
}

/// Architecture of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MLPSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub normalization: Normalization,
    /// Residual `x + block(x)` wherever a hidden layer keeps its width.
    pub skip_connections: bool,
    /// Normalize the identity branch of residual connections.
    pub normalize_skip: bool,
    /// Output matrix frozen at initialization and excluded from the parameters.
    pub last_layer_fixed: bool,
    /// Gain on the He standard deviation `sqrt(2 / fan_in)`.
    pub init_std: f64,
    /// `eps` inside the normalization denominator.
    pub norm_eps: f64,
    pub loss: LossKind,
}

impl MLPSpec {
    /// Plain ReLU network with He initialization and `eps = 1e-5`.
    pub fn new(layer_widths: Vec<usize>, loss: LossKind) -> Self {
        MLPSpec {
            layer_widths,
            normalization: Normalization::None,
            skip_connections: false,
            normalize_skip: false,
            last_layer_fixed: false,
            init_std: 1.0,
            norm_eps: 1e-5,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::ShapeMismatch { op: "build_mlp", detail: "need at least two layer widths".into() });
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::ShapeMismatch { op: "build_mlp", detail: "layer widths must be positive".into() });
        }
        let out = *self.layer_widths.last().unwrap();
        if self.loss == LossKind::Bce && out != 1 {
            return Err(Error::ShapeMismatch {
                op: "build_mlp",
                detail: format!("binary cross-entropy needs one output, got {out}"),
            });
        }
        if !(self.init_std > 0.0) || !(self.norm_eps >= 0.0) {
            return Err(invalid("init_std must be positive and norm_eps non-negative"));
        }
        Ok(())
    }

    fn hidden_layers(&self) -> usize {
        self.layer_widths.len() - 2
    }
}

/// Turn `spec` into a network whose outputs are invariant to rescaling all parameters.
///
/// The output layer is frozen, every hidden linear layer is followed by a
/// parameter-free normalization, residual identity branches are normalized
/// and the normalization `eps` is set to zero so that `h(a w, x) = h(w, x)`
/// holds for every `a > 0`.
pub fn make_scale_invariant(spec: &MLPSpec) -> Result<MLPSpec> {
    if spec.hidden_layers() < 1 {
        return Err(invalid("scale-invariant transform needs at least one hidden layer"));
    }
    Ok(MLPSpec {
        normalization: Normalization::NonAffine,
        normalize_skip: spec.skip_connections,
        last_layer_fixed: true,
        norm_eps: 0.0,
        ..spec.clone()
    })
}

/// Fully connected ReLU network.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MLPSpec,
    fixed_output: Option<Tensor>,
}

/// Deterministically construct an MLP and its initial parameters.
pub fn build_mlp(spec: &MLPSpec, seed: u64) -> Result<(Mlp, ParamSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = &spec.layer_widths;
    let mut params = ParamSet::new();
    let mut fixed_output = None;
    let layers = widths.len() - 1;
    for l in 0..layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let std = spec.init_std * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        let w = Tensor::matrix(fan_in, fan_out, w)?;
        let is_output = l + 1 == layers;
        if is_output {
            if spec.last_layer_fixed {
                fixed_output = Some(w);
            } else {
                params.push("out.weight", w, ParamRole::Weight)?;
                params.push("out.bias", Tensor::zeros(1, fan_out), ParamRole::Bias)?;
            }
        } else {
            params.push(format!("layer{l}.weight"), w, ParamRole::Weight)?;
            params.push(format!("layer{l}.bias"), Tensor::zeros(1, fan_out), ParamRole::Bias)?;
            if spec.normalization == Normalization::Affine {
                params.push(format!("layer{l}.norm_gain"), Tensor::filled(1, fan_out, 1.0), ParamRole::Norm)?;
                params.push(format!("layer{l}.norm_shift"), Tensor::zeros(1, fan_out), ParamRole::Norm)?;
            }
        }
    }
    Ok((Mlp { spec: spec.clone(), fixed_output }, params))
}

impl Mlp {
    pub fn spec(&self) -> &MLPSpec {
        &self.spec
    }

    pub fn fixed_output(&self) -> Option<&Tensor> {
        self.fixed_output.as_ref()
    }

    /// Record the network on `tape`, returning the `n x out` output node.
    pub fn record(&self, tape: &mut Tape, params: &ParamSet, inputs: &Tensor) -> Result<NodeId> {
        let widths = &self.spec.layer_widths;
        if inputs.cols() != widths[0] {
            return Err(Error::ShapeMismatch {
                op: "mlp_input",
                detail: format!("model expects {} features, batch has {}", widths[0], inputs.cols()),
            });
        }
        let ids = tape.bind_params(params)?;
        let id_of = |name: &str| -> Result<NodeId> {
            params.index_of(name).map(|i| ids[i]).ok_or_else(|| invalid(format!("missing parameter `{name}`")))
        };
        let eps = self.spec.norm_eps;
        let mut act = tape.constant(inputs.clone());
        for l in 0..self.spec.hidden_layers() {
            let z = tape.matmul(act, id_of(&format!("layer{l}.weight"))?)?;
            let mut z = tape.add_row(z, id_of(&format!("layer{l}.bias"))?)?;
            match self.spec.normalization {
                Normalization::None => {}
                Normalization::NonAffine => z = tape.normalize(z, eps)?,
                Normalization::Affine => {
                    z = tape.normalize(z, eps)?;
                    z = tape.mul_row(z, id_of(&format!("layer{l}.norm_gain"))?)?;
                    z = tape.add_row(z, id_of(&format!("layer{l}.norm_shift"))?)?;
                }
            }
            let block = tape.relu(z)?;
            act = if self.spec.skip_connections && l > 0 && widths[l] == widths[l + 1] {
                let skip = if self.spec.normalize_skip { tape.normalize(act, eps)? } else { act };
                tape.add(skip, block)?
            } else {
                block
            };
        }
        let out = match &self.fixed_output {
            Some(w) => {
                let w = tape.constant(w.clone());
                tape.matmul(act, w)?
            }
            None => {
                let z = tape.matmul(act, id_of("out.weight")?)?;
                tape.add_row(z, id_of("out.bias")?)?
            }
        };
        Ok(out)
    }

    /// Network outputs `h(w, x)` for each row of `inputs`.
    pub fn predict(&self, params: &ParamSet, inputs: &Tensor, policy: &MixedPrecisionPolicy) -> Result<Tensor> {
        let mut tape = Tape::new(*policy);
        let out = self.record(&mut tape, params, inputs)?;
        Ok(tape.value(out).clone())
    }
}

impl Model for Mlp {
    fn forward(&self, params: &ParamSet, batch: &DataBatch, policy: &MixedPrecisionPolicy) -> Result<Forward> {
        let mut tape = Tape::new(*policy);
        let output = self.record(&mut tape, params, &batch.inputs)?;
        let loss_id = attach_loss(&mut tape, output, &batch.labels, self.spec.loss)?;
        let loss = tape.value(loss_id).data()[0];
        Ok(Forward { loss, tape, output, loss_kind: Some(self.spec.loss) })
    }

    fn loss_kind(&self) -> Option<LossKind> {
        Some(self.spec.loss)
    }
}

/// `L(w) = 1/2 * sum_i d_i w_i^2`, independent of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagQuadratic {
    pub diag: Vec<f64>,
}

impl DiagQuadratic {
    pub fn new(diag: Vec<f64>) -> Self {
        DiagQuadratic { diag }
    }

    pub fn params(&self, w: &[f64]) -> Result<ParamSet> {
        if w.len() != self.diag.len() {
            return Err(Error::DimMismatch { expected: self.diag.len(), got: w.len() });
        }
        let mut p = ParamSet::new();
        p.push("w", Tensor::row(w.to_vec()), ParamRole::Weight)?;
        Ok(p)
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        0.5 * self.diag.iter().zip(w).map(|(d, x)| d * x * x).sum::<f64>()
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }
}

impl Model for DiagQuadratic {
    fn forward(&self, params: &ParamSet, _batch: &DataBatch, policy: &MixedPrecisionPolicy) -> Result<Forward> {
        let p = self.diag.len();
        let mut tape = Tape::new(*policy);
        let ids = tape.bind_params(params)?;
        if params.total_dim() != p {
            return Err(Error::DimMismatch { expected: p, got: params.total_dim() });
        }
        // mean over p entries of (p d_i / 2) w_i^2
        let coef = tape.constant(Tensor::row(self.diag.iter().map(|d| d * p as f64 / 2.0).collect()));
        let sq = tape.mul(ids[0], ids[0])?;
        let weighted = tape.mul(sq, coef)?;
        let loss_id = tape.mean(weighted)?;
        tape.set_output(loss_id)?;
        let loss = tape.value(loss_id).data()[0];
        Ok(Forward { loss, tape, output: loss_id, loss_kind: None })
    }
}

/// An empty batch for models that ignore data.
pub fn empty_batch() -> DataBatch {
    DataBatch { inputs: Tensor::zeros(1, 1), labels: Labels::Targets(Tensor::zeros(1, 1)) }
}
