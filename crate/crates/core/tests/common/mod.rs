#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdlab::model::{LossKind, MLPSpec, Mlp, Normalization};
use wdlab::{DataBatch, Labels, ParamSet, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_diff(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(floor)
}

/// Central differences of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, w: &[f64]) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            let h = 1e-6 * w[i].abs().max(1.0);
            x[i] = w[i] + h;
            let up = f(&x);
            x[i] = w[i] - h;
            let down = f(&x);
            x[i] = w[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Sum of second differences along every coordinate.
pub fn fd_trace(f: impl Fn(&[f64]) -> f64, w: &[f64], h: f64) -> f64 {
    let f0 = f(w);
    let mut x = w.to_vec();
    let mut total = 0.0;
    for i in 0..w.len() {
        x[i] = w[i] + h;
        let up = f(&x);
        x[i] = w[i] - h;
        let down = f(&x);
        x[i] = w[i];
        total += (up - 2.0 * f0 + down) / (h * h);
    }
    total
}

fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

fn standardize(x: &mut [f64], k: usize, eps: f64) {
    for row in x.chunks_mut(k) {
        let m = row.iter().sum::<f64>() / k as f64;
        let s = (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k as f64).sqrt();
        for v in row.iter_mut() {
            *v = (*v - m) / (s + eps);
        }
    }
}

/// Loop-based forward pass of an MLP, independent of the tape.
pub fn mlp_outputs(model: &Mlp, params: &ParamSet, x: &Tensor) -> Vec<f64> {
    let spec = model.spec();
    let w = &spec.layer_widths;
    let n = x.rows();
    let mut act = x.data().to_vec();
    let get = |name: String| params.get(&name).unwrap().data().to_vec();
    for l in 0..w.len() - 2 {
        let (k, m) = (w[l], w[l + 1]);
        let mut z = matmul(&act, n, k, &get(format!("layer{l}.weight")), m);
        let b = get(format!("layer{l}.bias"));
        for i in 0..n {
            for j in 0..m {
                z[i * m + j] += b[j];
            }
        }
        if spec.normalization != Normalization::None {
            standardize(&mut z, m, spec.norm_eps);
        }
        if spec.normalization == Normalization::Affine {
            let (g, s) = (get(format!("layer{l}.norm_gain")), get(format!("layer{l}.norm_shift")));
            for i in 0..n {
                for j in 0..m {
                    z[i * m + j] = z[i * m + j] * g[j] + s[j];
                }
            }
        }
        let block: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        act = if spec.skip_connections && l > 0 && k == m {
            let mut skip = act.clone();
            if spec.normalize_skip {
                standardize(&mut skip, k, spec.norm_eps);
            }
            skip.iter().zip(&block).map(|(a, b)| a + b).collect()
        } else {
            block
        };
    }
    let (k, m) = (w[w.len() - 2], w[w.len() - 1]);
    match model.fixed_output() {
        Some(out) => matmul(&act, n, k, out.data(), m),
        None => {
            let mut z = matmul(&act, n, k, &get("out.weight".into()), m);
            let b = get("out.bias".into());
            for i in 0..n {
                for j in 0..m {
                    z[i * m + j] += b[j];
                }
            }
            z
        }
    }
}

/// Loss of the loop-based outputs.
pub fn mlp_loss(model: &Mlp, params: &ParamSet, batch: &DataBatch) -> f64 {
    let out = mlp_outputs(model, params, &batch.inputs);
    let n = batch.len();
    let m = out.len() / n;
    match (&batch.labels, model.spec().loss) {
        (Labels::Classes(c), LossKind::CrossEntropy) => {
            let mut total = 0.0;
            for i in 0..n {
                let row = &out[i * m..(i + 1) * m];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - row[c[i]];
            }
            total / n as f64
        }
        (Labels::Classes(c), LossKind::Bce) => {
            let mut total = 0.0;
            for i in 0..n {
                let z = out[i];
                let y = c[i] as f64;
                // log(1 + e^z) - y z, evaluated stably
                total += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
            }
            total / n as f64
        }
        (Labels::Targets(t), LossKind::Squared) => {
            out.iter().zip(t.data()).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / out.len() as f64
        }
        _ => panic!("labels do not match loss"),
    }
}

pub fn random_batch(seed: u64, n: usize, d: usize, loss: LossKind, outputs: usize) -> DataBatch {
    let mut r = rng(seed ^ 0xbeef);
    let x = Tensor::matrix(n, d, normal_vec(&mut r, n * d)).unwrap();
    let labels = match loss {
        LossKind::CrossEntropy => Labels::Classes((0..n).map(|_| r.random_range(0..outputs)).collect()),
        LossKind::Bce => Labels::Classes((0..n).map(|_| r.random_range(0..2)).collect()),
        LossKind::Squared => Labels::Targets(Tensor::matrix(n, outputs, normal_vec(&mut r, n * outputs)).unwrap()),
    };
    DataBatch::new(x, labels).unwrap()
}

/// The three composite networks used by the gradient checks.
pub fn composite_specs() -> Vec<(&'static str, MLPSpec)> {
    let plain = MLPSpec::new(vec![3, 6, 5, 3], LossKind::CrossEntropy);
    let mut invariant = MLPSpec::new(vec![4, 5, 5, 5, 1], LossKind::Bce);
    invariant.skip_connections = true;
    let invariant = wdlab::model::make_scale_invariant(&invariant).unwrap();
    let mut affine = MLPSpec::new(vec![3, 6, 2], LossKind::Squared);
    affine.normalization = Normalization::Affine;
    vec![("plain_ce", plain), ("scale_invariant_bce", invariant), ("affine_norm_squared", affine)]
}

use wdlab::autodiff::{gradient, NodeId, Tape};
use wdlab::tensor::ParamRole;
use wdlab::MixedPrecisionPolicy;

pub const PRIMITIVES: [&str; 10] = [
    "matmul",
    "add",
    "add_row",
    "mul",
    "mul_row",
    "relu",
    "mean",
    "normalize",
    "softmax_cross_entropy",
    "logistic_cross_entropy",
];

type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> wdlab::Result<NodeId>>;

/// A small graph around one primitive, reduced to a scalar through a random weighting.
pub struct GraphCase {
    pub params: ParamSet,
    build: Build,
}

fn away_from_zero(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x.abs() < 0.1 { x + 0.2f64.copysign(x) } else { x }).collect()
}

pub fn primitive_case(name: &str, seed: u64) -> GraphCase {
    let mut r = rng(seed);
    let mut params = ParamSet::new();
    let mat = |r: &mut ChaCha8Rng, rows: usize, cols: usize| Tensor::matrix(rows, cols, normal_vec(r, rows * cols)).unwrap();
    let a = mat(&mut r, 3, 4);
    let weight = mat(&mut r, 3, 4);
    let weight2 = mat(&mut r, 3, 2);
    let second = match name {
        "matmul" => Some(mat(&mut r, 4, 2)),
        "add" | "mul" => Some(mat(&mut r, 3, 4)),
        "add_row" | "mul_row" => Some(mat(&mut r, 1, 4)),
        _ => None,
    };
    let a = if name == "relu" { Tensor::matrix(3, 4, away_from_zero(a.into_data())).unwrap() } else { a };
    let a = if name == "logistic_cross_entropy" { Tensor::matrix(3, 1, a.data()[..3].to_vec()).unwrap() } else { a };
    params.push("a", a, ParamRole::Weight).unwrap();
    if let Some(b) = second {
        params.push("b", b, ParamRole::Weight).unwrap();
    }
    let classes: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    let binary: Vec<f64> = (0..3).map(|_| r.random_range(0..2) as f64).collect();
    let eps = if seed.is_multiple_of(2) { 0.0 } else { 1e-5 };
    let name = name.to_string();
    let build: Build = Box::new(move |t: &mut Tape, ids: &[NodeId]| {
        let weighted = |t: &mut Tape, out: NodeId, w: &Tensor| -> wdlab::Result<NodeId> {
            let c = t.constant(w.clone());
            let m = t.mul(out, c)?;
            t.mean(m)
        };
        match name.as_str() {
            "matmul" => {
                let o = t.matmul(ids[0], ids[1])?;
                weighted(t, o, &weight2)
            }
            "add" => {
                let o = t.add(ids[0], ids[1])?;
                weighted(t, o, &weight)
            }
            "add_row" => {
                let o = t.add_row(ids[0], ids[1])?;
                weighted(t, o, &weight)
            }
            "mul" => {
                let o = t.mul(ids[0], ids[1])?;
                weighted(t, o, &weight)
            }
            "mul_row" => {
                let o = t.mul_row(ids[0], ids[1])?;
                weighted(t, o, &weight)
            }
            "relu" => {
                let o = t.relu(ids[0])?;
                weighted(t, o, &weight)
            }
            "mean" => t.mean(ids[0]),
            "normalize" => {
                let o = t.normalize(ids[0], eps)?;
                weighted(t, o, &weight)
            }
            "softmax_cross_entropy" => t.softmax_cross_entropy(ids[0], &classes),
            "logistic_cross_entropy" => t.logistic_cross_entropy(ids[0], &binary),
            other => panic!("unknown primitive {other}"),
        }
    });
    GraphCase { params, build }
}

impl GraphCase {
    fn tape(&self, params: &ParamSet) -> Tape {
        let mut t = Tape::new(MixedPrecisionPolicy::FULL);
        let ids = t.bind_params(params).unwrap();
        let out = (self.build)(&mut t, &ids).unwrap();
        t.set_output(out).unwrap();
        t
    }

    pub fn loss_at(&self, w: &[f64]) -> f64 {
        self.tape(&self.params.with_flat(w).unwrap()).loss().unwrap()
    }

    pub fn gradient(&self) -> Vec<f64> {
        gradient(&self.tape(&self.params), &self.params).unwrap()
    }

    /// Relative error between the tape gradient and central differences.
    pub fn check(&self) -> f64 {
        let fd = fd_gradient(|w| self.loss_at(w), &self.params.flatten());
        rel_diff(&self.gradient(), &fd, 1e-8)
    }
}

/// Relative error of the tape gradient of a composite network against central
/// differences of the loop-based loss.
pub fn composite_check(spec: &MLPSpec, seed: u64) -> f64 {
    use wdlab::Model;
    let (model, params) = wdlab::model::build_mlp(spec, seed).unwrap();
    // move off the exact ReLU kinks that zero biases create
    let mut r = rng(seed ^ 0x51de);
    let w: Vec<f64> = params.flatten().iter().map(|w| w + 0.1 * r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let params = params.with_flat(&w).unwrap();
    let outputs = *spec.layer_widths.last().unwrap();
    let batch = random_batch(seed, 7, spec.layer_widths[0], spec.loss, outputs);
    let fwd = model.forward(&params, &batch, &MixedPrecisionPolicy::FULL).unwrap();
    let g = gradient(&fwd.tape, &params).unwrap();
    let fd = fd_gradient(|w| mlp_loss(&model, &params.with_flat(w).unwrap(), &batch), &params.flatten());
    rel_diff(&g, &fd, 1e-8)
}

/// Linear least-squares model at its exact minimizer, with every input duplicated
/// so that the residuals are `+c` and `-c`: the mean gradient vanishes and the
/// gradient covariance equals `2 c^2` times the Hessian.
pub fn sigma_equals_h_instance(seed: u64, rows: usize, d: usize, c: f64) -> (Mlp, ParamSet, DataBatch) {
    let spec = MLPSpec::new(vec![d, 1], LossKind::Squared);
    let (model, params) = wdlab::model::build_mlp(&spec, seed).unwrap();
    let mut r = rng(seed ^ 0x5157);
    let params = params.with_flat(&normal_vec(&mut r, params.total_dim())).unwrap();
    let base = normal_vec(&mut r, rows * d);
    let mut x = Vec::with_capacity(2 * rows * d);
    for row in base.chunks(d) {
        x.extend_from_slice(row);
        x.extend_from_slice(row);
    }
    let x = Tensor::matrix(2 * rows, d, x).unwrap();
    let pred = model.predict(&params, &x, &MixedPrecisionPolicy::FULL).unwrap();
    let y: Vec<f64> = pred.data().iter().enumerate().map(|(i, p)| if i % 2 == 0 { p - c } else { p + c }).collect();
    let batch = DataBatch::new(x, Labels::Targets(Tensor::matrix(2 * rows, 1, y).unwrap())).unwrap();
    (model, params, batch)
}

/// Residual curvature `(1/n) sum_i sum_k (dl/do_ik) Hess(o_ik) v` by central
/// differences of `J^T c` with the output weights `c` frozen at `w`.
pub fn residual_oracle(model: &Mlp, params: &ParamSet, batch: &DataBatch, v: &[f64]) -> Vec<f64> {
    use wdlab::Model;
    let full = MixedPrecisionPolicy::FULL;
    let fwd = model.forward(params, batch, &full).unwrap();
    let out = fwd.outputs().clone();
    let n = out.rows();
    let k = out.cols();
    // dl/do per example, from the loop formulas
    let mut c = vec![0.0; n * k];
    match (&batch.labels, model.spec().loss) {
        (Labels::Classes(y), LossKind::CrossEntropy) => {
            for i in 0..n {
                let row = out.row_slice(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|z| (z - mx).exp()).sum();
                for j in 0..k {
                    c[i * k + j] = ((row[j] - mx).exp() / s - if j == y[i] { 1.0 } else { 0.0 }) / n as f64;
                }
            }
        }
        (Labels::Classes(y), LossKind::Bce) => {
            for i in 0..n {
                c[i] = (1.0 / (1.0 + (-out.data()[i]).exp()) - y[i] as f64) / n as f64;
            }
        }
        (Labels::Targets(t), LossKind::Squared) => {
            for (ci, (o, y)) in c.iter_mut().zip(out.data().iter().zip(t.data())) {
                *ci = 2.0 * (o - y) / (n * k) as f64;
            }
        }
        _ => panic!("labels do not match loss"),
    }
    let jt_c = |w: &[f64]| {
        let p = params.with_flat(w).unwrap();
        let f = model.forward(&p, batch, &full).unwrap();
        let g = f.tape.backward_from(f.output, &c).unwrap();
        f.tape.param_gradient(&g, &p).unwrap()
    };
    let w = params.flatten();
    let h = 1e-5 * norm(&w).max(1.0) / norm(v);
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
    jt_c(&plus).iter().zip(jt_c(&minus)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// Full-precision loss gradient at the flat point `w`.
pub fn grad_at(model: &Mlp, template: &ParamSet, batch: &DataBatch, w: &[f64]) -> Vec<f64> {
    use wdlab::Model;
    let p = template.with_flat(w).unwrap();
    let fwd = model.forward(&p, batch, &MixedPrecisionPolicy::FULL).unwrap();
    gradient(&fwd.tape, &p).unwrap()
}

/// Trajectories of signGD with decay on a scale-invariant net, and of projected
/// signGD driven by `eta / ((1 - eta lambda) ||w||)`. Returns the largest gap
/// between `w / ||w||` and the projected iterate.
pub fn signgd_projection_gap(eta: f64, lambda: f64, steps: usize, seed: u64) -> f64 {
    let spec = wdlab::model::make_scale_invariant(&MLPSpec::new(vec![4, 8, 8, 3], LossKind::CrossEntropy)).unwrap();
    let (model, params) = wdlab::model::build_mlp(&spec, seed).unwrap();
    let batch = random_batch(seed, 32, 4, LossKind::CrossEntropy, 3);
    let mut w = params.flatten();
    let mut u: Vec<f64> = w.iter().map(|x| x / norm(&w)).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let g = grad_at(&model, &params, &batch, &w);
        let eta_eff = eta / ((1.0 - eta * lambda) * norm(&w));
        w = wdlab::optim::step_signgd(&w, &g, eta, lambda).unwrap();
        let gu = grad_at(&model, &params, &batch, &u);
        let moved: Vec<f64> = u.iter().zip(&gu).map(|(a, b)| a - eta_eff * wdlab::optim::sign(*b)).collect();
        let m = norm(&moved);
        u = moved.iter().map(|x| x / m).collect();
        let n = norm(&w);
        worst = w.iter().zip(&u).map(|(a, b)| (a / n - b).abs()).fold(worst, f64::max);
    }
    worst
}

/// Loss series for the divergence detector: (name, losses, expected onset).
pub fn divergence_fixtures() -> Vec<(&'static str, Vec<f64>, Option<usize>)> {
    let descent: Vec<f64> = (0..30).map(|t| 2.0 * 0.97f64.powi(t)).collect();
    let mut spike = descent.clone();
    spike.extend([30.0, 45.0, f64::NAN, f64::INFINITY, 80.0, 90.0]);
    let mut recovering = descent.clone();
    recovering.extend([25.0, 40.0, 1.0, 0.9, 0.85, 30.0, 0.8, 0.78]);
    let mut slow_rise = descent.clone();
    slow_rise.extend((1..40).map(|t| 0.8 + 0.05 * t as f64));
    vec![
        ("persistent_spike", spike, Some(30)),
        ("recovering", recovering, None),
        ("monotone_descent", descent, None),
        ("monotone_slow_rise", slow_rise, None),
    ]
}
