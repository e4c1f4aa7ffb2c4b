//! Seeded synthetic datasets and CSV interchange.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{DataBatch, Labels};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GaussBlobs,
    Spiral,
    Linreg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Training-set size; the held-out split adds a quarter of this (20% of the total).
    pub n_train: usize,
    pub dim: usize,
    /// Number of classes (ignored for regression).
    pub classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn n_test(&self) -> usize {
        (self.n_train / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_train == 0 {
            return Err(invalid("task needs positive n_train and dim"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid("noise_std must be non-negative"));
        }
        match self.kind {
            TaskKind::Linreg => Ok(()),
            TaskKind::GaussBlobs | TaskKind::Spiral => {
                if self.classes < 2 {
                    return Err(invalid("classification tasks need at least two classes"));
                }
                if self.n_train < self.classes {
                    return Err(invalid(format!("n_train {} < classes {}", self.n_train, self.classes)));
                }
                if self.kind == TaskKind::Spiral && self.dim < 2 {
                    return Err(invalid("spiral needs dim >= 2"));
                }
                Ok(())
            }
        }
    }
}

// Independent random streams per dataset component.
const STREAM_SHARED: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Ground-truth weights of a `linreg` task.
pub fn linreg_truth(task: &TaskSpec) -> Vec<f64> {
    let mut r = rng(task.seed, STREAM_SHARED);
    (0..task.dim).map(|_| normal(&mut r)).collect()
}

/// `sum_j x_j w_j` in index order.
pub fn linear_response(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn blob_centers(task: &TaskSpec) -> Vec<Vec<f64>> {
    let mut r = rng(task.seed, STREAM_SHARED);
    (0..task.classes).map(|_| (0..task.dim).map(|_| 2.0 * normal(&mut r)).collect()).collect()
}

fn sample_split(task: &TaskSpec, n: usize, stream: u64) -> Result<DataBatch> {
    let mut r = rng(task.seed, stream);
    let d = task.dim;
    let mut x = Vec::with_capacity(n * d);
    match task.kind {
        TaskKind::Linreg => {
            let w = linreg_truth(task);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let row: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
                let noise = if task.noise_std > 0.0 { task.noise_std * normal(&mut r) } else { 0.0 };
                y.push(linear_response(&row, &w) + noise);
                x.extend(row);
            }
            DataBatch::new(Tensor::matrix(n, d, x)?, Labels::Targets(Tensor::matrix(n, 1, y)?))
        }
        TaskKind::GaussBlobs => {
            let centers = blob_centers(task);
            let labels: Vec<usize> = (0..n).map(|i| i % task.classes).collect();
            for &c in &labels {
                for center in &centers[c] {
                    x.push(center + task.noise_std * normal(&mut r));
                }
            }
            DataBatch::new(Tensor::matrix(n, d, x)?, Labels::Classes(labels))
        }
        TaskKind::Spiral => {
            let k = task.classes as f64;
            let labels: Vec<usize> = (0..n).map(|i| i % task.classes).collect();
            for &c in &labels {
                let t: f64 = r.random_range(0.05..1.0);
                let theta = 2.0 * std::f64::consts::PI * (c as f64 / k) + 3.0 * t + task.noise_std * normal(&mut r);
                x.push(t * theta.cos());
                x.push(t * theta.sin());
                for _ in 2..d {
                    x.push(task.noise_std * normal(&mut r));
                }
            }
            DataBatch::new(Tensor::matrix(n, d, x)?, Labels::Classes(labels))
        }
    }
}

/// Generate the `(train, test)` pair described by `task`.
pub fn generate(task: &TaskSpec) -> Result<(DataBatch, DataBatch)> {
    task.validate()?;
    let train = sample_split(task, task.n_train, STREAM_TRAIN)?;
    let test = sample_split(task, task.n_test(), STREAM_TEST)?;
    Ok((train, test))
}

/// Write `batch` as CSV: `x0,...,x{d-1},label`.
pub fn write_csv(batch: &DataBatch, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = batch.features();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(std::iter::once("label".into())).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..batch.len() {
        let mut fields: Vec<String> = batch.inputs.row_slice(i).iter().map(|v| format!("{v:?}")).collect();
        fields.push(match &batch.labels {
            Labels::Classes(c) => c[i].to_string(),
            Labels::Targets(t) => {
                if t.cols() != 1 {
                    return Err(invalid("CSV export supports a single target column"));
                }
                format!("{:?}", t.get(i, 0))
            }
        });
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Read a CSV written by [`write_csv`]; `classification` selects integer labels.
pub fn read_csv(path: &Path, classification: bool) -> Result<DataBatch> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines.next().ok_or_else(|| invalid("empty CSV"))??;
    let cols = header.split(',').count();
    if cols < 2 || !header.ends_with("label") {
        return Err(invalid("CSV header must list features then `label`"));
    }
    let d = cols - 1;
    let mut x = Vec::new();
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(invalid(format!("CSV row {} has {} fields, expected {cols}", lineno + 2, fields.len())));
        }
        for f in &fields[..d] {
            x.push(f.trim().parse::<f64>().map_err(|e| invalid(format!("bad number `{f}`: {e}")))?);
        }
        let label = fields[d].trim();
        if classification {
            classes.push(label.parse::<usize>().map_err(|e| invalid(format!("bad class `{label}`: {e}")))?);
        } else {
            targets.push(label.parse::<f64>().map_err(|e| invalid(format!("bad target `{label}`: {e}")))?);
        }
    }
    let n = x.len() / d;
    let labels = if classification {
        Labels::Classes(classes)
    } else {
        Labels::Targets(Tensor::matrix(n, 1, targets)?)
    };
    DataBatch::new(Tensor::matrix(n, d, x)?, labels)
}
