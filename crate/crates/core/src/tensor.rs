//! Dense tensors and named parameter collections.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::precision::{quantize, NumericMode};

/// Flattened parameter-space vector.
pub type FlatVector = Vec<f64>;

/// Dense row-major real array tagged with the format its values live in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    mode: NumericMode,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(invalid(format!("tensor shape {shape:?} must be non-empty and positive")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, mode: NumericMode::Full })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols], mode: NumericMode::Full }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![value; rows * cols], mode: NumericMode::Full }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value], mode: NumericMode::Full }
    }

    /// Single-row matrix.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor { shape: vec![1, n], data: values, mode: NumericMode::Full }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mode(&self) -> NumericMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor; higher ranks fold trailing axes into columns.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Round every value into `mode` and tag the tensor with it.
    pub fn quantized(mut self, mode: NumericMode) -> Self {
        if !mode.is_full() {
            for x in &mut self.data {
                *x = quantize(*x, mode);
            }
        }
        self.mode = mode;
        self
    }

    /// Every stored value is exactly representable in the tagged format.
    pub fn is_consistent(&self) -> bool {
        self.data.iter().all(|&x| crate::precision::is_representable(x, self.mode))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect(), mode: self.mode }
    }

    /// Select a subset of rows.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row_slice(i));
        }
        Tensor { shape: vec![idx.len(), c], data, mode: self.mode }
    }
}

/// What a parameter tensor is, for decay masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    /// Gain or shift of a normalization layer.
    Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub role: ParamRole,
}

/// Ordered, uniquely named model parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, role: ParamRole) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(ParamEntry { name, tensor, role });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn flatten(&self) -> FlatVector {
        let mut out = Vec::with_capacity(self.total_dim());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// Overwrite all values from a flat vector laid out like [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let dim = self.total_dim();
        if flat.len() != dim {
            return Err(Error::DimMismatch { expected: dim, got: flat.len() });
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copy of `self` holding the values of `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        let mut out = self.clone();
        out.unflatten(flat)?;
        Ok(out)
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.flatten())
    }

    /// Per-coordinate decay multipliers (1 = decayed, 0 = exempt).
    pub fn decay_mask(&self, decay_norm_params: bool) -> FlatVector {
        let mut mask = Vec::with_capacity(self.total_dim());
        for e in &self.entries {
            let m = if e.role == ParamRole::Norm && !decay_norm_params { 0.0 } else { 1.0 };
            mask.extend(std::iter::repeat_n(m, e.tensor.len()));
        }
        mask
    }

    /// Bitwise fingerprint of all values, used to detect stale tapes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for e in &self.entries {
            e.name.hash(&mut h);
            for x in e.tensor.data() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }
}
