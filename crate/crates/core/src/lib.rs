//! Desk-scale laboratory for the mechanisms of weight decay.
//!
//! The crate bundles a small reverse-mode engine with bfloat16/float16
//! emulation, compact models and datasets, the optimizers and schedules
//! under study, curvature and noise probes, an exact stochastic-approximation
//! lab on quadratics, and a config-driven experiment harness.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod plot;
pub mod precision;
pub mod probes;
pub mod salab;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{DataBatch, Labels, LossKind, Model};
pub use precision::{MixedPrecisionPolicy, NumericMode};
pub use tensor::{FlatVector, ParamSet, Tensor};
