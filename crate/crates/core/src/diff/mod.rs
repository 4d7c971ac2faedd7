//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass (threads vary in length).
//! Stored parameters are bound onto the tape as leaves with
//! [`Tape::param`]; after [`Tape::backward`] their gradients are collected
//! into a [`Gradients`] buffer that [`adam_step`] consumes.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

use alloc::string::String;
use alloc::vec::Vec;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GroupReport, REL_ERR_FLOOR};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0} called with no input")]
    Empty(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} already exists")]
    DuplicateParam(String),
    #[error("optimizer state does not match the parameter store")]
    UninitializedOptimizer,
    #[error("loss closure is not deterministic")]
    NonDeterministic,
}
