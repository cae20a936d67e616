//! Differentiable-computation substrate: a small reverse-mode tape over
//! ndarray tensors, layer primitives, losses, the Adam optimizer, and a
//! finite-difference gradient checker.
//!
//! Storage precision is generic. Training runs in f32 (scalar reductions
//! still accumulate in f64); the gradient checker re-evaluates the same
//! graph builders in f64.

mod convops;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod params;
pub mod tape;

use std::fmt;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use thiserror::Error;

pub use gradcheck::{grad_check, CoordReport, GradCheckConfig, GradCheckReport};
pub use params::{AdamConfig, BoundParams, ParamSet};
pub use tape::{Gradients, Tape, Var};

/// Probability clamp applied inside adversarial log terms.
pub const PROB_EPS: f64 = 1e-7;

/// Floating-point storage type for tensors on a tape.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + num_traits::NumAssignOps
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("non-finite {what} in tensor {tensor}")]
    NonFinite { tensor: String, what: String },
    #[error("bad optimizer config: {0}")]
    BadConfig(String),
}
