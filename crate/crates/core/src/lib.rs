//! Lyapunov density models on discretized state-action spaces.
//!
//! The crate computes maximal LDMs by value iteration, checks their
//! invariance properties, and uses them to constrain model-predictive control.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control;
pub mod dataset;
pub mod density;
pub mod error;
pub mod field;
pub mod grid;
pub mod rng;
pub mod solver;
pub mod systems;

pub use dataset::{Bounds, DatasetMeta, TransitionDataset};
pub use error::{LdmError, Result};
pub use field::{FieldRole, ScalarField, StateActionFunction, SublevelSet};
pub use grid::{Axis, Interpolation, StateActionGrid};
