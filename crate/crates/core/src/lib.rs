//! Numerical tools for echo states of state-space systems.
//!
//! Left-infinite input and state sequences are represented by finite
//! [`Window`]s. Deterministic solution sets are approximated by pullback
//! ensembles ([`det_solver`]), laws of solutions by weighted particle clouds
//! ([`measures`]), causal couplings are built and tested in [`causality`] and
//! the filtering bridge lives in [`filtering`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod causality;
pub mod cmi;
pub mod det_solver;
pub mod error;
pub mod filtering;
pub mod input_law;
pub mod linalg;
pub mod lowdisc;
pub mod measures;
pub mod seed;
pub mod sequences;
pub mod systems;
pub mod transport;

pub use error::{Error, Result};
pub use sequences::{ExtendedInput, Metric, NormOrder, WeightSeq, Window};
pub use systems::{Readout, StateMap, SystemInstance};
