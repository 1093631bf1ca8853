//! Spectral-Galerkin simulation of two-time-scale stochastic
//! reaction-diffusion systems on an interval, with the machinery needed to
//! study the averaged dynamics: frozen-fast simulation, ergodic estimation of
//! the averaged drift, mixing diagnostics, a Gaussian moment oracle for
//! mode-diagonal linear models, and weak-order Monte-Carlo experiments.

// `!(x > 0.0)` guards reject NaN as well as nonpositive values; the
// "positive" spellings clippy prefers would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// accumulation loops index several parallel slices in lockstep
#![allow(clippy::needless_range_loop)]

pub mod averaging;
pub mod error;
pub mod experiments;
pub mod integrators;
pub mod models;
pub mod noise;
pub mod oracle;
pub mod spectral;

pub use error::{Result, SimError};
