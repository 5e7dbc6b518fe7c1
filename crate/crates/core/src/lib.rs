//! Numerical laboratory for Markov and convex transition semigroups on R^d.
//!
//! The crate builds transition semigroups (Euler–Maruyama SDEs,
//! Ornstein–Uhlenbeck kernels, generalized Mehler semigroups with Lévy
//! noise, a grid dynamic-programming control semigroup) and checks their
//! structural properties against closed-form oracles: kernel conditions,
//! strong continuity on compacts versus the sup norm, generators versus
//! Kolmogorov operators, resolvents, Euler's exponential formula,
//! Fokker–Planck duality residuals and viscosity inequalities.
// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod experiments;
pub mod export;
pub mod generator;
pub mod kernels;
pub mod mehler;
pub mod mixedtop;
pub mod quad;
pub mod sde;
pub mod statespace;

pub use error::{Error, Result};
pub use statespace::{
    Compact, CompactExhaustion, CompactShape, Grid, RngPolicy, ScalarField, TailEnvelope, Weight,
};
