//! Adaptive-mass Hamiltonian Monte Carlo samplers.
//!
//! The inverse mass matrix of HMC, SGHMC, SGNHT and stochastic Nosé–Poincaré
//! HMC is learned online by Monte Carlo EM, with the E-step sample size grown
//! adaptively from a confidence-interval test.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod mcem;
pub mod models;
pub mod seeding;
pub mod spd;

pub use error::{Error, Result};
pub use spd::SpdMatrix;
