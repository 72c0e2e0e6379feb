//! Stochastic approximation driven by Markov iterate-dependent noise.
//!
//! The crate simulates the recursion
//!
//! ```text
//! theta_{n+1} = theta_n + a(n) [f(theta_n, Y_n) + M_{n+1}]
//! ```
//!
//! where `Y_n` is a finite Markov chain whose kernel depends on `theta_n`,
//! evaluates the closed-form lock-in, tightness, two-timescale and
//! sample-complexity bounds attached to it, and estimates the corresponding
//! probabilities by Monte Carlo.

// NaN inputs must fail validation, so range checks are written as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod complexity;
pub mod engine;
pub mod error;
pub mod markov;
pub mod montecarlo;
pub mod numeric;
pub mod odeflow;
pub mod problems;
pub mod report;
pub mod rng;
pub mod schedules;
pub mod twotimescale;

pub use error::{Error, Result};
