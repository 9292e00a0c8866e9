//! Reduced-order abstractions of interconnected jump linear stochastic
//! systems, certified by quadratic stochastic simulation functions that are
//! composed under a small-gain condition, with closed-form error bounds and
//! a Monte Carlo engine to check them.

pub mod abstraction;
pub mod bounds;
pub mod case_study;
pub mod cli;
pub mod composition;
pub mod linalg;
pub mod matrix_serde;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod ssf;
