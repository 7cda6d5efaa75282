//! Independent oracles used by the integration and acceptance suites:
//! finite-difference gradients, a brute-force metric recomputation and a
//! one-sample Kolmogorov-Smirnov test against U(0, 1).

pub mod fixtures;
pub mod gradcheck;
pub mod ks;
pub mod metrics;
