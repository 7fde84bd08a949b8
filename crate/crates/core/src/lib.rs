#![forbid(unsafe_code)]
//! Posterior-aware split-conformal regression.
//!
//! The pipeline: train an MLP backbone, refit its last layer as a Bayesian
//! linear head (Laplace/Gaussian posterior over the head weights), score
//! held-out calibration points by two-sided posterior-CDF centrality, and cut
//! the score distribution at a rank threshold. The resulting intervals carry
//! the usual distribution-free split-conformal guarantee while their shape
//! comes from the posterior predictive. Three conformal baselines (absolute
//! residual, scale-normalized residual, conformalized quantile regression)
//! share the same backbone, plus diagnostics that say when the posterior is
//! actually adding anything.

pub mod backbone;
pub mod conformal;
pub mod data;
pub mod diagnostics;
pub mod eval;
pub mod linalg;
pub mod llla;
pub mod prob;

#[cfg(test)]
pub(crate) mod testutil;
