//! Last-layer Laplace posterior over frozen features.
//!
//! Given the feature matrix Phi of the training split and centered targets,
//! the posterior over head weights is N(w_map, M^{-1}) with precision
//! M = lambda*I + (1/sigma^2) Phi^T Phi, factored once as L L^T. The
//! predictive at a feature vector phi is Gaussian with mean phi.w_map (plus
//! the target center) and variance sigma^2 + ||L^{-1} phi||^2, splitting
//! cleanly into noise and epistemic parts.
//!
//! Two noise-variance estimators are provided: a residual estimator from a
//! unit-scaled ridge fit, and an evidence (marginal-likelihood) fixed point
//! with effective degrees of freedom gamma = d - lambda * trace(M^{-1}).

use crate::linalg::{
    dot, quad_form_via_chol, ridge_solve, solve_lower, CholeskyFactor, DenseMatrix, LinalgError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to every noise-variance estimate; keeps division by
/// sigma^2 sane when a fit interpolates the data.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Default prior precision for the last-layer weights.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Relative-change threshold at which the evidence fixed point stops.
const EVIDENCE_TOL: f64 = 1e-6;
const EVIDENCE_MAX_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum LllaError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty training features")]
    EmptyData,
    #[error(
        "degenerate degrees of freedom: n = {n}, effective dof gamma = {gamma:.3}; \
         too little data for the evidence estimator (fall back to the residual estimator)"
    )]
    DegenerateDof { n: usize, gamma: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma2Estimator {
    #[default]
    Residual,
    Evidence,
}

impl std::fmt::Display for Sigma2Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sigma2Estimator::Residual => write!(f, "residual"),
            Sigma2Estimator::Evidence => write!(f, "evidence"),
        }
    }
}

/// Gaussian posterior over the last-layer weights, stored via w_map and the
/// Cholesky factor of the precision matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub w_map: Vec<f64>,
    pub chol_precision: CholeskyFactor,
    pub lambda: f64,
    pub sigma2: f64,
    pub d: usize,
    pub n_train: usize,
    pub sigma2_estimator: Sigma2Estimator,
}

/// Posterior predictive at one input: mean in original target units, total
/// variance, and its epistemic component (v = sigma2 + epi by construction).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveGaussian {
    pub mu: f64,
    pub v: f64,
    pub epi: f64,
}

fn check_shapes(phi: &DenseMatrix, y: &[f64]) -> Result<(), LllaError> {
    if phi.rows() == 0 {
        return Err(LllaError::EmptyData);
    }
    if phi.rows() != y.len() {
        return Err(LllaError::DimensionMismatch(format!(
            "{} feature rows vs {} targets",
            phi.rows(),
            y.len()
        )));
    }
    Ok(())
}

fn residual_sum_of_squares(phi: &DenseMatrix, y: &[f64], w: &[f64]) -> f64 {
    let mut rss = 0.0;
    for (r, &yr) in y.iter().enumerate() {
        let pred = dot(phi.row(r), w);
        rss += (yr - pred) * (yr - pred);
    }
    rss
}

/// trace(M^{-1}) as the summed squared norms of L^{-1} e_i.
fn trace_inverse(chol: &CholeskyFactor) -> f64 {
    let d = chol.dim();
    let mut basis = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..d {
        basis[i] = 1.0;
        let col = solve_lower(chol, &basis).expect("basis vector has factor dimension");
        total += col.iter().map(|v| v * v).sum::<f64>();
        basis[i] = 0.0;
    }
    total
}

/// Noise variance from the unit-scaled ridge fit
/// w = (Phi^T Phi + lambda I)^{-1} Phi^T y, sigma^2 = ||y - Phi w||^2 / n,
/// floored at [`SIGMA2_FLOOR`].
pub fn estimate_sigma2_residual(
    phi: &DenseMatrix,
    y_centered: &[f64],
    lambda: f64,
) -> Result<f64, LllaError> {
    check_shapes(phi, y_centered)?;
    let (w, _) = ridge_solve(phi, y_centered, lambda, 1.0)?;
    let rss = residual_sum_of_squares(phi, y_centered, &w);
    Ok((rss / y_centered.len() as f64).max(SIGMA2_FLOOR))
}

/// Noise variance from the evidence fixed point: starting at the residual
/// estimate, alternate the sigma^2-scaled ridge fit with
/// gamma = d - lambda * trace(M^{-1}) and sigma^2 = RSS / (n - gamma) until
/// the relative change drops below 1e-6 (at most 100 rounds).
pub fn estimate_sigma2_evidence(
    phi: &DenseMatrix,
    y_centered: &[f64],
    lambda: f64,
) -> Result<f64, LllaError> {
    check_shapes(phi, y_centered)?;
    let n = y_centered.len();
    let d = phi.cols();
    let mut sigma2 = estimate_sigma2_residual(phi, y_centered, lambda)?;
    for iter in 0..EVIDENCE_MAX_ITERS {
        let (w, chol) = ridge_solve(phi, y_centered, lambda, sigma2)?;
        let gamma = d as f64 - lambda * trace_inverse(&chol);
        if n as f64 - gamma <= 1.0 {
            return Err(LllaError::DegenerateDof { n, gamma });
        }
        let rss = residual_sum_of_squares(phi, y_centered, &w);
        let next = (rss / (n as f64 - gamma)).max(SIGMA2_FLOOR);
        let rel_change = (next - sigma2).abs() / sigma2;
        sigma2 = next;
        if rel_change < EVIDENCE_TOL {
            log::debug!("evidence fixed point converged after {} iterations", iter + 1);
            break;
        }
    }
    Ok(sigma2)
}

/// Fits the posterior: noise variance from the chosen estimator, then the
/// sigma^2-scaled ridge solve whose precision factor is retained for all
/// downstream quadratic forms.
pub fn fit_llla(
    phi: &DenseMatrix,
    y_centered: &[f64],
    lambda: f64,
    estimator: Sigma2Estimator,
) -> Result<LaplacePosterior, LllaError> {
    check_shapes(phi, y_centered)?;
    let sigma2 = match estimator {
        Sigma2Estimator::Residual => estimate_sigma2_residual(phi, y_centered, lambda)?,
        Sigma2Estimator::Evidence => estimate_sigma2_evidence(phi, y_centered, lambda)?,
    };
    let (w_map, chol_precision) = ridge_solve(phi, y_centered, lambda, sigma2)?;
    Ok(LaplacePosterior {
        w_map,
        chol_precision,
        lambda,
        sigma2,
        d: phi.cols(),
        n_train: phi.rows(),
        sigma2_estimator: estimator,
    })
}

impl LaplacePosterior {
    /// Posterior predictive at a feature vector; `target_center` restores the
    /// training-target mean subtracted before fitting.
    pub fn predictive(
        &self,
        phi: &[f64],
        target_center: f64,
    ) -> Result<PredictiveGaussian, LllaError> {
        if phi.len() != self.d {
            return Err(LllaError::DimensionMismatch(format!(
                "feature vector has {} entries, posterior dimension is {}",
                phi.len(),
                self.d
            )));
        }
        let epi = quad_form_via_chol(&self.chol_precision, phi)?;
        let mu = dot(&self.w_map, phi) + target_center;
        Ok(PredictiveGaussian {
            mu,
            v: self.sigma2 + epi,
            epi,
        })
    }

    /// trace of the posterior covariance M^{-1}.
    pub fn trace_sigma(&self) -> f64 {
        trace_inverse(&self.chol_precision)
    }
}
