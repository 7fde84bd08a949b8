//! Posterior diagnostics: per-point variance decomposition, epistemic-share
//! summaries, the rank-correlation heteroscedasticity signal, subsample
//! contraction curves, and the diagnostics-driven method selection rule.

use crate::linalg::{quad_form_via_chol, DenseMatrix, LinalgError};
use crate::llla::{fit_llla, LaplacePosterior, LllaError, Sigma2Estimator};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("split has no rows")]
    EmptySplit,
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 3 points for rank correlation, got {n}")]
    TooFewPoints { n: usize },
    #[error("subsample grid must be strictly ascending")]
    GridNotAscending,
    #[error("subsample size {requested} exceeds available training rows {available}")]
    GridExceedsData { requested: usize, available: usize },
    #[error("non-finite value in diagnostics input")]
    NonFiniteInput,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Llla(#[from] LllaError),
}

/// Which data split a summary was computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Calibration,
    Test,
}

/// Per-point variance decomposition: epistemic variance and the epistemic
/// share r = epi / (sigma^2 + epi) in [0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDecomposition {
    pub epi: f64,
    pub r: f64,
}

/// Split-level summary of the decomposition. Quantiles of r use the
/// nearest-rank convention on the ascending sort (Q_p = element at
/// ceil(p * n)); `frac_r_below_1pct` is the fraction of points with
/// r < 0.01.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSummary {
    pub epi_mean: f64,
    pub r_mean: f64,
    pub r_median: f64,
    pub r_q10: f64,
    pub r_q90: f64,
    pub frac_r_below_1pct: f64,
    pub trace_sigma: f64,
    pub sigma2: f64,
    pub split: SplitLabel,
}

/// Midrank Spearman correlation with a two-sided Student-t p-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Thresholds for the selection rule: minimum median epistemic share,
/// minimum posterior trace, and maximum tolerated heteroscedasticity signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub eps_r: f64,
    pub eps_t: f64,
    pub tau_rho: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self { eps_r: 0.02, eps_t: 1.0, tau_rho: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionChoice {
    Claps,
    ScaleLearning,
    Inconclusive,
}

impl std::fmt::Display for SelectionChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SelectionChoice::Claps => "claps",
            SelectionChoice::ScaleLearning => "scale_learning",
            SelectionChoice::Inconclusive => "inconclusive",
        };
        write!(f, "{s}")
    }
}

/// The selection verdict together with the inputs and thresholds it was
/// computed from, so any consumer can replay the decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionVerdict {
    pub choice: SelectionChoice,
    pub median_r: f64,
    pub trace: f64,
    pub rho: f64,
    pub thresholds: SelectionThresholds,
}

/// One point of the subsample contraction curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsamplePoint {
    pub n: usize,
    pub epi_mean: f64,
    pub trace_sigma: f64,
    pub sigma2: f64,
}

/// Nearest-rank quantile of an ascending slice: element at ceil(p * n).
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Variance decomposition of every row of `phis` under the posterior:
/// epi via the Cholesky quadratic form, r = epi / (sigma^2 + epi), plus the
/// split-level summary.
pub fn decompose(
    post: &LaplacePosterior,
    phis: &DenseMatrix,
    split: SplitLabel,
) -> Result<(Vec<PointDecomposition>, DecompositionSummary), DiagnosticsError> {
    if phis.rows() == 0 {
        return Err(DiagnosticsError::EmptySplit);
    }
    let mut points = Vec::with_capacity(phis.rows());
    for i in 0..phis.rows() {
        let epi = quad_form_via_chol(&post.chol_precision, phis.row(i))?;
        let r = if epi == 0.0 { 0.0 } else { epi / (post.sigma2 + epi) };
        points.push(PointDecomposition { epi, r });
    }
    let n = points.len() as f64;
    let epi_mean = points.iter().map(|p| p.epi).sum::<f64>() / n;
    let r_mean = points.iter().map(|p| p.r).sum::<f64>() / n;
    let mut r_sorted: Vec<f64> = points.iter().map(|p| p.r).collect();
    r_sorted.sort_by(|a, b| a.partial_cmp(b).expect("r is always finite"));
    let frac_r_below_1pct =
        r_sorted.iter().filter(|&&r| r < 0.01).count() as f64 / n;
    let summary = DecompositionSummary {
        epi_mean,
        r_mean,
        r_median: nearest_rank(&r_sorted, 0.5),
        r_q10: nearest_rank(&r_sorted, 0.1),
        r_q90: nearest_rank(&r_sorted, 0.9),
        frac_r_below_1pct,
        trace_sigma: post.trace_sigma(),
        sigma2: post.sigma2,
        split,
    };
    Ok((points, summary))
}

/// Midranks (average rank over ties), 1-based.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &orig in &idx[i..=j] {
            ranks[orig] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman correlation between absolute errors and predicted scales:
/// Pearson correlation of midranks, with a two-sided p-value from the
/// t-approximation t = rho sqrt((n-2)/(1-rho^2)) on n-2 degrees of freedom.
/// |rho| = 1 maps to p = 0.
pub fn spearman(abs_err: &[f64], pred_scale: &[f64]) -> Result<SpearmanResult, DiagnosticsError> {
    if abs_err.len() != pred_scale.len() {
        return Err(DiagnosticsError::LengthMismatch {
            left: abs_err.len(),
            right: pred_scale.len(),
        });
    }
    let n = abs_err.len();
    if n < 3 {
        return Err(DiagnosticsError::TooFewPoints { n });
    }
    if abs_err.iter().chain(pred_scale).any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFiniteInput);
    }
    let rho = pearson(&midranks(abs_err), &midranks(pred_scale));
    let p_value = if rho.abs() >= 1.0 - 1e-12 {
        0.0
    } else {
        let dof = (n - 2) as f64;
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("dof >= 1");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(SpearmanResult { rho, p_value, n })
}

/// Refits the posterior on seed-shuffled training prefixes of each grid size
/// (backbone features fixed) and reports contraction quantities on the eval
/// split.
pub fn subsample_curves(
    phi_train: &DenseMatrix,
    y_train_centered: &[f64],
    lambda: f64,
    estimator: Sigma2Estimator,
    grid: &[usize],
    phi_eval: &DenseMatrix,
    seed: u64,
) -> Result<Vec<SubsamplePoint>, DiagnosticsError> {
    if grid.is_empty() || phi_eval.rows() == 0 {
        return Err(DiagnosticsError::EmptySplit);
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagnosticsError::GridNotAscending);
    }
    let available = phi_train.rows();
    if let Some(&too_big) = grid.iter().find(|&&n| n > available || n == 0) {
        return Err(DiagnosticsError::GridExceedsData { requested: too_big, available });
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = Vec::with_capacity(grid.len());
    for &n in grid {
        let mut phi_sub = DenseMatrix::zeros(n, phi_train.cols());
        let mut y_sub = Vec::with_capacity(n);
        for (row, &src) in order[..n].iter().enumerate() {
            phi_sub.row_mut(row).copy_from_slice(phi_train.row(src));
            y_sub.push(y_train_centered[src]);
        }
        let post = fit_llla(&phi_sub, &y_sub, lambda, estimator)?;
        let (_, summary) = decompose(&post, phi_eval, SplitLabel::Test)?;
        out.push(SubsamplePoint {
            n,
            epi_mean: summary.epi_mean,
            trace_sigma: summary.trace_sigma,
            sigma2: summary.sigma2,
        });
    }
    Ok(out)
}

/// Default subsample grid: five geometric points from max(50, 5% of n_train)
/// up to n_train.
pub fn default_subsample_grid(n_train: usize) -> Vec<usize> {
    let lo = ((n_train as f64) * 0.05).round().max(50.0).min(n_train as f64);
    let hi = n_train as f64;
    let mut grid: Vec<usize> = (0..5)
        .map(|i| (lo * (hi / lo).powf(i as f64 / 4.0)).round() as usize)
        .collect();
    grid.dedup();
    grid
}

/// The two-clause selection rule over recorded diagnostics:
/// the posterior-aware method when the median epistemic share, the posterior
/// trace, and a modest rank correlation all line up; a scale-learning
/// baseline when the share has collapsed but the correlation is substantial;
/// inconclusive otherwise.
pub fn select_method(
    summary: &DecompositionSummary,
    sp: &SpearmanResult,
    thresholds: SelectionThresholds,
) -> SelectionVerdict {
    let median_r = summary.r_median;
    let trace = summary.trace_sigma;
    let rho = sp.rho;
    let choice = if median_r > thresholds.eps_r && trace > thresholds.eps_t && rho <= thresholds.tau_rho
    {
        SelectionChoice::Claps
    } else if median_r <= thresholds.eps_r && rho > thresholds.tau_rho {
        SelectionChoice::ScaleLearning
    } else {
        SelectionChoice::Inconclusive
    };
    SelectionVerdict { choice, median_r, trace, rho, thresholds }
}
