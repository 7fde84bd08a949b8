//! Metrics (coverage, width, MAE), seed aggregation with Wilson and
//! Student-t confidence intervals, and the experiment/ablation runners that
//! tie data, training, the posterior, and calibration into reports.

use crate::backbone::{
    fit_quantile_pair_head, fit_scale_head, train, BackboneError, Loss, MlpSpec, QuantilePairHead,
    ScaleHead, TrainConfig, TrainedBackbone,
};
use crate::conformal::{
    abs_residual_score, calibrate, centrality_score, claps_interval, cqr_interval_flagged,
    cqr_score, ext_real, normalized_score, normcp_interval, residual_interval, CalibrationResult,
    ConformalError, Interval, Method,
};
use crate::data::{
    load_csv, split, synth_heteroscedastic, synth_linear_gaussian, DataError, Dataset, SplitData,
    SplitSpec, Standardizer, TargetColumn,
};
use crate::diagnostics::{
    decompose, select_method, spearman, DecompositionSummary, DiagnosticsError, SelectionThresholds,
    SelectionVerdict, SpearmanResult, SplitLabel,
};
use crate::linalg::DenseMatrix;
use crate::llla::{fit_llla, LaplacePosterior, LllaError, PredictiveGaussian, Sigma2Estimator};
use crate::prob::norm_quantile;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Confidence level used for aggregate Wilson and t intervals.
pub const INTERVAL_CONF: f64 = 0.95;
/// Floor applied to the learned scale at use time so normalized scores stay
/// finite.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Hard cap on opt-in seed parallelism.
pub const MAX_WORKERS: usize = 32;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid counts: successes {successes} of n {n}")]
    InvalidCounts { successes: usize, n: usize },
    #[error("need at least 2 values for a t interval, got {k}")]
    TooFewSeeds { k: usize },
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Llla(#[from] LllaError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Number of targets falling inside their interval (closed endpoints;
/// infinite bounds count as covering).
pub fn covered_count(intervals: &[Interval], y: &[f64]) -> Result<usize, EvalError> {
    if intervals.len() != y.len() {
        return Err(EvalError::LengthMismatch { left: intervals.len(), right: y.len() });
    }
    if intervals.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(intervals.iter().zip(y).filter(|(iv, &yi)| iv.contains(yi)).count())
}

/// Fraction of targets covered, exactly covered_count / n.
pub fn coverage(intervals: &[Interval], y: &[f64]) -> Result<f64, EvalError> {
    Ok(covered_count(intervals, y)? as f64 / y.len() as f64)
}

/// Mean interval width; any infinite interval makes the mean +infinity.
pub fn mean_width(intervals: &[Interval]) -> Result<f64, EvalError> {
    if intervals.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if intervals.iter().any(|iv| !iv.is_finite()) {
        return Ok(f64::INFINITY);
    }
    Ok(intervals.iter().map(Interval::width).sum::<f64>() / intervals.len() as f64)
}

/// How many intervals have an infinite endpoint.
pub fn infinite_count(intervals: &[Interval]) -> usize {
    intervals.iter().filter(|iv| !iv.is_finite()).count()
}

/// Mean absolute error of point predictions.
pub fn mae(mu: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if mu.len() != y.len() {
        return Err(EvalError::LengthMismatch { left: mu.len(), right: y.len() });
    }
    if mu.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(mu.iter().zip(y).map(|(m, yi)| (yi - m).abs()).sum::<f64>() / y.len() as f64)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(
    successes: usize,
    n: usize,
    conf: f64,
) -> Result<(f64, f64), EvalError> {
    if n == 0 || successes > n {
        return Err(EvalError::InvalidCounts { successes, n });
    }
    if !(conf > 0.0 && conf < 1.0) {
        return Err(EvalError::InvalidConfidence(conf));
    }
    let z = norm_quantile((1.0 + conf) / 2.0).expect("conf validated");
    let nf = n as f64;
    let p_hat = successes as f64 / nf;
    let z2n = z * z / nf;
    let denom = 1.0 + z2n;
    let center = (p_hat + z2n / 2.0) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    Ok(((center - half).clamp(0.0, 1.0), (center + half).clamp(0.0, 1.0)))
}

/// Student-t confidence interval for a mean over k values:
/// mean +- t_{conf, k-1} * sd / sqrt(k).
pub fn t_interval(values: &[f64], conf: f64) -> Result<(f64, f64), EvalError> {
    let k = values.len();
    if k < 2 {
        return Err(EvalError::TooFewSeeds { k });
    }
    if !(conf > 0.0 && conf < 1.0) {
        return Err(EvalError::InvalidConfidence(conf));
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (k - 1) as f64)
        .expect("k >= 2 gives positive dof")
        .inverse_cdf((1.0 + conf) / 2.0);
    let half = t * sd / (k as f64).sqrt();
    Ok((mean - half, mean + half))
}

fn sample_sd(values: &[f64]) -> f64 {
    let k = values.len();
    if k < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Gradient-descent knobs shared by backbone and head training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 64, learning_rate: 1e-3 }
    }
}

impl TrainParams {
    fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Network architecture and its training knobs. Absent backbone means
/// identity features: phi(x) is the standardized input row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainParams,
}

fn default_delimiter() -> char {
    ','
}

fn default_linear_sigma() -> f64 {
    1.0
}

fn default_het_base() -> f64 {
    0.1
}

fn default_het_slope() -> f64 {
    0.5
}

/// Where the data comes from: a CSV on disk or one of the two synthetic
/// generators (drawn fresh per seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Csv {
        path: Option<PathBuf>,
        target: TargetColumn,
        #[serde(default = "default_delimiter")]
        delimiter: char,
    },
    LinearGaussian {
        n: usize,
        d: usize,
        #[serde(default = "default_linear_sigma")]
        sigma: f64,
        #[serde(default)]
        true_w: Option<Vec<f64>>,
    },
    Heteroscedastic {
        n: usize,
        #[serde(default = "default_het_base")]
        base: f64,
        #[serde(default = "default_het_slope")]
        slope: f64,
    },
}

fn default_run_name() -> String {
    "run".into()
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_target_cov() -> f64 {
    0.9
}

fn default_lambda() -> f64 {
    crate::llla::DEFAULT_LAMBDA
}

/// Full experiment description. Every field has a default except the
/// dataset; a report echoes the resolved config back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_name")]
    pub run_name: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub backbone: Option<BackboneConfig>,
    /// Training knobs for the auxiliary scale / quantile heads.
    #[serde(default)]
    pub head_train: TrainParams,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_target_cov")]
    pub target_cov: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub sigma2_estimator: Sigma2Estimator,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub selection: SelectionThresholds,
    /// 0 or 1 runs seeds sequentially; larger values enable seed-level
    /// parallelism, capped at [`MAX_WORKERS`].
    #[serde(default)]
    pub workers: usize,
    /// Fault-injection hook for exercising the partial-failure path: listed
    /// methods fail on every seed with a synthetic error.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inject_failures: Vec<Method>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl ExperimentConfig {
    /// Semantic validation beyond what parsing enforces; messages name the
    /// offending field.
    pub fn validate(&self) -> Result<(), EvalError> {
        if let DatasetConfig::Csv { path, delimiter, .. } = &self.dataset {
            match path {
                None => {
                    return Err(EvalError::ConfigInvalid(
                        "dataset.path is required for csv datasets".into(),
                    ))
                }
                Some(p) if p.as_os_str().is_empty() => {
                    return Err(EvalError::ConfigInvalid("dataset.path must be nonempty".into()))
                }
                _ => {}
            }
            if !delimiter.is_ascii() {
                return Err(EvalError::ConfigInvalid(
                    "dataset.delimiter must be a single ASCII character".into(),
                ));
            }
        }
        if let DatasetConfig::LinearGaussian { d, true_w: Some(w), .. } = &self.dataset {
            if w.len() != *d {
                return Err(EvalError::ConfigInvalid(format!(
                    "dataset.true_w has {} entries but dataset.d = {d}",
                    w.len()
                )));
            }
        }
        if self.methods.is_empty() {
            return Err(EvalError::ConfigInvalid("methods must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::ConfigInvalid("seeds must be nonempty".into()));
        }
        if !(self.target_cov > 0.0 && self.target_cov < 1.0) {
            return Err(EvalError::ConfigInvalid(format!(
                "target_cov must lie in (0, 1), got {}",
                self.target_cov
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(EvalError::ConfigInvalid(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if let Some(bb) = &self.backbone {
            if bb.hidden.is_empty() || bb.hidden.iter().any(|&w| w == 0) {
                return Err(EvalError::ConfigInvalid(
                    "backbone.hidden must be a nonempty list of positive widths".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

/// Test-set metrics for one (method, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub seed: u64,
    pub coverage: f64,
    pub covered_count: usize,
    pub n_test: usize,
    #[serde(with = "ext_real")]
    pub width_mean: f64,
    pub width_infinite_count: usize,
    pub mae: f64,
}

/// Per-method aggregation across seeds. Coverage confidence bounds come from
/// a Wilson interval on the pooled covered counts; width and MAE use a
/// Student-t interval over the per-seed means (degenerate at a single seed).
/// Any seed with infinite mean width makes the aggregate width fields
/// infinite, with the count of such seeds recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub coverage_mean: f64,
    pub coverage_sd: f64,
    pub pooled_covered: usize,
    pub pooled_n: usize,
    pub coverage_wilson_lo: f64,
    pub coverage_wilson_hi: f64,
    #[serde(with = "ext_real")]
    pub width_mean: f64,
    #[serde(with = "ext_real")]
    pub width_sd: f64,
    #[serde(with = "ext_real")]
    pub width_t_lo: f64,
    #[serde(with = "ext_real")]
    pub width_t_hi: f64,
    pub width_infinite_seeds: usize,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub mae_t_lo: f64,
    pub mae_t_hi: f64,
}

/// Posterior diagnostics computed once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub calibration: DecompositionSummary,
    pub test: DecompositionSummary,
    pub spearman: SpearmanResult,
    pub verdict: SelectionVerdict,
    pub evidence_fell_back: bool,
}

/// Calibration outcome for one (method, seed) cell, plus how many test
/// intervals the crossed-quantile clamp touched (nonzero only for the
/// quantile-pair method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub seed: u64,
    pub result: CalibrationResult,
    pub cqr_clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub seed: u64,
    pub method: Method,
    pub message: String,
}

/// Report provenance notes: which statistical conventions were used and
/// which seeds needed the evidence-to-residual fallback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub wilson_on_pooled_counts: bool,
    pub spearman_p_method: String,
    pub evidence_fallback_seeds: Vec<u64>,
}

/// Everything a run produces, serialized as report.json. Deliberately
/// timestamp-free: replaying a config yields byte-identical output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<AggregateRow>,
    pub diagnostics: Vec<SeedDiagnostics>,
    pub calibrations: Vec<CalibrationRecord>,
    pub failures: Vec<MethodFailure>,
    pub metadata: ReportMetadata,
}

/// A fitted per-seed model, sufficient to score new rows: optional backbone,
/// standardization, posterior, auxiliary heads, and the calibrated
/// thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub seed: u64,
    pub backbone: Option<TrainedBackbone>,
    pub standardizer: Standardizer,
    pub posterior: LaplacePosterior,
    pub scale_head: Option<ScaleHead>,
    pub quantile_head: Option<QuantilePairHead>,
    pub feature_names: Vec<String>,
    pub target_cov: f64,
    pub calibrations: Vec<CalibrationResult>,
}

impl SavedModel {
    /// phi(x) for a raw input row: backbone features, or the standardized
    /// row when no backbone was trained.
    pub fn features_row(&self, x_raw: &[f64]) -> Result<Vec<f64>, EvalError> {
        match &self.backbone {
            Some(bb) => Ok(bb.features(x_raw)?),
            None => Ok(self.standardizer.transform_row(x_raw)),
        }
    }

    /// Posterior predictive at a raw input row.
    pub fn predictive(&self, x_raw: &[f64]) -> Result<PredictiveGaussian, EvalError> {
        let phi = self.features_row(x_raw)?;
        Ok(self.posterior.predictive(&phi, self.standardizer.y_mean)?)
    }

    pub fn calibration_for(&self, method: Method) -> Option<&CalibrationResult> {
        self.calibrations.iter().find(|c| c.method == method)
    }
}

/// Per-seed byproducts that do not belong in the report: the saved model and
/// the raw calibration rows (so callers can export them for later scoring).
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub model: SavedModel,
    pub cal_x: DenseMatrix,
    pub cal_y: Vec<f64>,
}

/// A full experiment run: the serializable report plus per-seed artifacts.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub artifacts: Vec<SeedArtifacts>,
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Materializes the dataset for one seed: CSV data is shared across seeds
/// (only the split reshuffles); synthetic data is drawn fresh per seed.
pub fn materialize_dataset(
    cfg: &DatasetConfig,
    seed: u64,
    csv_cache: Option<&Dataset>,
) -> Result<Dataset, EvalError> {
    match cfg {
        DatasetConfig::Csv { path, target, delimiter } => match csv_cache {
            Some(ds) => Ok(ds.clone()),
            None => {
                let path = path.as_ref().ok_or_else(|| {
                    EvalError::ConfigInvalid("dataset.path is required for csv datasets".into())
                })?;
                Ok(load_csv(path, target, *delimiter as u8)?)
            }
        },
        DatasetConfig::LinearGaussian { n, d, sigma, true_w } => {
            let w = match true_w {
                Some(w) => w.clone(),
                None => vec![1.0 / (*d as f64).sqrt(); *d],
            };
            Ok(synth_linear_gaussian(*n, *d, &w, *sigma, seed))
        }
        DatasetConfig::Heteroscedastic { n, base, slope } => {
            Ok(synth_heteroscedastic(*n, seed, *base, *slope))
        }
    }
}

/// Split plus features for one seed: the backbone (if any) is trained
/// exactly once here and reused by every method and every ablation cell.
struct PreparedSeed {
    seed: u64,
    sd: SplitData,
    backbone: Option<TrainedBackbone>,
    phi_train: DenseMatrix,
    phi_cal: DenseMatrix,
    phi_test: DenseMatrix,
    y_train_centered: Vec<f64>,
}

fn prepare_seed(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<PreparedSeed, EvalError> {
    let spec = SplitSpec { seed, ..cfg.split.clone() };
    let sd = split(dataset, &spec)?;
    let stats = sd.standardizer.clone();
    let (backbone, phi_train, phi_cal, phi_test) = match &cfg.backbone {
        Some(bb) => {
            let mlp = MlpSpec::point(dataset.dim(), bb.hidden.clone());
            let trained = train(
                &mlp,
                &sd.train.x,
                &sd.train.y,
                &stats,
                Loss::Mse,
                &bb.train.to_train_config(seed),
            )?;
            let pt = trained.features_matrix(&sd.train.x)?;
            let pc = trained.features_matrix(&sd.cal.x)?;
            let pe = trained.features_matrix(&sd.test.x)?;
            (Some(trained), pt, pc, pe)
        }
        None => (
            None,
            stats.transform_x(&sd.train.x),
            stats.transform_x(&sd.cal.x),
            stats.transform_x(&sd.test.x),
        ),
    };
    let y_train_centered = stats.center_y(&sd.train.y);
    Ok(PreparedSeed { seed, sd, backbone, phi_train, phi_cal, phi_test, y_train_centered })
}

/// Fits the posterior with the configured noise estimator; a degenerate
/// evidence fixed point falls back to the residual estimator with a flag.
fn fit_posterior(
    prep: &PreparedSeed,
    lambda: f64,
    estimator: Sigma2Estimator,
) -> Result<(LaplacePosterior, bool), EvalError> {
    match fit_llla(&prep.phi_train, &prep.y_train_centered, lambda, estimator) {
        Ok(post) => Ok((post, false)),
        Err(LllaError::DegenerateDof { n, gamma }) if estimator == Sigma2Estimator::Evidence => {
            log::warn!(
                "evidence estimator degenerate (n = {n}, gamma = {gamma:.3}); \
                 falling back to the residual estimator"
            );
            let post = fit_llla(
                &prep.phi_train,
                &prep.y_train_centered,
                lambda,
                Sigma2Estimator::Residual,
            )?;
            Ok((post, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// Point predictions for the residual-based baselines: the network's point
/// head when a backbone exists, otherwise the posterior mean.
fn point_predictions(
    prep: &PreparedSeed,
    preds: &[PredictiveGaussian],
    x_raw: &DenseMatrix,
) -> Result<Vec<f64>, EvalError> {
    match &prep.backbone {
        Some(bb) => (0..x_raw.rows())
            .map(|i| bb.predict_point(x_raw.row(i)).map_err(EvalError::from))
            .collect(),
        None => Ok(preds.iter().map(|p| p.mu).collect()),
    }
}

struct MethodEval {
    row: MetricsRow,
    record: CalibrationRecord,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_method(
    method: Method,
    prep: &PreparedSeed,
    posterior: &LaplacePosterior,
    preds_cal: &[PredictiveGaussian],
    preds_test: &[PredictiveGaussian],
    mu_point_cal: &[f64],
    mu_point_test: &[f64],
    scale_head: Option<&ScaleHead>,
    quantile_head: Option<&QuantilePairHead>,
    target_cov: f64,
) -> Result<MethodEval, EvalError> {
    let y_cal = &prep.sd.cal.y;
    let y_test = &prep.sd.test.y;
    let y_mean = prep.sd.standardizer.y_mean;
    let n_test = y_test.len();
    let mut cqr_clamped = 0usize;

    let (cal_result, intervals, mu_for_mae): (CalibrationResult, Vec<Interval>, Vec<f64>) =
        match method {
            Method::Claps => {
                let scores: Vec<f64> = preds_cal
                    .iter()
                    .zip(y_cal)
                    .map(|(p, &y)| centrality_score(p, y))
                    .collect();
                let cal = calibrate(Method::Claps, &scores, target_cov)?;
                let intervals: Vec<Interval> =
                    preds_test.iter().map(|p| claps_interval(p, cal.threshold)).collect();
                let mu: Vec<f64> = preds_test.iter().map(|p| p.mu).collect();
                // Closed-form audit: the reported mean width must equal
                // 2 sqrt(v) z_t averaged over the test split.
                if cal.threshold > 0.0 && cal.threshold < 0.5 {
                    let z = norm_quantile(1.0 - cal.threshold).expect("threshold in (0, 0.5)");
                    let closed: f64 = preds_test.iter().map(|p| 2.0 * p.v.sqrt() * z).sum::<f64>()
                        / n_test as f64;
                    let measured = mean_width(&intervals)?;
                    assert!(
                        (closed - measured).abs() <= 1e-9 * closed.abs().max(1.0),
                        "width audit failed: closed form {closed} vs measured {measured}"
                    );
                }
                (cal, intervals, mu)
            }
            Method::BaselineCp => {
                let scores: Vec<f64> = mu_point_cal
                    .iter()
                    .zip(y_cal)
                    .map(|(&m, &y)| abs_residual_score(m, y))
                    .collect();
                let cal = calibrate(Method::BaselineCp, &scores, target_cov)?;
                let intervals: Vec<Interval> = mu_point_test
                    .iter()
                    .map(|&m| residual_interval(m, cal.threshold))
                    .collect::<Result<_, _>>()?;
                (cal, intervals, mu_point_test.to_vec())
            }
            Method::NormCp => {
                let head = scale_head.expect("scale head fitted for norm_cp");
                let h_cal: Vec<f64> = (0..prep.phi_cal.rows())
                    .map(|i| head.forward(prep.phi_cal.row(i)).max(SCALE_FLOOR))
                    .collect();
                let scores: Vec<f64> = mu_point_cal
                    .iter()
                    .zip(y_cal)
                    .zip(&h_cal)
                    .map(|((&m, &y), &h)| normalized_score(m, h, y))
                    .collect::<Result<_, _>>()?;
                let cal = calibrate(Method::NormCp, &scores, target_cov)?;
                let intervals: Vec<Interval> = (0..n_test)
                    .map(|i| {
                        let h = head.forward(prep.phi_test.row(i)).max(SCALE_FLOOR);
                        normcp_interval(mu_point_test[i], h, cal.threshold)
                    })
                    .collect::<Result<_, _>>()?;
                (cal, intervals, mu_point_test.to_vec())
            }
            Method::Cqr => {
                let head = quantile_head.expect("quantile head fitted for cqr");
                let pair_at = |phi: &[f64]| {
                    let (lo_c, hi_c) = head.forward(phi);
                    (lo_c + y_mean, hi_c + y_mean)
                };
                let scores: Vec<f64> = (0..prep.phi_cal.rows())
                    .map(|i| {
                        let (lo, hi) = pair_at(prep.phi_cal.row(i));
                        cqr_score(lo, hi, y_cal[i])
                    })
                    .collect();
                let cal = calibrate(Method::Cqr, &scores, target_cov)?;
                let mut intervals = Vec::with_capacity(n_test);
                let mut mu = Vec::with_capacity(n_test);
                for i in 0..n_test {
                    let (lo, hi) = pair_at(prep.phi_test.row(i));
                    let (iv, clamped) = cqr_interval_flagged(lo, hi, cal.threshold)?;
                    if clamped {
                        cqr_clamped += 1;
                    }
                    intervals.push(iv);
                    mu.push(0.5 * (lo + hi));
                }
                (cal, intervals, mu)
            }
        };

    let covered = covered_count(&intervals, y_test)?;
    // Self-audit: recount membership the long way.
    let recount = intervals
        .iter()
        .zip(y_test)
        .filter(|(iv, &y)| iv.lo <= y && y <= iv.hi)
        .count();
    assert_eq!(covered, recount, "coverage self-audit failed");

    let row = MetricsRow {
        method,
        seed: prep.seed,
        coverage: covered as f64 / n_test as f64,
        covered_count: covered,
        n_test,
        width_mean: mean_width(&intervals)?,
        width_infinite_count: infinite_count(&intervals),
        mae: mae(&mu_for_mae, y_test)?,
    };
    let record = CalibrationRecord { seed: prep.seed, result: cal_result, cqr_clamped };
    let _ = posterior; // posterior-specific work happens through preds_*
    Ok(MethodEval { row, record })
}

struct SeedOutcome {
    rows: Vec<MetricsRow>,
    records: Vec<CalibrationRecord>,
    failures: Vec<MethodFailure>,
    diagnostics: SeedDiagnostics,
    artifacts: SeedArtifacts,
}

fn run_seed(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<SeedOutcome, EvalError> {
    let prep = prepare_seed(cfg, dataset, seed)?;
    let stats = &prep.sd.standardizer;
    let (posterior, fell_back) = fit_posterior(&prep, cfg.lambda, cfg.sigma2_estimator)?;

    let predictive_rows = |phis: &DenseMatrix| -> Result<Vec<PredictiveGaussian>, EvalError> {
        (0..phis.rows())
            .map(|i| posterior.predictive(phis.row(i), stats.y_mean).map_err(EvalError::from))
            .collect()
    };
    let preds_cal = predictive_rows(&prep.phi_cal)?;
    let preds_test = predictive_rows(&prep.phi_test)?;
    let mu_point_cal = point_predictions(&prep, &preds_cal, &prep.sd.cal.x)?;
    let mu_point_test = point_predictions(&prep, &preds_test, &prep.sd.test.x)?;

    // Auxiliary heads, trained once per seed on frozen features.
    let scale_head = if cfg.methods.contains(&Method::NormCp) {
        let mu_train = point_predictions(&prep, &predictive_rows(&prep.phi_train)?, &prep.sd.train.x)?;
        let targets: Vec<f64> = prep
            .sd
            .train
            .y
            .iter()
            .zip(&mu_train)
            .map(|(&y, &m)| (y - m).abs())
            .collect();
        Some(fit_scale_head(
            &prep.phi_train,
            &targets,
            &cfg.head_train.to_train_config(seed ^ 0x5CA1E),
        )?)
    } else {
        None
    };
    let quantile_head = if cfg.methods.contains(&Method::Cqr) {
        let alpha = 1.0 - cfg.target_cov;
        Some(fit_quantile_pair_head(
            &prep.phi_train,
            &stats.center_y(&prep.sd.train.y),
            alpha / 2.0,
            1.0 - alpha / 2.0,
            &cfg.head_train.to_train_config(seed ^ 0xC92A),
        )?)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &method in &cfg.methods {
        if cfg.inject_failures.contains(&method) {
            failures.push(MethodFailure {
                seed,
                method,
                message: "injected failure (fault-injection hook)".into(),
            });
            continue;
        }
        match evaluate_method(
            method,
            &prep,
            &posterior,
            &preds_cal,
            &preds_test,
            &mu_point_cal,
            &mu_point_test,
            scale_head.as_ref(),
            quantile_head.as_ref(),
            cfg.target_cov,
        ) {
            Ok(ev) => {
                rows.push(ev.row);
                records.push(ev.record);
            }
            Err(e) => {
                log::warn!("method {method} failed on seed {seed}: {e}");
                failures.push(MethodFailure { seed, method, message: e.to_string() });
            }
        }
    }

    let (_, cal_summary) = decompose(&posterior, &prep.phi_cal, SplitLabel::Calibration)?;
    let (_, test_summary) = decompose(&posterior, &prep.phi_test, SplitLabel::Test)?;
    let abs_err: Vec<f64> = preds_test
        .iter()
        .zip(&prep.sd.test.y)
        .map(|(p, &y)| (y - p.mu).abs())
        .collect();
    let pred_sd: Vec<f64> = preds_test.iter().map(|p| p.v.sqrt()).collect();
    let sp = spearman(&abs_err, &pred_sd)?;
    let verdict = select_method(&test_summary, &sp, cfg.selection);

    let diagnostics = SeedDiagnostics {
        seed,
        calibration: cal_summary,
        test: test_summary,
        spearman: sp,
        verdict,
        evidence_fell_back: fell_back,
    };
    let model = SavedModel {
        seed,
        backbone: prep.backbone.clone(),
        standardizer: stats.clone(),
        posterior,
        scale_head,
        quantile_head,
        feature_names: dataset.feature_names.clone(),
        target_cov: cfg.target_cov,
        calibrations: records.iter().map(|r| r.result).collect(),
    };
    let artifacts = SeedArtifacts {
        seed,
        model,
        cal_x: prep.sd.cal.x.clone(),
        cal_y: prep.sd.cal.y.clone(),
    };
    Ok(SeedOutcome { rows, records, failures, diagnostics, artifacts })
}

fn aggregate_rows(rows: &[MetricsRow]) -> Result<Vec<AggregateRow>, EvalError> {
    let mut out = Vec::new();
    for method in Method::ALL {
        let mrows: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == method).collect();
        if mrows.is_empty() {
            continue;
        }
        let seeds: Vec<u64> = mrows.iter().map(|r| r.seed).collect();
        let coverages: Vec<f64> = mrows.iter().map(|r| r.coverage).collect();
        let widths: Vec<f64> = mrows.iter().map(|r| r.width_mean).collect();
        let maes: Vec<f64> = mrows.iter().map(|r| r.mae).collect();
        let pooled_covered: usize = mrows.iter().map(|r| r.covered_count).sum();
        let pooled_n: usize = mrows.iter().map(|r| r.n_test).sum();
        let (w_lo, w_hi) = wilson_interval(pooled_covered, pooled_n, INTERVAL_CONF)?;

        let k = mrows.len();
        let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let t_of = |v: &[f64]| -> (f64, f64) {
            if v.len() >= 2 {
                t_interval(v, INTERVAL_CONF).expect("k >= 2")
            } else {
                (v[0], v[0])
            }
        };

        let infinite_seeds = widths.iter().filter(|w| w.is_infinite()).count();
        let (width_mean, width_sd, width_t) = if infinite_seeds > 0 {
            (f64::INFINITY, f64::INFINITY, (f64::INFINITY, f64::INFINITY))
        } else {
            (mean_of(&widths), sample_sd(&widths), t_of(&widths))
        };
        let mae_t = t_of(&maes);
        let _ = k;

        out.push(AggregateRow {
            method,
            seeds,
            coverage_mean: mean_of(&coverages),
            coverage_sd: sample_sd(&coverages),
            pooled_covered,
            pooled_n,
            coverage_wilson_lo: w_lo,
            coverage_wilson_hi: w_hi,
            width_mean,
            width_sd,
            width_t_lo: width_t.0,
            width_t_hi: width_t.1,
            width_infinite_seeds: infinite_seeds,
            mae_mean: mean_of(&maes),
            mae_sd: sample_sd(&maes),
            mae_t_lo: mae_t.0,
            mae_t_hi: mae_t.1,
        });
    }
    Ok(out)
}

/// Runs the full experiment: per seed — split, train, fit the posterior,
/// calibrate every requested method, evaluate on the test split, and compute
/// diagnostics; then aggregate. Per-method failures are recorded and the run
/// continues. Deterministic for a fixed config, including under parallelism.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun, EvalError> {
    cfg.validate()?;
    let csv_base = match &cfg.dataset {
        DatasetConfig::Csv { .. } => Some(materialize_dataset(&cfg.dataset, 0, None)?),
        _ => None,
    };

    let one_seed = |&seed: &u64| -> Result<SeedOutcome, EvalError> {
        let dataset = materialize_dataset(&cfg.dataset, seed, csv_base.as_ref())?;
        run_seed(cfg, &dataset, seed)
    };

    let outcomes: Vec<SeedOutcome> = if cfg.workers > 1 {
        let workers = cfg.workers.min(MAX_WORKERS);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| EvalError::ConfigInvalid(format!("workers: {e}")))?;
        pool.install(|| cfg.seeds.par_iter().map(one_seed).collect::<Result<_, _>>())?
    } else {
        cfg.seeds.iter().map(one_seed).collect::<Result<_, _>>()?
    };

    let mut rows = Vec::new();
    let mut calibrations = Vec::new();
    let mut failures = Vec::new();
    let mut diagnostics = Vec::new();
    let mut artifacts = Vec::new();
    let mut fallback_seeds = Vec::new();
    for o in outcomes {
        if o.diagnostics.evidence_fell_back {
            fallback_seeds.push(o.diagnostics.seed);
        }
        rows.extend(o.rows);
        calibrations.extend(o.records);
        failures.extend(o.failures);
        diagnostics.push(o.diagnostics);
        artifacts.push(o.artifacts);
    }
    let aggregates = aggregate_rows(&rows)?;
    let report = ExperimentReport {
        config: cfg.clone(),
        rows,
        aggregates,
        diagnostics,
        calibrations,
        failures,
        metadata: ReportMetadata {
            wilson_on_pooled_counts: true,
            spearman_p_method: "t_approximation".into(),
            evidence_fallback_seeds: fallback_seeds,
        },
    };
    Ok(ExperimentRun { report, artifacts })
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// One (lambda, estimator, seed) cell of the ablation grid, evaluated with
/// the posterior-aware method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub estimator: Sigma2Estimator,
    pub seed: u64,
    pub coverage: f64,
    pub covered_count: usize,
    pub n_test: usize,
    #[serde(with = "ext_real")]
    pub width_mean: f64,
    pub threshold: f64,
    pub sigma2_hat: f64,
}

/// Seed-averaged ablation cell: the four reported columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub lambda: f64,
    pub estimator: Sigma2Estimator,
    pub coverage_mean: f64,
    #[serde(with = "ext_real")]
    pub width_mean: f64,
    pub threshold_mean: f64,
    pub sigma2_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub lambdas: Vec<f64>,
    pub estimators: Vec<Sigma2Estimator>,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
    /// Observed (not asserted) width-vs-lambda trend per estimator.
    pub trend_note: String,
    pub metadata: ReportMetadata,
}

/// The default ablation grid for the regularizer.
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

fn classify_trend(widths: &[f64]) -> &'static str {
    if widths.iter().any(|w| !w.is_finite()) {
        return "contains-infinite";
    }
    let scale = widths.iter().fold(0.0f64, |a, &w| a.max(w.abs())).max(1e-12);
    let tol = 1e-3 * scale;
    let up = widths.windows(2).all(|p| p[1] >= p[0] - tol);
    let down = widths.windows(2).all(|p| p[1] <= p[0] + tol);
    match (up, down) {
        (true, true) => "flat",
        (true, false) => "nondecreasing",
        (false, true) => "nonincreasing",
        (false, false) => "mixed",
    }
}

/// Runs the lambda x estimator ablation: one trained backbone per seed, with
/// only the posterior refit and recalibration per cell.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    estimators: &[Sigma2Estimator],
) -> Result<AblationReport, EvalError> {
    cfg.validate()?;
    if lambdas.is_empty() {
        return Err(EvalError::ConfigInvalid("ablation lambda grid must be nonempty".into()));
    }
    if let Some(bad) = lambdas.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(EvalError::ConfigInvalid(format!(
            "ablation lambdas must be positive and finite, got {bad}"
        )));
    }
    if estimators.is_empty() {
        return Err(EvalError::ConfigInvalid("ablation estimator grid must be nonempty".into()));
    }
    let csv_base = match &cfg.dataset {
        DatasetConfig::Csv { .. } => Some(materialize_dataset(&cfg.dataset, 0, None)?),
        _ => None,
    };

    let mut rows = Vec::new();
    let mut fallback_seeds = Vec::new();
    for &seed in &cfg.seeds {
        let dataset = materialize_dataset(&cfg.dataset, seed, csv_base.as_ref())?;
        let prep = prepare_seed(cfg, &dataset, seed)?;
        let stats = &prep.sd.standardizer;
        for &estimator in estimators {
            for &lambda in lambdas {
                let (posterior, fell_back) = fit_posterior(&prep, lambda, estimator)?;
                if fell_back && !fallback_seeds.contains(&seed) {
                    fallback_seeds.push(seed);
                }
                let preds_cal: Vec<PredictiveGaussian> = (0..prep.phi_cal.rows())
                    .map(|i| posterior.predictive(prep.phi_cal.row(i), stats.y_mean))
                    .collect::<Result<_, _>>()?;
                let preds_test: Vec<PredictiveGaussian> = (0..prep.phi_test.rows())
                    .map(|i| posterior.predictive(prep.phi_test.row(i), stats.y_mean))
                    .collect::<Result<_, _>>()?;
                let scores: Vec<f64> = preds_cal
                    .iter()
                    .zip(&prep.sd.cal.y)
                    .map(|(p, &y)| centrality_score(p, y))
                    .collect();
                let cal = calibrate(Method::Claps, &scores, cfg.target_cov)?;
                let intervals: Vec<Interval> =
                    preds_test.iter().map(|p| claps_interval(p, cal.threshold)).collect();
                let covered = covered_count(&intervals, &prep.sd.test.y)?;
                rows.push(AblationRow {
                    lambda,
                    estimator,
                    seed,
                    coverage: covered as f64 / prep.sd.test.y.len() as f64,
                    covered_count: covered,
                    n_test: prep.sd.test.y.len(),
                    width_mean: mean_width(&intervals)?,
                    threshold: cal.threshold,
                    sigma2_hat: posterior.sigma2,
                });
            }
        }
    }

    let mut cells = Vec::new();
    for &estimator in estimators {
        for &lambda in lambdas {
            let cell_rows: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.estimator == estimator && r.lambda == lambda)
                .collect();
            let kf = cell_rows.len() as f64;
            let width_mean = if cell_rows.iter().any(|r| r.width_mean.is_infinite()) {
                f64::INFINITY
            } else {
                cell_rows.iter().map(|r| r.width_mean).sum::<f64>() / kf
            };
            cells.push(AblationCell {
                lambda,
                estimator,
                coverage_mean: cell_rows.iter().map(|r| r.coverage).sum::<f64>() / kf,
                width_mean,
                threshold_mean: cell_rows.iter().map(|r| r.threshold).sum::<f64>() / kf,
                sigma2_mean: cell_rows.iter().map(|r| r.sigma2_hat).sum::<f64>() / kf,
            });
        }
    }

    let trend_note = estimators
        .iter()
        .map(|&est| {
            let widths: Vec<f64> = cells
                .iter()
                .filter(|c| c.estimator == est)
                .map(|c| c.width_mean)
                .collect();
            format!("width vs lambda ({est}): {}", classify_trend(&widths))
        })
        .collect::<Vec<_>>()
        .join("; ");

    Ok(AblationReport {
        config: cfg.clone(),
        lambdas: lambdas.to_vec(),
        estimators: estimators.to_vec(),
        rows,
        cells,
        trend_note,
        metadata: ReportMetadata {
            wilson_on_pooled_counts: true,
            spearman_p_method: "t_approximation".into(),
            evidence_fallback_seeds: fallback_seeds,
        },
    })
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// f64 -> CSV cell: shortest round-trip decimal; infinities as "inf"/"-inf".
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes report.json, metrics.csv, and diagnostics.json into `dir`.
pub fn write_experiment_outputs(report: &ExperimentReport, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    write_json(report, &dir.join("report.json"))?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record([
        "method",
        "seed",
        "coverage",
        "covered_count",
        "n_test",
        "width_mean",
        "width_infinite_count",
        "mae",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.method.to_string(),
            r.seed.to_string(),
            fmt_f64(r.coverage),
            r.covered_count.to_string(),
            r.n_test.to_string(),
            fmt_f64(r.width_mean),
            r.width_infinite_count.to_string(),
            fmt_f64(r.mae),
        ])?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct DiagnosticsFile<'a> {
        diagnostics: &'a [SeedDiagnostics],
        metadata: &'a ReportMetadata,
    }
    write_json(
        &DiagnosticsFile { diagnostics: &report.diagnostics, metadata: &report.metadata },
        &dir.join("diagnostics.json"),
    )
}

/// Writes ablation.json (per-seed rows and cells) and ablation.csv (one row
/// per seed-averaged grid cell, so the default 5x2 grid gives 10 rows) into
/// `dir`.
pub fn write_ablation_outputs(report: &AblationReport, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    write_json(report, &dir.join("ablation.json"))?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record([
        "lambda",
        "estimator",
        "coverage_mean",
        "width_mean",
        "threshold_mean",
        "sigma2_mean",
    ])?;
    for c in &report.cells {
        w.write_record([
            fmt_f64(c.lambda),
            c.estimator.to_string(),
            fmt_f64(c.coverage_mean),
            fmt_f64(c.width_mean),
            fmt_f64(c.threshold_mean),
            fmt_f64(c.sigma2_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}
