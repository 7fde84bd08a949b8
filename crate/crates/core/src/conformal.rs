//! Conformity scores, split-conformal rank thresholds, and interval
//! construction for the four methods.
//!
//! The centrality method keeps points whose two-sided posterior tail mass is
//! at least a calibrated threshold t; its interval at a point is the central
//! 1-2t slice of the predictive Gaussian. The three baselines calibrate an
//! upper quantile q of their nonnegative scores instead.
//!
//! Rank convention. With m calibration scores and tail mass alpha, the rank
//! is k = ceil((m+1) alpha). For the lower-tail (centrality) rule the
//! threshold is the order statistic s_(k-1) with s_(0) := 0, so the
//! acceptance event {s* >= s_(k-1)} has probability exactly
//! (m+2-k)/(m+1) >= 1 - alpha under exchangeability; k = 1 yields the whole
//! line. For the upper-tail rule the threshold is s_(k) with
//! k = ceil((m+1) cov), and k > m yields an infinite interval. Ties share
//! the order statistic (stable sort), which only ever over-covers.

use crate::llla::PredictiveGaussian;
use crate::prob::{norm_quantile, norm_sf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Serde adapter for extended-real fields: JSON has no infinity literal
/// (`serde_json` silently writes `null`), so non-finite values round-trip as
/// the strings "inf" / "-inf" / "nan" while finite values stay numbers.
pub mod ext_real {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            "nan".serialize(s)
        } else if *v > 0.0 {
            "inf".serialize(s)
        } else {
            "-inf".serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => other.parse().map_err(serde::de::Error::custom),
            },
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConformalError {
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("scale must be positive and finite, got {0}")]
    NonpositiveScale(f64),
    #[error("calibrated radius must be nonnegative, got {0}")]
    NegativeQ(f64),
    #[error("target coverage must lie strictly in (0, 1), got {0}")]
    InvalidTargetCoverage(f64),
    #[error("non-finite calibration score at position {0}")]
    NonFiniteScore(usize),
}

/// The four interval methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Claps,
    BaselineCp,
    NormCp,
    Cqr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Claps, Method::BaselineCp, Method::NormCp, Method::Cqr];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Claps => "claps",
            Method::BaselineCp => "baseline_cp",
            Method::NormCp => "norm_cp",
            Method::Cqr => "cqr",
        };
        write!(f, "{s}")
    }
}

/// Output of calibration: the threshold (a tail mass t for the centrality
/// method, a score radius q otherwise), the calibration count, and the rank
/// behind the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: Method,
    #[serde(with = "ext_real")]
    pub threshold: f64,
    pub m: usize,
    pub target_cov: f64,
    pub rank_k: usize,
}

/// A closed interval on the extended reals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "ext_real")]
    pub lo: f64,
    #[serde(with = "ext_real")]
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "interval endpoints out of order: [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }
}

/// Two-sided posterior tail mass of y under the predictive Gaussian:
/// min{Phi(z), 1 - Phi(z)} with z the standardized residual. Lies in
/// [0, 0.5]; strictly decreasing in |z|.
pub fn centrality_score(pred: &PredictiveGaussian, y: f64) -> f64 {
    debug_assert!(pred.v > 0.0, "predictive variance must be positive");
    let z = (y - pred.mu) / pred.v.sqrt();
    norm_sf(z.abs())
}

/// |y - mu|.
pub fn abs_residual_score(mu: f64, y: f64) -> f64 {
    (y - mu).abs()
}

/// |y - mu| / h for a positive scale h.
pub fn normalized_score(mu: f64, h: f64, y: f64) -> Result<f64, ConformalError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(ConformalError::NonpositiveScale(h));
    }
    Ok((y - mu).abs() / h)
}

/// max{q_lo - y, y - q_hi, 0}; crossed quantiles are tolerated.
pub fn cqr_score(q_lo: f64, q_hi: f64, y: f64) -> f64 {
    (q_lo - y).max(y - q_hi).max(0.0)
}

/// ceil(x) with near-integer snapping: values within 1e-9 of an integer are
/// treated as that integer, so float noise in (m+1)*alpha cannot shift the
/// rank across an exact boundary.
fn rank_ceil(x: f64) -> usize {
    let nearest = x.round();
    let snapped = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    snapped.max(1.0) as usize
}

fn validate_scores(scores: &[f64]) -> Result<(), ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(ConformalError::NonFiniteScore(i));
        }
    }
    Ok(())
}

fn validate_cov(target_cov: f64) -> Result<(), ConformalError> {
    if !(target_cov > 0.0 && target_cov < 1.0) {
        return Err(ConformalError::InvalidTargetCoverage(target_cov));
    }
    Ok(())
}

/// Lower-tail rank rule for the centrality score. Returns (t, k) with
/// k = ceil((m+1)(1 - target_cov)) and t the augmented order statistic
/// s_(k-1) (ascending, s_(0) = 0). The acceptance region {s >= t} then has
/// exchangeable-coverage exactly (m+2-k)/(m+1) >= target_cov; k = 1 makes
/// the region everything.
pub fn rank_threshold_lower(
    scores: &[f64],
    target_cov: f64,
) -> Result<(f64, usize), ConformalError> {
    validate_scores(scores)?;
    validate_cov(target_cov)?;
    let m = scores.len();
    let alpha = 1.0 - target_cov;
    let k = rank_ceil((m + 1) as f64 * alpha).min(m + 1);
    let t = if k == 1 {
        0.0
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        sorted[k - 2]
    };
    Ok((t, k))
}

/// Upper-tail rank rule for nonnegative scores. Returns (q, k) with
/// k = ceil((m+1) target_cov) and q the k-th smallest score; k > m yields
/// q = +infinity (calibration set too small for the requested coverage).
pub fn rank_threshold_upper(
    scores: &[f64],
    target_cov: f64,
) -> Result<(f64, usize), ConformalError> {
    validate_scores(scores)?;
    validate_cov(target_cov)?;
    let m = scores.len();
    let k = rank_ceil((m + 1) as f64 * target_cov);
    let q = if k > m {
        f64::INFINITY
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        sorted[k - 1]
    };
    Ok((q, k))
}

/// Calibrates one method's threshold from its calibration scores: the
/// centrality method uses the lower-tail rule, the residual-style baselines
/// the upper-tail rule.
pub fn calibrate(
    method: Method,
    scores: &[f64],
    target_cov: f64,
) -> Result<CalibrationResult, ConformalError> {
    let (threshold, rank_k) = match method {
        Method::Claps => rank_threshold_lower(scores, target_cov)?,
        _ => rank_threshold_upper(scores, target_cov)?,
    };
    Ok(CalibrationResult {
        method,
        threshold,
        m: scores.len(),
        target_cov,
        rank_k,
    })
}

/// Central 1-2t slice of the predictive Gaussian:
/// [mu - sqrt(v) z_t, mu + sqrt(v) z_t] with z_t the (1-t) normal quantile.
/// t = 0 gives the whole line, t = 0.5 the degenerate point.
pub fn claps_interval(pred: &PredictiveGaussian, t: f64) -> Interval {
    assert!(
        (0.0..=0.5).contains(&t),
        "centrality threshold must lie in [0, 0.5], got {t}"
    );
    debug_assert!(pred.v > 0.0);
    if t == 0.0 {
        return Interval::new(f64::NEG_INFINITY, f64::INFINITY);
    }
    if t == 0.5 {
        return Interval::new(pred.mu, pred.mu);
    }
    let z = norm_quantile(1.0 - t).expect("t in (0, 0.5) keeps 1-t inside (0, 1)");
    let half = pred.v.sqrt() * z;
    Interval::new(pred.mu - half, pred.mu + half)
}

/// mu +- q.
pub fn residual_interval(mu: f64, q: f64) -> Result<Interval, ConformalError> {
    if q < 0.0 || q.is_nan() {
        return Err(ConformalError::NegativeQ(q));
    }
    Ok(Interval::new(mu - q, mu + q))
}

/// mu +- q h for a positive scale h.
pub fn normcp_interval(mu: f64, h: f64, q: f64) -> Result<Interval, ConformalError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(ConformalError::NonpositiveScale(h));
    }
    if q < 0.0 || q.is_nan() {
        return Err(ConformalError::NegativeQ(q));
    }
    Ok(Interval::new(mu - q * h, mu + q * h))
}

/// [q_lo - q, q_hi + q]; if crossed quantile heads leave the endpoints out
/// of order even after widening, the interval clamps to their midpoint.
/// Returns the interval plus whether the clamp fired.
pub fn cqr_interval_flagged(
    q_lo: f64,
    q_hi: f64,
    q: f64,
) -> Result<(Interval, bool), ConformalError> {
    if q < 0.0 || q.is_nan() {
        return Err(ConformalError::NegativeQ(q));
    }
    let lo = q_lo - q;
    let hi = q_hi + q;
    if lo > hi {
        log::warn!("crossed quantile heads ({q_lo} > {q_hi}) beyond q = {q}; clamping to midpoint");
        let mid = 0.5 * (q_lo + q_hi);
        return Ok((Interval::new(mid, mid), true));
    }
    Ok((Interval::new(lo, hi), false))
}

/// [q_lo - q, q_hi + q] with the midpoint clamp for crossed heads.
pub fn cqr_interval(q_lo: f64, q_hi: f64, q: f64) -> Result<Interval, ConformalError> {
    cqr_interval_flagged(q_lo, q_hi, q).map(|(iv, _)| iv)
}
