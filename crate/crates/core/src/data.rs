//! Dataset ingestion, deterministic splitting, train-only standardization,
//! and the two synthetic generators used to exercise the pipeline against
//! known ground truth.

use crate::linalg::DenseMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found or unreadable: {path}: {source}")]
    FileNotFound {
        path: String,
        source: std::io::Error,
    },
    #[error("csv parse failure: {0}")]
    Malformed(#[from] csv::Error),
    #[error("target column {0:?} not present in header")]
    TargetMissing(String),
    #[error("no numeric feature columns besides the target")]
    NoNumericColumns,
    #[error("no usable rows after dropping {dropped} malformed rows")]
    EmptyAfterFiltering { dropped: usize },
    #[error("dataset too small to split: {reason}")]
    TooSmall { reason: String },
    #[error("split fractions invalid: {reason}")]
    InvalidFractions { reason: String },
}

/// How the generator produced a synthetic dataset; retained so tests can
/// check fitted quantities against the truth.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    LinearGaussian { true_w: Vec<f64>, sigma: f64 },
    Heteroscedastic { base: f64, slope: f64 },
}

/// An in-memory regression dataset: raw (unstandardized) features and the
/// target in original units.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Number of input rows dropped during ingestion (non-numeric or missing
    /// cells). Zero for synthetic data.
    pub dropped_rows: usize,
    /// Present only for synthetic data.
    pub generator: Option<Generator>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }
}

/// Target column selector for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
}

/// Loads a headered CSV of numeric columns. The target column is removed from
/// the feature block; rows containing any cell that does not parse as a
/// finite number are dropped and counted.
pub fn load_csv(
    path: impl AsRef<Path>,
    target: &TargetColumn,
    delimiter: u8,
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::FileNotFound {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(file);

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_idx = match target {
        TargetColumn::Index(i) => {
            if *i >= headers.len() {
                return Err(DataError::TargetMissing(format!("index {i}")));
            }
            *i
        }
        TargetColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::TargetMissing(name.clone()))?,
    };
    if headers.len() < 2 {
        return Err(DataError::NoNumericColumns);
    }

    let n_cols = headers.len();
    let p = n_cols - 1;
    let mut rows: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        if record.len() != n_cols {
            dropped += 1;
            continue;
        }
        let parsed: Option<Vec<f64>> = record
            .iter()
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
            })
            .collect();
        match parsed {
            Some(values) => {
                for (i, v) in values.iter().enumerate() {
                    if i == target_idx {
                        y.push(*v);
                    } else {
                        rows.push(*v);
                    }
                }
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} rows with non-numeric or missing cells",
            path.display()
        );
    }
    if y.is_empty() {
        return Err(DataError::EmptyAfterFiltering { dropped });
    }

    let n = y.len();
    let x = DenseMatrix::from_vec(n, p, rows).expect("finite cells by construction");
    let feature_names = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(Dataset {
        name,
        x,
        y,
        feature_names,
        dropped_rows: dropped,
        generator: None,
    })
}

/// Split proportions plus shuffle seed. With `fixed_test = Some(k)` the last
/// k rows become the test set untouched (pre-split datasets) and only the
/// remainder is shuffled into train/calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub cal_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    #[serde(default)]
    pub fixed_test: Option<usize>,
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            cal_frac: 0.2,
            test_frac: 0.2,
            seed: 0,
            fixed_test: None,
        }
    }
}

/// One membership-defined slice of a dataset, carrying the original row ids.
#[derive(Clone, Debug)]
pub struct Subset {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub indices: Vec<usize>,
}

impl Subset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn gather(ds: &Dataset, idx: &[usize]) -> Self {
        let p = ds.x.cols();
        let mut data = Vec::with_capacity(idx.len() * p);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(ds.x.row(i));
            y.push(ds.y[i]);
        }
        Self {
            x: DenseMatrix::from_vec(idx.len(), p, data).expect("finite rows"),
            y,
            indices: idx.to_vec(),
        }
    }
}

/// Column-wise z-scoring parameters fit on the training split only, plus the
/// training-target mean used to center y. Constant columns keep std 1 so they
/// standardize to exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub constant_cols: Vec<bool>,
    pub y_mean: f64,
}

impl Standardizer {
    /// Fits on one split; population standard deviation (divide by n).
    pub fn fit(x: &DenseMatrix, y: &[f64]) -> Self {
        let n = x.rows().max(1);
        let p = x.cols();
        let mut means = vec![0.0; p];
        for r in 0..x.rows() {
            for (m, v) in means.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m /= n as f64;
        }
        let mut vars = vec![0.0; p];
        for r in 0..x.rows() {
            for ((v, m), cell) in vars.iter_mut().zip(&means).zip(x.row(r)) {
                let d = cell - m;
                *v += d * d;
            }
        }
        let mut stds = Vec::with_capacity(p);
        let mut constant_cols = Vec::with_capacity(p);
        for v in vars {
            let sd = (v / n as f64).sqrt();
            let constant = sd == 0.0;
            if constant {
                log::warn!("constant feature column standardized to zero");
            }
            stds.push(if constant { 1.0 } else { sd });
            constant_cols.push(constant);
        }
        let y_mean = if y.is_empty() {
            0.0
        } else {
            y.iter().sum::<f64>() / y.len() as f64
        };
        Self {
            means,
            stds,
            constant_cols,
            y_mean,
        }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn transform_x(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut out = Vec::with_capacity(x.rows() * x.cols());
        for r in 0..x.rows() {
            out.extend(self.transform_row(x.row(r)));
        }
        DenseMatrix::from_vec(x.rows(), x.cols(), out).expect("finite standardized values")
    }

    pub fn center_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v - self.y_mean).collect()
    }

    pub fn uncenter(&self, centered: f64) -> f64 {
        centered + self.y_mean
    }
}

/// The three splits plus standardization fit on train only.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Subset,
    pub cal: Subset,
    pub test: Subset,
    pub standardizer: Standardizer,
}

/// Deterministic shuffle-and-partition. Sizes use floors for calibration and
/// test with the remainder going to train; every row lands in exactly one
/// split.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<SplitData, DataError> {
    let n = ds.n();
    if n < 3 {
        return Err(DataError::TooSmall {
            reason: format!("need at least 3 rows, have {n}"),
        });
    }
    let sum = spec.train_frac + spec.cal_frac + spec.test_frac;
    if !((sum - 1.0).abs() <= 1e-9) {
        return Err(DataError::InvalidFractions {
            reason: format!("fractions sum to {sum}, expected 1"),
        });
    }
    for (name, f) in [
        ("train_frac", spec.train_frac),
        ("cal_frac", spec.cal_frac),
        ("test_frac", spec.test_frac),
    ] {
        let allow_zero = name == "test_frac" && spec.fixed_test.is_some();
        if !f.is_finite() || f < 0.0 || (f == 0.0 && !allow_zero) {
            return Err(DataError::InvalidFractions {
                reason: format!("{name} = {f} must be positive"),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (test_idx, mut pool): (Vec<usize>, Vec<usize>) = match spec.fixed_test {
        Some(k) => {
            if k == 0 || k >= n {
                return Err(DataError::TooSmall {
                    reason: format!("fixed test of {k} rows out of {n} leaves no usable split"),
                });
            }
            ((n - k..n).collect(), (0..n - k).collect())
        }
        None => (Vec::new(), (0..n).collect()),
    };
    pool.shuffle(&mut rng);

    let (n_train, n_cal, test_from_pool) = match spec.fixed_test {
        Some(_) => {
            let m = pool.len();
            let cal_ratio = spec.cal_frac / (spec.train_frac + spec.cal_frac);
            let n_cal = (m as f64 * cal_ratio).floor() as usize;
            (m - n_cal, n_cal, 0)
        }
        None => {
            let n_cal = (n as f64 * spec.cal_frac).floor() as usize;
            let n_test = (n as f64 * spec.test_frac).floor() as usize;
            (n - n_cal - n_test, n_cal, n_test)
        }
    };
    if n_train == 0 || n_cal == 0 || (test_from_pool == 0 && test_idx.is_empty()) {
        return Err(DataError::TooSmall {
            reason: format!(
                "split sizes (train {n_train}, cal {n_cal}, test {}) must all be nonzero",
                test_from_pool + test_idx.len()
            ),
        });
    }

    let train_ids = &pool[..n_train];
    let cal_ids = &pool[n_train..n_train + n_cal];
    let test_ids: Vec<usize> = if test_idx.is_empty() {
        pool[n_train + n_cal..n_train + n_cal + test_from_pool].to_vec()
    } else {
        test_idx
    };

    let train = Subset::gather(ds, train_ids);
    let cal = Subset::gather(ds, cal_ids);
    let test = Subset::gather(ds, &test_ids);
    let standardizer = Standardizer::fit(&train.x, &train.y);
    Ok(SplitData {
        train,
        cal,
        test,
        standardizer,
    })
}

/// Gaussian linear model: x ~ N(0, I), y = x.w + sigma * eps. The generator
/// parameters ride along for oracle checks.
pub fn synth_linear_gaussian(
    n: usize,
    d: usize,
    true_w: &[f64],
    sigma: f64,
    seed: u64,
) -> Dataset {
    assert_eq!(true_w.len(), d, "true_w must have length d");
    assert!(sigma >= 0.0 && sigma.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xdata = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        xdata.push(rng.sample::<f64, _>(StandardNormal));
    }
    let x = DenseMatrix::from_vec(n, d, xdata).expect("finite draws");
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        let mean: f64 = x.row(r).iter().zip(true_w).map(|(a, b)| a * b).sum();
        let eps: f64 = rng.sample(StandardNormal);
        y.push(mean + sigma * eps);
    }
    Dataset {
        name: "synth_linear_gaussian".to_string(),
        x,
        y,
        feature_names: (0..d).map(|i| format!("x{i}")).collect(),
        dropped_rows: 0,
        generator: Some(Generator::LinearGaussian {
            true_w: true_w.to_vec(),
            sigma,
        }),
    }
}

/// Scalar heteroscedastic model: x ~ U(-3, 3), y = sin(2x) + (a + b|x|) eps.
/// Noise scale grows linearly in |x|, so scale-aware methods have real signal
/// to find.
pub fn synth_heteroscedastic(n: usize, seed: u64, base: f64, slope: f64) -> Dataset {
    assert!(base >= 0.0 && slope >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut y = Vec::with_capacity(n);
    for &xv in &xs {
        let eps: f64 = rng.sample(StandardNormal);
        y.push((2.0 * xv).sin() + (base + slope * xv.abs()) * eps);
    }
    Dataset {
        name: "synth_heteroscedastic".to_string(),
        x: DenseMatrix::from_vec(n, 1, xs).expect("finite draws"),
        y,
        feature_names: vec!["x".to_string()],
        dropped_rows: 0,
        generator: Some(Generator::Heteroscedastic { base, slope }),
    }
}
