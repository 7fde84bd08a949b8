//! Dense linear-algebra kernel for the Laplace head: Cholesky factorization,
//! triangular solves, quadratic forms, and the ridge normal equations.
//!
//! Everything is row-major `f64` with no ambitions past a-few-hundred-wide
//! feature matrices. The precision matrix M = lambda*I + (1/sigma^2) Phi^T Phi
//! is factored as M = L L^T once; epistemic variances are then quadratic forms
//! phi^T M^{-1} phi = ||L^{-1} phi||^2 obtained by forward substitution, so the
//! posterior covariance is never materialized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widest matrix the kernel accepts. Heads in practice are 16..256 wide;
/// anything past this cap is a config error, not a workload.
pub const MAX_COLS: usize = 1024;

/// Relative asymmetry tolerated before factorization refuses the input.
pub const SYMMETRY_RTOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix not positive definite: pivot {pivot_index} is {pivot_value:.3e}")]
    NotPositiveDefinite { pivot_index: usize, pivot_value: f64 },
    #[error("matrix not symmetric: max relative asymmetry {max_rel_asym:.3e} exceeds {tol:.0e}")]
    NotSymmetric { max_rel_asym: f64, tol: f64 },
    #[error("dimension mismatch: {left} vs {right} in {op}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("matrix has {cols} columns, kernel cap is {max}")]
    TooWide { cols: usize, max: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("parameter {name} must be positive and finite, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },
}

/// Row-major dense matrix of finite `f64` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds from a row-major buffer, validating shape, width cap, and
    /// finiteness of every entry.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if cols > MAX_COLS {
            return Err(LinalgError::TooWide { cols, max: MAX_COLS });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                op: "from_vec",
                left: format!("{}x{}", rows, cols),
                right: format!("buffer of {}", data.len()),
            });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite {
                    row: i / cols.max(1),
                    col: i % cols.max(1),
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix. Panics on a width past the kernel cap; that is a
    /// programming error, not a data condition.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols <= MAX_COLS, "matrix width {} exceeds cap {}", cols, MAX_COLS);
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// A^T v for v of length `rows`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "t_matvec",
                left: format!("{} rows", self.rows),
                right: format!("vector of {}", v.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            let row = self.row(r);
            for (o, &a) in out.iter_mut().zip(row.iter()) {
                *o += a * vr;
            }
        }
        Ok(out)
    }

    /// A v for v of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "matvec",
                left: format!("{} cols", self.cols),
                right: format!("vector of {}", v.len()),
            });
        }
        let out = (0..self.rows).map(|r| dot(self.row(r), v)).collect();
        Ok(out)
    }

    /// Gram matrix A^T A, accumulated once over the rows. Symmetric by
    /// construction up to roundoff.
    pub fn gram(&self) -> DenseMatrix {
        let d = self.cols;
        let mut g = DenseMatrix::zeros(d, d);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..d {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let gi = &mut g.data[i * d..(i + 1) * d];
                for (j, &rj) in row.iter().enumerate().skip(i) {
                    gi[j] += ri * rj;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g.data[i * d + j] = g.data[j * d + i];
            }
        }
        g
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor L with L L^T equal to the factored matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    dim: usize,
    lower: DenseMatrix,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }
}

/// Factors a symmetric positive-definite matrix as L L^T.
///
/// Asymmetry below [`SYMMETRY_RTOL`] (relative to the largest entry) is
/// averaged away before factoring; anything larger is refused. No pivoting:
/// with lambda > 0 upstream the input is SPD by construction, so a
/// non-positive pivot means a caller bug and is a hard error.
pub fn cholesky(m: &DenseMatrix) -> Result<CholeskyFactor, LinalgError> {
    if m.rows != m.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "cholesky",
            left: format!("{} rows", m.rows),
            right: format!("{} cols", m.cols),
        });
    }
    let d = m.rows;
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    let mut max_asym = 0.0_f64;
    for i in 0..d {
        for j in 0..i {
            max_asym = max_asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    let max_rel_asym = max_asym / scale;
    if max_rel_asym > SYMMETRY_RTOL {
        return Err(LinalgError::NotSymmetric {
            max_rel_asym,
            tol: SYMMETRY_RTOL,
        });
    }

    // Work on the symmetrized lower triangle.
    let mut a = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            a.set(i, j, 0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }

    let mut l = DenseMatrix::zeros(d, d);
    for j in 0..d {
        let mut s = a.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            s -= v * v;
        }
        if s <= 0.0 || !s.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                pivot_index: j,
                pivot_value: s,
            });
        }
        let ljj = s.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..d {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    Ok(CholeskyFactor { dim: d, lower: l })
}

/// Forward substitution: solves L x = b.
pub fn solve_lower(l: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != l.dim {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_lower",
            left: format!("factor dim {}", l.dim),
            right: format!("vector of {}", b.len()),
        });
    }
    let d = l.dim;
    let mut x = vec![0.0; d];
    for i in 0..d {
        let row = l.lower.row(i);
        let mut v = b[i];
        for k in 0..i {
            v -= row[k] * x[k];
        }
        x[i] = v / row[i];
    }
    Ok(x)
}

/// Back substitution: solves L^T x = b using the stored lower factor.
pub fn solve_lower_transpose(l: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != l.dim {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_lower_transpose",
            left: format!("factor dim {}", l.dim),
            right: format!("vector of {}", b.len()),
        });
    }
    let d = l.dim;
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut v = b[i];
        for k in (i + 1)..d {
            v -= l.lower.get(k, i) * x[k];
        }
        x[i] = v / l.lower.get(i, i);
    }
    Ok(x)
}

/// Solves (L L^T) x = b with the two triangular solves.
pub fn solve_spd(l: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let y = solve_lower(l, b)?;
    solve_lower_transpose(l, &y)
}

/// phi^T M^{-1} phi computed as ||L^{-1} phi||^2. Nonnegative by construction.
pub fn quad_form_via_chol(l: &CholeskyFactor, phi: &[f64]) -> Result<f64, LinalgError> {
    let y = solve_lower(l, phi)?;
    Ok(y.iter().map(|v| v * v).sum())
}

/// Solves the ridge normal equations (lambda I + sigma^{-2} Phi^T Phi) w =
/// sigma^{-2} Phi^T y and returns both the solution and the Cholesky factor of
/// the precision matrix, which downstream code reuses for quadratic forms.
pub fn ridge_solve(
    phi: &DenseMatrix,
    y: &[f64],
    lambda: f64,
    sigma2: f64,
) -> Result<(Vec<f64>, CholeskyFactor), LinalgError> {
    if phi.rows != y.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "ridge_solve",
            left: format!("{} rows", phi.rows),
            right: format!("target of {}", y.len()),
        });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(LinalgError::NonPositiveParam {
            name: "lambda",
            value: lambda,
        });
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(LinalgError::NonPositiveParam {
            name: "sigma2",
            value: sigma2,
        });
    }
    let d = phi.cols;
    let inv_s2 = 1.0 / sigma2;
    let mut m = phi.gram();
    for i in 0..d {
        for j in 0..d {
            let v = m.get(i, j) * inv_s2 + if i == j { lambda } else { 0.0 };
            m.set(i, j, v);
        }
    }
    let chol = cholesky(&m)?;
    let mut rhs = phi.t_matvec(y)?;
    for v in rhs.iter_mut() {
        *v *= inv_s2;
    }
    let w = solve_spd(&chol, &rhs)?;
    Ok((w, chol))
}
