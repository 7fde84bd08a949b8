//! Helpers shared by unit tests: an independent matrix inverse, seeded RNG
//! construction, and small numeric conveniences. Oracles here deliberately use
//! different algorithms than the code under test.

use crate::linalg::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gauss-Jordan elimination with partial pivoting. Quadratic-form tests check
/// Cholesky-based solves against this completely separate path.
pub fn explicit_inverse(m: &DenseMatrix) -> DenseMatrix {
    let d = m.rows();
    assert_eq!(d, m.cols(), "inverse needs a square matrix");
    let mut a = vec![vec![0.0; 2 * d]; d];
    for i in 0..d {
        for j in 0..d {
            a[i][j] = m.get(i, j);
        }
        a[i][d + i] = 1.0;
    }
    for col in 0..d {
        let pivot_row = (col..d)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot_row);
        let pivot = a[col][col];
        assert!(pivot.abs() > 1e-300, "singular matrix in test oracle");
        for v in a[col].iter_mut() {
            *v /= pivot;
        }
        for row in 0..d {
            if row == col {
                continue;
            }
            let factor = a[row][col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..2 * d {
                a[row][j] -= factor * a[col][j];
            }
        }
    }
    let mut out = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out.set(i, j, a[i][d + j]);
        }
    }
    out
}

/// Relative error with an absolute floor so comparisons near zero stay sane.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

/// Mean of a slice; panics on empty input (tests only).
pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Gamma(twice/2) for positive integer `twice`, via the recursion
/// Gamma(x+1) = x Gamma(x) down to Gamma(1) = 1 or Gamma(1/2) = sqrt(pi).
fn gamma_half(mut twice: usize) -> f64 {
    assert!(twice >= 1);
    let mut acc = if twice % 2 == 0 {
        1.0
    } else {
        std::f64::consts::PI.sqrt()
    };
    while twice > 2 {
        twice -= 2;
        acc *= (twice as f64) / 2.0;
    }
    acc
}

/// Upper-tail probability P(T > t) of a Student-t variable with integer
/// degrees of freedom, by Simpson quadrature of the density over [0, t].
/// Independent of any library distribution code: the normalizing constant
/// comes from the half-integer gamma recursion.
pub fn student_t_sf(dof: usize, t: f64) -> f64 {
    assert!(dof >= 1);
    if t < 0.0 {
        return 1.0 - student_t_sf(dof, -t);
    }
    let nu = dof as f64;
    let norm = gamma_half(dof + 1)
        / ((nu * std::f64::consts::PI).sqrt() * gamma_half(dof));
    let density = |x: f64| norm * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let steps = 40_000usize; // even
    let h = t / steps as f64;
    let mut integral = density(0.0) + density(t);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        integral += w * density(i as f64 * h);
    }
    integral *= h / 3.0;
    (0.5 - integral).max(0.0)
}

/// Wilson score bounds computed as the roots of the defining quadratic
/// (p_hat - p)^2 = z^2 p (1 - p) / n — a different arrangement from any
/// production formula.
pub fn wilson_oracle(successes: usize, n: usize, z: f64) -> (f64, f64) {
    let p_hat = successes as f64 / n as f64;
    let z2n = z * z / n as f64;
    let a = 1.0 + z2n;
    let b = -(2.0 * p_hat + z2n);
    let c = p_hat * p_hat;
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    let lo = (-b - disc) / (2.0 * a);
    let hi = (-b + disc) / (2.0 * a);
    (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0))
}
