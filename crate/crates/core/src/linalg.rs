//! Dense linear-algebra helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter ladder applied to near-singular symmetric factorizations:
/// starts at 1e-10 times the largest diagonal entry and escalates tenfold up
/// to 1e-6 before giving up.
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-6;

pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal (0.0 when none needed).
    pub jitter: f64,
}

/// Cholesky factorization with the crate's jitter-escalation policy.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let max_diag = mat.diagonal().amax();
    if !max_diag.is_finite() {
        return Err(Error::SingularFactor);
    }
    if let Some(factor) = Cholesky::new(mat.clone()) {
        return Ok(JitteredCholesky { factor, jitter: 0.0 });
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * 1.000_001 {
        let jitter = rel * max_diag;
        let mut bumped = mat.clone();
        for i in 0..bumped.nrows() {
            bumped[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(bumped) {
            return Ok(JitteredCholesky { factor, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::FactorizationFailed {
        max_jitter: JITTER_MAX * max_diag,
    })
}

/// Log-determinant from an existing Cholesky factor.
pub fn cholesky_log_det(factor: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric-positive-definite inverse via Cholesky with jitter.
pub fn spd_inverse(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky_with_jitter(mat)?.factor.inverse())
}

/// Force exact symmetry on a matrix that is symmetric up to rounding.
pub fn symmetrize(mat: &mut DMatrix<f64>) {
    let n = mat.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = v;
            mat[(j, i)] = v;
        }
    }
}

/// Max-norm of a vector; 0 for empty input.
pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Kronecker product, for small validation problems only.
pub fn kron_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}
