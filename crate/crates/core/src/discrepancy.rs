//! Separable spatio-temporal discrepancy covariance.
//!
//! The discrepancy process has covariance sigma2 * R_t(a) kron R_s(d) with
//! AR(1) temporal correlation a^|lag| and exponential spatial correlation
//! exp(-h/d). Stacked vectors are time-major with the site index fastest,
//! so a stacked vector reshapes to a (sites x steps) matrix column by
//! column and Kronecker products act as two-sided matrix products on that
//! reshape. The full covariance is never formed except for small
//! validation problems.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domains::dist;
use crate::error::{Error, Result};
use crate::linalg;

/// Largest stacked dimension for which dense materialization is permitted.
pub const DENSE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscrepancyParams {
    /// Marginal variance, ppb^2.
    pub sigma2: f64,
    /// Temporal AR(1) coefficient, |a| < 1.
    pub a: f64,
    /// Spatial e-folding range, degrees.
    pub d: f64,
}

impl DiscrepancyParams {
    pub fn new(sigma2: f64, a: f64, d: f64) -> Result<Self> {
        let p = DiscrepancyParams { sigma2, a, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::InvalidParams(format!(
                "discrepancy variance must be positive and finite, got {}",
                self.sigma2
            )));
        }
        if !(self.a.abs() < 1.0) {
            return Err(Error::InvalidParams(format!(
                "temporal coefficient must satisfy |a| < 1, got {}",
                self.a
            )));
        }
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(Error::InvalidParams(format!(
                "spatial range must be positive and finite, got {}",
                self.d
            )));
        }
        Ok(())
    }

    /// Unconstrained coordinates (ln sigma2, atanh a, ln d) used by the
    /// M-step optimizer.
    pub fn to_transformed(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.sigma2.ln(), self.a.atanh(), self.d.ln()])
    }

    pub fn from_transformed(phi: &DVector<f64>) -> Result<Self> {
        if phi.len() != 3 {
            return Err(Error::DimensionMismatch {
                context: "transformed discrepancy parameters",
                expected: 3,
                got: phi.len(),
            });
        }
        DiscrepancyParams::new(phi[0].exp(), phi[1].tanh(), phi[2].exp())
    }
}

/// Lag at which the AR(1) correlation decays to 1/e, in hours.
pub fn temporal_e_folding_hours(a: f64, step_hours: f64) -> f64 {
    -step_hours / a.ln()
}

/// Log determinant of the T x T AR(1) correlation matrix.
pub fn ar1_log_det(a: f64, n_steps: usize) -> f64 {
    (n_steps as f64 - 1.0) * (1.0 - a * a).ln()
}

#[derive(Debug, Clone)]
pub struct SeparableCovariance {
    params: DiscrepancyParams,
    site_dist: DMatrix<f64>,
    r_t: DMatrix<f64>,
    r_s: DMatrix<f64>,
    chol_t: Cholesky<f64, Dyn>,
    chol_s: Cholesky<f64, Dyn>,
}

impl SeparableCovariance {
    pub fn new(
        params: DiscrepancyParams,
        site_coords: &[Vec<f64>],
        n_steps: usize,
    ) -> Result<Self> {
        let q = site_coords.len();
        let mut site_dist = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in (i + 1)..q {
                let h = dist(&site_coords[i], &site_coords[j]);
                site_dist[(i, j)] = h;
                site_dist[(j, i)] = h;
            }
        }
        SeparableCovariance::from_distances(params, site_dist, n_steps)
    }

    pub fn from_distances(
        params: DiscrepancyParams,
        site_dist: DMatrix<f64>,
        n_steps: usize,
    ) -> Result<Self> {
        params.validate()?;
        let q = site_dist.nrows();
        if q == 0 || n_steps == 0 {
            return Err(Error::EmptyDomain(
                "separable covariance needs sites and time steps".into(),
            ));
        }
        if site_dist.ncols() != q {
            return Err(Error::DimensionMismatch {
                context: "site distance matrix",
                expected: q,
                got: site_dist.ncols(),
            });
        }
        let r_t = ar1_matrix(params.a, n_steps);
        let mut r_s = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..q {
                r_s[(i, j)] = (-site_dist[(i, j)] / params.d).exp();
            }
        }
        let chol_t = linalg::cholesky_with_jitter(&r_t)?.factor;
        let chol_s = linalg::cholesky_with_jitter(&r_s)?.factor;
        Ok(SeparableCovariance {
            params,
            site_dist,
            r_t,
            r_s,
            chol_t,
            chol_s,
        })
    }

    pub fn params(&self) -> DiscrepancyParams {
        self.params
    }

    pub fn n_steps(&self) -> usize {
        self.r_t.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.r_s.nrows()
    }

    pub fn n(&self) -> usize {
        self.n_steps() * self.n_sites()
    }

    pub fn temporal(&self) -> &DMatrix<f64> {
        &self.r_t
    }

    pub fn spatial(&self) -> &DMatrix<f64> {
        &self.r_s
    }

    pub fn site_distances(&self) -> &DMatrix<f64> {
        &self.site_dist
    }

    pub fn temporal_inverse(&self) -> DMatrix<f64> {
        self.chol_t.inverse()
    }

    pub fn spatial_inverse(&self) -> DMatrix<f64> {
        self.chol_s.inverse()
    }

    /// Eigendecomposition of the temporal factor, used to block-diagonalize
    /// systems that add a time-invariant diagonal to the precision.
    pub fn temporal_eigen(&self) -> (DMatrix<f64>, DVector<f64>) {
        let eig = self.r_t.clone().symmetric_eigen();
        (eig.eigenvectors, eig.eigenvalues)
    }

    fn reshape(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "stacked discrepancy vector",
                expected: self.n(),
                got: v.len(),
            });
        }
        Ok(DMatrix::from_column_slice(
            self.n_sites(),
            self.n_steps(),
            v.as_slice(),
        ))
    }

    /// Apply the inverse covariance to a stacked vector without forming it.
    pub fn kron_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mat = self.reshape(v)?;
        let left = self.chol_s.solve(&mat);
        let full = self.chol_t.solve(&left.transpose()).transpose();
        Ok(DVector::from_column_slice(full.as_slice()) / self.params.sigma2)
    }

    /// Column-wise [`Self::kron_solve`].
    pub fn kron_solve_mat(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(v.nrows(), v.ncols());
        for c in 0..v.ncols() {
            let col = self.kron_solve(&DVector::from(v.column(c)))?;
            out.set_column(c, &col);
        }
        Ok(out)
    }

    /// Apply the covariance itself to a stacked vector.
    pub fn kron_mul(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mat = self.reshape(v)?;
        let full = &self.r_s * mat * &self.r_t;
        Ok(DVector::from_column_slice(full.as_slice()) * self.params.sigma2)
    }

    /// v' Q v for a stacked vector v.
    pub fn quad_form_inv(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(v.dot(&self.kron_solve(v)?))
    }

    /// Log determinant of the full covariance from the factor determinants.
    pub fn log_det(&self) -> f64 {
        let p = self.n_steps() as f64;
        let q = self.n_sites() as f64;
        p * q * self.params.sigma2.ln()
            + q * linalg::cholesky_log_det(&self.chol_t)
            + p * linalg::cholesky_log_det(&self.chol_s)
    }

    /// Entrywise derivative of the temporal correlation in a.
    pub fn temporal_derivative(&self) -> DMatrix<f64> {
        let n = self.n_steps();
        let a = self.params.a;
        DMatrix::from_fn(n, n, |i, j| {
            let k = i.abs_diff(j);
            if k == 0 {
                0.0
            } else {
                k as f64 * a.powi(k as i32 - 1)
            }
        })
    }

    /// Entrywise derivative of the spatial correlation in d.
    pub fn spatial_derivative(&self) -> DMatrix<f64> {
        let d = self.params.d;
        DMatrix::from_fn(self.n_sites(), self.n_sites(), |i, j| {
            let h = self.site_dist[(i, j)];
            (h / (d * d)) * (-h / d).exp()
        })
    }

    /// Dense covariance for validation problems only.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        if self.n() > DENSE_LIMIT {
            return Err(Error::ScaleLimit(self.n()));
        }
        Ok(linalg::kron_dense(&self.r_t, &self.r_s) * self.params.sigma2)
    }

    /// Draw one zero-mean field with this covariance, stacked time-major.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let q = self.n_sites();
        let t = self.n_steps();
        let z = DMatrix::from_fn(q, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let field = self.chol_s.l() * z * self.chol_t.l().transpose();
        DVector::from_column_slice(field.as_slice()) * self.params.sigma2.sqrt()
    }
}

fn ar1_matrix(a: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        let k = i.abs_diff(j);
        if k == 0 {
            1.0
        } else {
            a.powi(k as i32)
        }
    })
}

/// Sites laid out as 1D coordinates, a convenience for the study domain.
pub fn sites_1d(coords: &[f64]) -> Vec<Vec<f64>> {
    coords.iter().map(|&c| vec![c]).collect()
}
