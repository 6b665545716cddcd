//! Solves against the mole-fraction conditional precision
//! M = Q_zeta + sigma_eps^-2 diag(counts), where counts is the diagonal of
//! C'C for the observation incidence C.
//!
//! When every site is observed the same number of times at every step, the
//! count diagonal is I_T kron K, and diagonalizing the temporal factor
//! R_t = E Lambda E' turns M into (E kron I) blkdiag(F_1..F_T) (E' kron I)
//! with per-step blocks F_i = sigma2^-1 lambda_i^-1 R_s^-1 + sigma_eps^-2 K.
//! Solves, log determinants, and moment contractions then cost O(T q^3)
//! instead of O((Tq)^3). A dense fallback covers irregular observation
//! patterns at validation sizes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::discrepancy::SeparableCovariance;
use crate::domains::ObservationIncidence;
use crate::error::{Error, Result};
use crate::linalg;

/// Largest stacked dimension the dense fallback will factorize.
pub const DENSE_SYSTEM_LIMIT: usize = 4096;

/// Cache per-block Cholesky factors when T q^2 is at most this many floats.
const FACTOR_CACHE_LIMIT: usize = 4_000_000;

pub struct MoleSystem {
    cov: SeparableCovariance,
    sigma2_eps: f64,
    counts: DVector<f64>,
    backend: Backend,
}

enum Backend {
    Eigen(EigenBackend),
    Dense(DenseBackend),
}

struct EigenBackend {
    /// Columns are orthonormal eigenvectors of the temporal correlation.
    e: DMatrix<f64>,
    lambda: DVector<f64>,
    site_counts: DVector<f64>,
    r_s_inv: DMatrix<f64>,
    factors: Option<Vec<Cholesky<f64, Dyn>>>,
}

struct DenseBackend {
    w: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl EigenBackend {
    fn block(&self, i: usize, sigma2: f64, sigma2_eps: f64) -> DMatrix<f64> {
        let mut f = &self.r_s_inv / (sigma2 * self.lambda[i]);
        for (j, &k) in self.site_counts.iter().enumerate() {
            f[(j, j)] += k / sigma2_eps;
        }
        f
    }

    fn factor(&self, i: usize, sigma2: f64, sigma2_eps: f64) -> Result<Cholesky<f64, Dyn>> {
        if let Some(cache) = &self.factors {
            return Ok(cache[i].clone());
        }
        Ok(linalg::cholesky_with_jitter(&self.block(i, sigma2, sigma2_eps))?.factor)
    }
}

/// Result of one block sweep: the solved right-hand side plus the three
/// temporal contractions of M^-1 needed by the M-step (all diagonal
/// blocks, interior diagonal blocks, adjacent off-diagonal blocks).
pub struct MomentPass {
    pub solved: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    pub p0m: DMatrix<f64>,
    pub p1: DMatrix<f64>,
}

impl MoleSystem {
    pub fn new(
        cov: SeparableCovariance,
        incidence: &ObservationIncidence,
        sigma2_eps: f64,
    ) -> Result<Self> {
        if !(sigma2_eps > 0.0) || !sigma2_eps.is_finite() {
            return Err(Error::InvalidParams(format!(
                "observation noise variance must be positive, got {sigma2_eps}"
            )));
        }
        if incidence.stacked_dim() != cov.n() {
            return Err(Error::DimensionMismatch {
                context: "incidence stacked dimension vs discrepancy",
                expected: cov.n(),
                got: incidence.stacked_dim(),
            });
        }
        let counts = incidence.col_counts();
        let backend = if let Some(site_counts) = incidence.time_invariant_site_counts() {
            let (e, lambda) = cov.temporal_eigen();
            let r_s_inv = cov.spatial_inverse();
            let t = cov.n_steps();
            let q = cov.n_sites();
            let mut eb = EigenBackend {
                e,
                lambda,
                site_counts: DVector::from_vec(site_counts),
                r_s_inv,
                factors: None,
            };
            if t * q * q <= FACTOR_CACHE_LIMIT {
                let mut factors = Vec::with_capacity(t);
                for i in 0..t {
                    factors.push(
                        linalg::cholesky_with_jitter(&eb.block(
                            i,
                            cov.params().sigma2,
                            sigma2_eps,
                        ))?
                        .factor,
                    );
                }
                eb.factors = Some(factors);
            }
            Backend::Eigen(eb)
        } else {
            let n = cov.n();
            if n > DENSE_SYSTEM_LIMIT {
                return Err(Error::ScaleLimit(n));
            }
            let m = Self::dense_m_from(&cov, &counts, sigma2_eps)?;
            let chol = linalg::cholesky_with_jitter(&m)?.factor;
            let w = chol.inverse();
            Backend::Dense(DenseBackend { w, chol })
        };
        Ok(MoleSystem {
            cov,
            sigma2_eps,
            counts,
            backend,
        })
    }

    fn dense_m_from(
        cov: &SeparableCovariance,
        counts: &DVector<f64>,
        sigma2_eps: f64,
    ) -> Result<DMatrix<f64>> {
        let sigma = cov.dense()?;
        let chol = linalg::cholesky_with_jitter(&sigma)?.factor;
        let mut m = chol.inverse();
        for (i, &k) in counts.iter().enumerate() {
            m[(i, i)] += k / sigma2_eps;
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.cov.n()
    }

    pub fn cov(&self) -> &SeparableCovariance {
        &self.cov
    }

    pub fn sigma2_eps(&self) -> f64 {
        self.sigma2_eps
    }

    pub fn counts(&self) -> &DVector<f64> {
        &self.counts
    }

    pub fn is_structured(&self) -> bool {
        matches!(self.backend, Backend::Eigen(_))
    }

    /// Rotate each stacked column into the temporal eigenbasis: columns
    /// reshape to (sites x steps) matrices, which are multiplied by E.
    fn to_tilde(&self, eb: &EigenBackend, rhs: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let t = self.cov.n_steps();
        let q = self.cov.n_sites();
        (0..rhs.ncols())
            .map(|c| {
                let col = DVector::from(rhs.column(c));
                DMatrix::from_column_slice(q, t, col.as_slice()) * &eb.e
            })
            .collect()
    }

    fn from_tilde(&self, eb: &EigenBackend, tilde: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, tilde.len());
        for (c, mat) in tilde.iter().enumerate() {
            let back = mat * eb.e.transpose();
            out.column_mut(c)
                .copy_from(&DVector::from_column_slice(back.as_slice()));
        }
        out
    }

    /// M^-1 applied to each column.
    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "solve right-hand side",
                expected: self.n(),
                got: rhs.nrows(),
            });
        }
        match &self.backend {
            Backend::Dense(d) => Ok(d.chol.solve(rhs)),
            Backend::Eigen(eb) => {
                let t = self.cov.n_steps();
                let mut tilde = self.to_tilde(eb, rhs);
                for i in 0..t {
                    let f = eb.factor(i, self.cov.params().sigma2, self.sigma2_eps)?;
                    for mat in tilde.iter_mut() {
                        let mut col = mat.column_mut(i);
                        f.solve_mut(&mut col);
                    }
                }
                Ok(self.from_tilde(eb, &tilde))
            }
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        Ok(DVector::from_column_slice(self.solve_mat(&m)?.as_slice()))
    }

    /// Solve against the right-hand side and, in the same sweep, accumulate
    /// the temporal contractions of M^-1 used for M-step traces.
    pub fn moment_pass(&self, rhs: &DMatrix<f64>) -> Result<MomentPass> {
        let q = self.cov.n_sites();
        let t = self.cov.n_steps();
        match &self.backend {
            Backend::Dense(d) => {
                let solved = d.chol.solve(rhs);
                let mut p0 = DMatrix::zeros(q, q);
                let mut p0m = DMatrix::zeros(q, q);
                let mut p1 = DMatrix::zeros(q, q);
                for step in 0..t {
                    let blk = d.w.view((step * q, step * q), (q, q));
                    p0 += blk;
                    if step > 0 && step + 1 < t {
                        p0m += blk;
                    }
                    if step + 1 < t {
                        let upper = d.w.view((step * q, (step + 1) * q), (q, q));
                        let lower = d.w.view(((step + 1) * q, step * q), (q, q));
                        p1 += upper;
                        p1 += lower;
                    }
                }
                Ok(MomentPass {
                    solved,
                    p0,
                    p0m,
                    p1,
                })
            }
            Backend::Eigen(eb) => {
                let mut tilde = self.to_tilde(eb, rhs);
                let mut p0 = DMatrix::zeros(q, q);
                let mut p0m = DMatrix::zeros(q, q);
                let mut p1 = DMatrix::zeros(q, q);
                for i in 0..t {
                    let f = eb.factor(i, self.cov.params().sigma2, self.sigma2_eps)?;
                    let inv = f.inverse();
                    for mat in tilde.iter_mut() {
                        let sol = &inv * mat.column(i);
                        mat.set_column(i, &sol);
                    }
                    let e_col = eb.e.column(i);
                    let w0m = 1.0 - e_col[0] * e_col[0] - e_col[t - 1] * e_col[t - 1];
                    let mut w1 = 0.0;
                    for step in 0..t - 1 {
                        w1 += e_col[step] * e_col[step + 1];
                    }
                    p0 += &inv;
                    p0m += &inv * w0m;
                    p1 += &inv * (2.0 * w1);
                }
                Ok(MomentPass {
                    solved: self.from_tilde(eb, &tilde),
                    p0,
                    p0m,
                    p1,
                })
            }
        }
    }

    /// Temporal contraction sum_{t,t'} Mt[t',t] W_block(t,t') of M^-1
    /// into a single (sites x sites) matrix.
    pub fn contract_w_temporal(&self, mt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let q = self.cov.n_sites();
        let t = self.cov.n_steps();
        if mt.nrows() != t || mt.ncols() != t {
            return Err(Error::DimensionMismatch {
                context: "temporal trace factor",
                expected: t,
                got: mt.nrows(),
            });
        }
        let mut c = DMatrix::zeros(q, q);
        match &self.backend {
            Backend::Dense(d) => {
                for a in 0..t {
                    for b in 0..t {
                        let w = mt[(b, a)];
                        if w != 0.0 {
                            c += d.w.view((a * q, b * q), (q, q)) * w;
                        }
                    }
                }
            }
            Backend::Eigen(eb) => {
                for i in 0..t {
                    let e_col = eb.e.column(i);
                    let weight = (mt * &e_col).dot(&e_col);
                    if weight == 0.0 {
                        continue;
                    }
                    let f = eb.factor(i, self.cov.params().sigma2, self.sigma2_eps)?;
                    c += f.inverse() * weight;
                }
            }
        }
        Ok(c)
    }

    /// tr((Mt kron Ms) M^-1) for arbitrary factor matrices.
    pub fn trace_kron_w(&self, mt: &DMatrix<f64>, ms: &DMatrix<f64>) -> Result<f64> {
        let q = self.cov.n_sites();
        if ms.nrows() != q || ms.ncols() != q {
            return Err(Error::DimensionMismatch {
                context: "spatial trace factor",
                expected: q,
                got: ms.nrows(),
            });
        }
        let c = self.contract_w_temporal(mt)?;
        let mut acc = 0.0;
        for j in 0..q {
            for k in 0..q {
                acc += ms[(j, k)] * c[(k, j)];
            }
        }
        Ok(acc)
    }

    /// ln |M|.
    pub fn log_det(&self) -> Result<f64> {
        match &self.backend {
            Backend::Dense(d) => Ok(2.0
                * d.chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|x| x.ln())
                    .sum::<f64>()),
            Backend::Eigen(eb) => {
                let mut acc = 0.0;
                for i in 0..self.cov.n_steps() {
                    let f = eb.factor(i, self.cov.params().sigma2, self.sigma2_eps)?;
                    acc += linalg::cholesky_log_det(&f);
                }
                Ok(acc)
            }
        }
    }

    /// Draw from N(0, M^-1).
    pub fn sample_zero_mean(&self, rng: &mut impl Rng) -> Result<DVector<f64>> {
        let n = self.n();
        match &self.backend {
            Backend::Dense(d) => {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                // M = L L' gives Cov(L^-T z) = M^-1.
                let lt = d.chol.l().transpose();
                lt.solve_upper_triangular(&z).ok_or(Error::SingularFactor)
            }
            Backend::Eigen(eb) => {
                let q = self.cov.n_sites();
                let t = self.cov.n_steps();
                let mut tilde = DMatrix::zeros(q, t);
                for i in 0..t {
                    let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let f = eb.factor(i, self.cov.params().sigma2, self.sigma2_eps)?;
                    let col = f
                        .l()
                        .transpose()
                        .solve_upper_triangular(&z)
                        .ok_or(Error::SingularFactor)?;
                    tilde.set_column(i, &col);
                }
                let out = tilde * eb.e.transpose();
                Ok(DVector::from_column_slice(out.as_slice()))
            }
        }
    }

    /// Dense M for validation problems.
    pub fn dense_m(&self) -> Result<DMatrix<f64>> {
        Self::dense_m_from(&self.cov, &self.counts, self.sigma2_eps)
    }
}
