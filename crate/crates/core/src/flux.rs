//! The lognormal prior process for the flux field.
//!
//! The log field is Gaussian with mean vector `log_mean` and covariance
//! `log_cov`; the natural-scale field is its exponential. First and second
//! natural moments follow the lognormal identities
//!
//! ```text
//! mean_i  = exp(log_mean_i + log_cov_ii / 2)
//! cov_ij  = mean_i * mean_j * (exp(log_cov_ij) - 1)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::calibration::VariogramParams;
use crate::domains::SpatialGrid;
use crate::error::{Error, Result};
use crate::linalg;

/// Whether the field carries flux densities (per unit area) or cell totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxMode {
    Density,
    TotalPerCell,
}

/// Exponent bound beyond which natural moments overflow f64.
pub const LOG_MOMENT_LIMIT: f64 = 700.0;

#[derive(Debug, Clone)]
pub struct LognormalFluxPrior {
    pub grid: SpatialGrid,
    pub log_mean: DVector<f64>,
    pub log_cov: DMatrix<f64>,
    pub mode: FluxMode,
}

impl LognormalFluxPrior {
    pub fn new(
        grid: SpatialGrid,
        log_mean: DVector<f64>,
        log_cov: DMatrix<f64>,
        mode: FluxMode,
    ) -> Result<Self> {
        let p = grid.len();
        if log_mean.len() != p {
            return Err(Error::DimensionMismatch {
                context: "prior log mean",
                expected: p,
                got: log_mean.len(),
            });
        }
        if log_cov.nrows() != p || log_cov.ncols() != p {
            return Err(Error::DimensionMismatch {
                context: "prior log covariance",
                expected: p,
                got: log_cov.nrows(),
            });
        }
        let scale = log_cov.amax();
        for i in 0..p {
            for j in (i + 1)..p {
                if (log_cov[(i, j)] - log_cov[(j, i)]).abs() > 1e-8 * scale.max(1.0) {
                    return Err(Error::InvalidParams(
                        "prior log covariance is not symmetric".into(),
                    ));
                }
            }
        }
        Ok(LognormalFluxPrior {
            grid,
            log_mean,
            log_cov,
            mode,
        })
    }

    /// Prior with constant log mean and covariance induced by a fitted
    /// semivariogram over the grid centroids.
    pub fn from_variogram(
        grid: SpatialGrid,
        params: &VariogramParams,
        log_mean_const: f64,
    ) -> Result<Self> {
        params.validate()?;
        let coords = grid.centroids();
        let log_cov = params.gram(&coords);
        let log_mean = DVector::from_element(grid.len(), log_mean_const);
        LognormalFluxPrior::new(grid, log_mean, log_cov, FluxMode::Density)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn marginal_log_vars(&self) -> DVector<f64> {
        self.log_cov.diagonal()
    }

    /// Natural-scale mean vector and covariance matrix.
    pub fn natural_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.len();
        let mut mean = DVector::zeros(p);
        for i in 0..p {
            let arg = self.log_mean[i] + 0.5 * self.log_cov[(i, i)];
            if arg > LOG_MOMENT_LIMIT {
                return Err(Error::MomentOverflow(LOG_MOMENT_LIMIT));
            }
            mean[i] = arg.exp();
        }
        let mut cov = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                let c = mean[i] * mean[j] * (self.log_cov[(i, j)].exp_m1());
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        Ok((mean, cov))
    }

    /// Draw `n` fields; each row of the result is one draw on the natural
    /// scale. A zero covariance yields the deterministic field
    /// `exp(log_mean)`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        let p = self.len();
        let mut out = DMatrix::zeros(n, p);
        if self.log_cov.amax() == 0.0 {
            for draw in 0..n {
                for i in 0..p {
                    out[(draw, i)] = self.log_mean[i].exp();
                }
            }
            return Ok(out);
        }
        let factor = linalg::cholesky_with_jitter(&self.log_cov)?.factor;
        let l = factor.l();
        for draw in 0..n {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let log_field = &self.log_mean + &l * z;
            for i in 0..p {
                out[(draw, i)] = log_field[i].exp();
            }
        }
        Ok(out)
    }

    /// Reparameterize a density prior to totals per cell: the log mean gains
    /// `ln area` per cell while the log covariance is untouched.
    pub fn to_total_per_cell(&self) -> Result<Self> {
        if self.mode == FluxMode::TotalPerCell {
            return Err(Error::AlreadyTotal);
        }
        let mut log_mean = self.log_mean.clone();
        for (i, cell) in self.grid.cells().iter().enumerate() {
            log_mean[i] += cell.area.ln();
        }
        Ok(LognormalFluxPrior {
            grid: self.grid.clone(),
            log_mean,
            log_cov: self.log_cov.clone(),
            mode: FluxMode::TotalPerCell,
        })
    }

    /// Log-scale precision matrix, with the jitter that was needed.
    pub fn precision(&self) -> Result<(DMatrix<f64>, f64)> {
        let jc = linalg::cholesky_with_jitter(&self.log_cov)?;
        Ok((jc.factor.inverse(), jc.jitter))
    }
}
