//! Joint prior moments of the flux and mole-fraction fields, and forward
//! simulation of the generative model.
//!
//! The mole-fraction field stacks time-major (site index fastest):
//! Y_m = B Y_f + zeta, observations Z = C Y_m + eps with C the incidence
//! operator and eps iid Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::discrepancy::SeparableCovariance;
use crate::domains::ObservationIncidence;
use crate::error::{Error, Result};
use crate::flux::LognormalFluxPrior;

#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub noise_variance: f64,
    pub incidence: ObservationIncidence,
}

impl ObservationModel {
    pub fn new(noise_variance: f64, incidence: ObservationIncidence) -> Result<Self> {
        if !noise_variance.is_finite() || noise_variance < 0.0 {
            return Err(Error::InvalidParams(format!(
                "noise variance must be finite and nonnegative, got {noise_variance}"
            )));
        }
        Ok(ObservationModel {
            noise_variance,
            incidence,
        })
    }
}

/// First two joint moments of (Y_f, Y_m); the mole blocks are dense and
/// cover all times, so this is restricted to validation-sized problems.
#[derive(Debug, Clone)]
pub struct BivariateMoments {
    pub mu_f: DVector<f64>,
    pub mu_m: DVector<f64>,
    pub c_ff: DMatrix<f64>,
    pub c_fm: DMatrix<f64>,
    pub c_mf: DMatrix<f64>,
    pub c_mm: DMatrix<f64>,
    pub discrepancy_mean: DVector<f64>,
}

pub fn joint_moments(
    prior: &LognormalFluxPrior,
    b: &DMatrix<f64>,
    disc: &SeparableCovariance,
    discrepancy_mean: Option<&DVector<f64>>,
) -> Result<BivariateMoments> {
    let n = disc.n();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "interaction matrix rows vs stacked mole dimension",
            expected: n,
            got: b.nrows(),
        });
    }
    if b.ncols() != prior.len() {
        return Err(Error::DimensionMismatch {
            context: "interaction matrix columns vs flux cells",
            expected: prior.len(),
            got: b.ncols(),
        });
    }
    let m_zeta = match discrepancy_mean {
        Some(m) => {
            if m.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "discrepancy mean",
                    expected: n,
                    got: m.len(),
                });
            }
            m.clone()
        }
        None => DVector::zeros(n),
    };
    let (mu_f, c_ff) = prior.natural_moments()?;
    let mu_m = b * &mu_f + &m_zeta;
    let c_fm = &c_ff * b.transpose();
    let c_mf = c_fm.transpose();
    let c_mm = disc.dense()? + b * &c_fm;
    Ok(BivariateMoments {
        mu_f,
        mu_m,
        c_ff,
        c_fm,
        c_mf,
        c_mm,
        discrepancy_mean: m_zeta,
    })
}

/// One draw of the generative model: flux field, mole-fraction field, and
/// noisy observations through the incidence operator.
///
/// `disc` may be omitted to simulate without discrepancy; a zero noise
/// variance yields exact observations of the mole-fraction field.
#[allow(clippy::too_many_arguments)]
pub fn forward_simulate(
    prior: &LognormalFluxPrior,
    b: &DMatrix<f64>,
    disc: Option<&SeparableCovariance>,
    obs: &ObservationModel,
    discrepancy_mean: Option<&DVector<f64>>,
    flux_rng: &mut impl Rng,
    disc_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = b.nrows();
    if b.ncols() != prior.len() {
        return Err(Error::DimensionMismatch {
            context: "interaction matrix columns vs flux cells",
            expected: prior.len(),
            got: b.ncols(),
        });
    }
    if obs.incidence.stacked_dim() != n {
        return Err(Error::DimensionMismatch {
            context: "incidence stacked dimension vs interaction rows",
            expected: n,
            got: obs.incidence.stacked_dim(),
        });
    }
    let y_f = DVector::from(prior.sample(1, flux_rng)?.row(0).transpose());
    let mut y_m = b * &y_f;
    if let Some(m) = discrepancy_mean {
        if m.len() != n {
            return Err(Error::DimensionMismatch {
                context: "discrepancy mean",
                expected: n,
                got: m.len(),
            });
        }
        y_m += m;
    }
    if let Some(cov) = disc {
        if cov.n() != n {
            return Err(Error::DimensionMismatch {
                context: "discrepancy dimension vs interaction rows",
                expected: n,
                got: cov.n(),
            });
        }
        y_m += cov.sample(disc_rng);
    }
    let mut z = obs.incidence.gather(&y_m);
    if obs.noise_variance > 0.0 {
        let sd = obs.noise_variance.sqrt();
        for v in z.iter_mut() {
            *v += sd * noise_rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((y_f, y_m, z))
}
