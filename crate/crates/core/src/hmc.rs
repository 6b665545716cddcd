//! Posterior sampling of the flux field.
//!
//! The mole-fraction field is marginalized out of the joint, leaving a
//! target over Y_f alone whose Gaussian part has covariance
//! C Sigma_zeta C' + sigma2_eps I. Hamiltonian Monte Carlo runs on
//! X = ln Y_f, where the log-scale prior is Gaussian and positivity is
//! automatic; the measure-change Jacobian exactly cancels the lognormal
//! density's reciprocal term. Given each retained flux draw, the
//! mole-fraction field has an exact Gaussian conditional with precision M,
//! so the pair forms a collapsed Gibbs sampler.
//!
//! Marginal-covariance solves never factor the observation-space matrix:
//! the Woodbury identity reduces them to M-solves, which the structured
//! backend performs blockwise.

use std::fs;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domains::ObservationIncidence;
use crate::error::{Error, Result};
use crate::fileio;
use crate::flux::LognormalFluxPrior;
use crate::rng::{stream_rng, STREAM_HMC, STREAM_MOLE};
use crate::scoring;
use crate::solver::MoleSystem;

const CHAIN_MAGIC: &[u8; 4] = b"CHN1";

/// Hamiltonian error beyond which a trajectory counts as divergent.
const DIVERGENCE_LIMIT: f64 = 1000.0;

/// Diagonal mass matrix choice for the momentum distribution.
#[derive(Debug, Clone)]
pub enum MassSpec {
    Identity,
    Diagonal(DVector<f64>),
}

impl MassSpec {
    fn resolve(&self, dim: usize) -> Result<DVector<f64>> {
        match self {
            MassSpec::Identity => Ok(DVector::from_element(dim, 1.0)),
            MassSpec::Diagonal(m) => {
                if m.len() != dim {
                    return Err(Error::DimensionMismatch {
                        context: "mass vector",
                        expected: dim,
                        got: m.len(),
                    });
                }
                if m.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidParams(
                        "mass entries must be positive and finite".into(),
                    ));
                }
                Ok(m.clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HmcConfig {
    pub n_leapfrog: usize,
    /// Step size drawn uniformly from this closed interval per proposal.
    pub delta_range: (f64, f64),
    /// Total iterations, including burn-in.
    pub n_samples: usize,
    pub n_burnin: usize,
    pub mass: MassSpec,
    pub seed: u64,
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_leapfrog == 0 {
            return Err(Error::InvalidParams("need at least one leapfrog step".into()));
        }
        let (lo, hi) = self.delta_range;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::InvalidParams(format!(
                "step-size interval must satisfy 0 < low <= high, got ({lo}, {hi})"
            )));
        }
        if self.n_samples == 0 || self.n_burnin >= self.n_samples {
            return Err(Error::InvalidParams(format!(
                "burn-in {} must be below the iteration count {}",
                self.n_burnin, self.n_samples
            )));
        }
        Ok(())
    }
}

/// Raw chain over the sampling coordinates, burn-in already discarded.
pub struct RawChain {
    /// One retained draw per row.
    pub samples: DMatrix<f64>,
    pub log_density: DVector<f64>,
    /// Accepted proposals over all iterations, burn-in included.
    pub acceptance_rate: f64,
    pub divergences: usize,
}

fn momentum(mass: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(mass.len(), |i, _| {
        mass[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
    })
}

fn kinetic(p: &DVector<f64>, mass: &DVector<f64>) -> f64 {
    0.5 * p.iter().zip(mass.iter()).map(|(pi, mi)| pi * pi / mi).sum::<f64>()
}

/// One leapfrog trajectory. Starts from a point with known density and
/// gradient; returns the endpoint state or None when the trajectory left
/// the region where the target is finite.
#[allow(clippy::type_complexity)]
fn leapfrog<F>(
    target: &mut F,
    x0: &DVector<f64>,
    p0: &DVector<f64>,
    grad0: &DVector<f64>,
    logp0: f64,
    mass: &DVector<f64>,
    delta: f64,
    n_steps: usize,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, f64)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut g = grad0.clone();
    let mut logp = logp0;
    for _ in 0..n_steps {
        p.axpy(0.5 * delta, &g, 1.0);
        for i in 0..x.len() {
            x[i] += delta * p[i] / mass[i];
        }
        match target(&x) {
            Ok((v, gn)) if v.is_finite() && gn.iter().all(|e| e.is_finite()) => {
                logp = v;
                g = gn;
            }
            _ => return None,
        }
        p.axpy(0.5 * delta, &g, 1.0);
    }
    Some((x, p, g, logp))
}

/// Hamiltonian Monte Carlo over an arbitrary differentiable log target.
pub fn hmc_sample<F>(config: &HmcConfig, mut target: F, init: DVector<f64>) -> Result<RawChain>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    config.validate()?;
    let dim = init.len();
    let mass = config.mass.resolve(dim)?;
    let mut rng = stream_rng(config.seed, STREAM_HMC);
    let (mut logp, mut grad) = target(&init)?;
    if !logp.is_finite() {
        return Err(Error::DomainError(
            "log density is not finite at the chain start".into(),
        ));
    }
    let mut x = init;
    let retained = config.n_samples - config.n_burnin;
    let mut samples = DMatrix::zeros(retained, dim);
    let mut log_density = DVector::zeros(retained);
    let mut accepts = 0usize;
    let mut divergences = 0usize;
    for iter in 0..config.n_samples {
        let (lo, hi) = config.delta_range;
        let delta = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let p0 = momentum(&mass, &mut rng);
        let h0 = -logp + kinetic(&p0, &mass);
        match leapfrog(
            &mut target,
            &x,
            &p0,
            &grad,
            logp,
            &mass,
            delta,
            config.n_leapfrog,
        ) {
            Some((xn, pn, gn, lpn)) => {
                let h1 = -lpn + kinetic(&pn, &mass);
                let energy_error = h1 - h0;
                if !energy_error.is_finite() || energy_error.abs() > DIVERGENCE_LIMIT {
                    divergences += 1;
                } else if rng.gen::<f64>() < (-energy_error).exp() {
                    x = xn;
                    logp = lpn;
                    grad = gn;
                    accepts += 1;
                }
            }
            None => divergences += 1,
        }
        if iter >= config.n_burnin {
            let row = iter - config.n_burnin;
            samples.row_mut(row).copy_from(&x.transpose());
            log_density[row] = logp;
        }
    }
    Ok(RawChain {
        samples,
        log_density,
        acceptance_rate: accepts as f64 / config.n_samples as f64,
        divergences,
    })
}

/// Crude pilot loop for the leapfrog step size: short batches, rescaling
/// the step towards 60% acceptance after each batch, then a narrow
/// interval around the final value. The rescaling factor shrinks hard on
/// fully divergent batches so a poor starting step recovers quickly.
pub fn pilot_tune_delta<F>(
    mut target: F,
    init: &DVector<f64>,
    mass: &MassSpec,
    n_leapfrog: usize,
    delta0: f64,
    pilot_iters: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    if !(delta0 > 0.0) {
        return Err(Error::InvalidParams(format!(
            "pilot step size must be positive, got {delta0}"
        )));
    }
    let mass = mass.resolve(init.len())?;
    let mut rng = stream_rng(seed, STREAM_HMC);
    let (mut logp, mut grad) = target(init)?;
    let mut x = init.clone();
    let mut delta = delta0;
    let batch = 25usize.min(pilot_iters.max(1));
    let mut done = 0;
    while done < pilot_iters {
        let mut accepts = 0usize;
        for _ in 0..batch {
            let p0 = momentum(&mass, &mut rng);
            let h0 = -logp + kinetic(&p0, &mass);
            if let Some((xn, pn, gn, lpn)) =
                leapfrog(&mut target, &x, &p0, &grad, logp, &mass, delta, n_leapfrog)
            {
                let h1 = -lpn + kinetic(&pn, &mass);
                let de = h1 - h0;
                if de.is_finite() && de.abs() <= DIVERGENCE_LIMIT && rng.gen::<f64>() < (-de).exp()
                {
                    x = xn;
                    logp = lpn;
                    grad = gn;
                    accepts += 1;
                }
            }
        }
        let rate = accepts as f64 / batch as f64;
        let factor = ((rate + 0.05) / 0.65).powf(0.7).clamp(0.2, 1.5);
        delta *= factor;
        done += batch;
    }
    Ok((0.99 * delta, 1.01 * delta))
}

/// Collapsed posterior over the flux field, with the mole-fraction block
/// marginalized analytically.
pub struct CollapsedTarget {
    system: MoleSystem,
    incidence: ObservationIncidence,
    b: DMatrix<f64>,
    /// Rows of B at the observed stacked positions: the matrix C B.
    cb: DMatrix<f64>,
    z: DVector<f64>,
    /// Observations minus the observed part of the discrepancy mean.
    z_centered: DVector<f64>,
    disc_mean: Option<DVector<f64>>,
    prior_log_mean: DVector<f64>,
    prior_precision: DMatrix<f64>,
    /// -0.5 (N ln 2 pi + ln det of the marginal covariance).
    gaussian_const: f64,
}

impl CollapsedTarget {
    pub fn new(
        prior: &LognormalFluxPrior,
        b: DMatrix<f64>,
        incidence: ObservationIncidence,
        system: MoleSystem,
        z: DVector<f64>,
        disc_mean: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = system.n();
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "interaction matrix rows",
                expected: n,
                got: b.nrows(),
            });
        }
        if b.ncols() != prior.len() {
            return Err(Error::DimensionMismatch {
                context: "interaction matrix columns",
                expected: prior.len(),
                got: b.ncols(),
            });
        }
        if incidence.stacked_dim() != n {
            return Err(Error::DimensionMismatch {
                context: "incidence stacked dimension",
                expected: n,
                got: incidence.stacked_dim(),
            });
        }
        if z.len() != incidence.n_obs() {
            return Err(Error::DimensionMismatch {
                context: "observation vector",
                expected: incidence.n_obs(),
                got: z.len(),
            });
        }
        if let Some(m) = &disc_mean {
            if m.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "discrepancy mean",
                    expected: n,
                    got: m.len(),
                });
            }
        }
        let n_obs = incidence.n_obs();
        let p = prior.len();
        let mut cb = DMatrix::zeros(n_obs, p);
        for (k, _) in incidence.rows().iter().enumerate() {
            cb.row_mut(k).copy_from(&b.row(incidence.stacked_col(k)));
        }
        let z_centered = match &disc_mean {
            Some(m) => &z - incidence.gather(m),
            None => z.clone(),
        };
        let (prior_precision, _) = prior.precision()?;
        let log_det_marginal = n_obs as f64 * system.sigma2_eps().ln()
            + system.cov().log_det()
            + system.log_det()?;
        let gaussian_const =
            -0.5 * (n_obs as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_marginal);
        Ok(CollapsedTarget {
            system,
            incidence,
            b,
            cb,
            z,
            z_centered,
            disc_mean,
            prior_log_mean: prior.log_mean.clone(),
            prior_precision,
            gaussian_const,
        })
    }

    pub fn dim(&self) -> usize {
        self.cb.ncols()
    }

    pub fn system(&self) -> &MoleSystem {
        &self.system
    }

    /// Quadratic form r' Omega^-1 r and the weighted residual Omega^-1 r,
    /// via the Woodbury identity around the structured precision M.
    fn marginal_solve(&self, r: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let s2e = self.system.sigma2_eps();
        let scattered = self.incidence.scatter_add(r);
        let m_inv = self.system.solve(&scattered)?;
        let correction = self.incidence.gather(&m_inv);
        let weighted = (r - &correction / s2e) / s2e;
        let quad = r.dot(&weighted);
        Ok((quad, weighted))
    }

    /// Exact marginal Gaussian log likelihood of the observations at a
    /// fixed flux field, normalization included.
    pub fn marginal_log_likelihood(&self, y_f: &DVector<f64>) -> Result<f64> {
        let r = &self.z_centered - &self.cb * y_f;
        let (quad, _) = self.marginal_solve(&r)?;
        Ok(self.gaussian_const - 0.5 * quad)
    }

    /// Collapsed log density and gradient in the natural flux coordinates.
    pub fn log_density_and_grad(&self, y_f: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        if y_f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "flux vector",
                expected: self.dim(),
                got: y_f.len(),
            });
        }
        if y_f.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::DomainError(
                "flux field must be strictly positive".into(),
            ));
        }
        let r = &self.z_centered - &self.cb * y_f;
        let (quad, weighted) = self.marginal_solve(&r)?;
        let dev = DVector::from_fn(y_f.len(), |i, _| y_f[i].ln() - self.prior_log_mean[i]);
        let pull = &self.prior_precision * &dev;
        let mut value = self.gaussian_const - 0.5 * quad - 0.5 * dev.dot(&pull);
        let mut grad = self.cb.transpose() * &weighted;
        for i in 0..y_f.len() {
            value -= y_f[i].ln();
            grad[i] -= (pull[i] + 1.0) / y_f[i];
        }
        Ok((value, grad))
    }

    /// Diagnostic variant with the prior read as Gaussian directly on the
    /// flux field. The collapsed density is then exactly quadratic, so its
    /// mode is the conjugate posterior mean; used to validate the sampler
    /// target against closed-form linear-Gaussian results.
    pub fn log_density_and_grad_gaussian(
        &self,
        y_f: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        if y_f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "flux vector",
                expected: self.dim(),
                got: y_f.len(),
            });
        }
        let r = &self.z_centered - &self.cb * y_f;
        let (quad, weighted) = self.marginal_solve(&r)?;
        let dev = y_f - &self.prior_log_mean;
        let pull = &self.prior_precision * &dev;
        let value = self.gaussian_const - 0.5 * quad - 0.5 * dev.dot(&pull);
        let grad = self.cb.transpose() * &weighted - pull;
        Ok((value, grad))
    }

    /// The same target over X = ln Y_f; the Jacobian of the change of
    /// variables cancels the lognormal reciprocal term.
    pub fn log_density_and_grad_x(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let y = x.map(|v| v.exp());
        if y.iter().any(|v| !v.is_finite() || *v == 0.0) {
            return Ok((f64::NEG_INFINITY, DVector::zeros(x.len())));
        }
        let (v, g) = self.log_density_and_grad(&y)?;
        let value = v + x.sum();
        let grad = DVector::from_fn(x.len(), |i, _| g[i] * y[i] + 1.0);
        Ok((value, grad))
    }

    /// Exact Gaussian conditional draw of the mole-fraction field given a
    /// flux field: precision M, mean M^-1 (Q_zeta (B Y_f + m) + C' z / s2e).
    pub fn sample_mole_conditional(
        &self,
        y_f: &DVector<f64>,
        rng: &mut impl Rng,
    ) -> Result<DVector<f64>> {
        let mean = self.mole_conditional_mean(y_f)?;
        Ok(mean + self.system.sample_zero_mean(rng)?)
    }

    pub fn mole_conditional_mean(&self, y_f: &DVector<f64>) -> Result<DVector<f64>> {
        let mut prior_mean = &self.b * y_f;
        if let Some(m) = &self.disc_mean {
            prior_mean += m;
        }
        let mut rhs = self.system.cov().kron_solve(&prior_mean)?;
        rhs += self.incidence.scatter_add(&self.z) / self.system.sigma2_eps();
        self.system.solve(&rhs)
    }
}

/// Retained posterior draws on the natural flux scale, with optional
/// conditional mole-fraction draws.
pub struct PosteriorChain {
    pub flux_samples: DMatrix<f64>,
    pub mole_samples: Option<DMatrix<f64>>,
    pub log_density: DVector<f64>,
    pub acceptance_rate: f64,
    pub divergences: usize,
}

/// Run the collapsed sampler: HMC over X = ln Y_f, then, when requested,
/// one exact mole-fraction conditional draw per retained flux sample.
pub fn sample_posterior(
    target: &CollapsedTarget,
    config: &HmcConfig,
    init_flux: &DVector<f64>,
    draw_mole: bool,
) -> Result<PosteriorChain> {
    if init_flux.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::DomainError(
            "chain must start at a strictly positive flux field".into(),
        ));
    }
    let x0 = init_flux.map(|v| v.ln());
    let raw = hmc_sample(config, |x| target.log_density_and_grad_x(x), x0)?;
    let flux_samples = raw.samples.map(|v| v.exp());
    let mole_samples = if draw_mole {
        let mut rng = stream_rng(config.seed, STREAM_MOLE);
        let n = target.system.n();
        let mut out = DMatrix::zeros(flux_samples.nrows(), n);
        for s in 0..flux_samples.nrows() {
            let y_f = DVector::from(flux_samples.row(s).transpose());
            let draw = target.sample_mole_conditional(&y_f, &mut rng)?;
            out.row_mut(s).copy_from(&draw.transpose());
        }
        Some(out)
    } else {
        None
    };
    Ok(PosteriorChain {
        flux_samples,
        mole_samples,
        log_density: raw.log_density,
        acceptance_rate: raw.acceptance_rate,
        divergences: raw.divergences,
    })
}

impl PosteriorChain {
    pub fn n_samples(&self) -> usize {
        self.flux_samples.nrows()
    }

    pub fn flux_mean(&self) -> DVector<f64> {
        scoring::column_means(&self.flux_samples)
    }

    pub fn flux_variance(&self) -> DVector<f64> {
        scoring::column_variances(&self.flux_samples)
    }

    /// Mole-fraction draws at one site, unstacked to samples by time steps.
    pub fn mole_site_draws(&self, n_sites: usize, site: usize) -> Result<DMatrix<f64>> {
        let mole = self.mole_samples.as_ref().ok_or(Error::DomainError(
            "chain holds no mole-fraction draws".into(),
        ))?;
        if n_sites == 0 || mole.ncols() % n_sites != 0 {
            return Err(Error::DimensionMismatch {
                context: "mole draw columns per site",
                expected: n_sites,
                got: mole.ncols(),
            });
        }
        let n_steps = mole.ncols() / n_sites;
        if site >= n_sites {
            return Err(Error::DimensionMismatch {
                context: "mole site index",
                expected: n_sites,
                got: site,
            });
        }
        Ok(DMatrix::from_fn(mole.nrows(), n_steps, |s, t| {
            mole[(s, t * n_sites + site)]
        }))
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHAIN_MAGIC)?;
        let (s, p) = (self.flux_samples.nrows(), self.flux_samples.ncols());
        let n_mole = self.mole_samples.as_ref().map_or(0, |m| m.ncols());
        for dim in [s as u64, p as u64, n_mole as u64, self.divergences as u64] {
            w.write_all(&dim.to_le_bytes())?;
        }
        w.write_all(&self.acceptance_rate.to_le_bytes())?;
        for i in 0..s {
            for j in 0..p {
                w.write_all(&self.flux_samples[(i, j)].to_le_bytes())?;
            }
        }
        for v in self.log_density.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(mole) = &self.mole_samples {
            for i in 0..s {
                for j in 0..n_mole {
                    w.write_all(&mole[(i, j)].to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHAIN_MAGIC {
            return Err(fileio::format_err(path, "not a chain file (bad magic)"));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<fs::File>| -> Result<u64> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let s = read_u64(&mut r)? as usize;
        let p = read_u64(&mut r)? as usize;
        let n_mole = read_u64(&mut r)? as usize;
        let divergences = read_u64(&mut r)? as usize;
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut BufReader<fs::File>| -> Result<f64> {
            r.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let acceptance_rate = read_f64(&mut r)?;
        let mut flux_samples = DMatrix::zeros(s, p);
        for i in 0..s {
            for j in 0..p {
                flux_samples[(i, j)] = read_f64(&mut r)?;
            }
        }
        let mut log_density = DVector::zeros(s);
        for i in 0..s {
            log_density[i] = read_f64(&mut r)?;
        }
        let mole_samples = if n_mole > 0 {
            let mut mole = DMatrix::zeros(s, n_mole);
            for i in 0..s {
                for j in 0..n_mole {
                    mole[(i, j)] = read_f64(&mut r)?;
                }
            }
            Some(mole)
        } else {
            None
        };
        Ok(PosteriorChain {
            flux_samples,
            mole_samples,
            log_density,
            acceptance_rate,
            divergences,
        })
    }

    /// Per-cell posterior summary: median with 5/25/75/95 percentiles.
    pub fn write_summary_csv(&self, path: &Path, meta: Option<&str>) -> Result<()> {
        let probs = [0.5, 0.05, 0.25, 0.75, 0.95];
        let q = scoring::column_quantiles(&self.flux_samples, &probs)?;
        let rows: Vec<Vec<String>> = (0..q.nrows())
            .map(|cell| {
                let mut row = vec![cell.to_string()];
                for k in 0..probs.len() {
                    row.push(fileio::fmt_f64(q[(cell, k)]));
                }
                row
            })
            .collect();
        fileio::write_table(
            path,
            meta,
            &["cell_id", "median", "q05", "q25", "q75", "q95"],
            &rows,
        )
    }
}
