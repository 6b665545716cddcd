//! Marginal-likelihood estimation of the discrepancy parameters by a
//! Laplace-approximate EM algorithm.
//!
//! The E-step finds the mode of the conditional density of (Y_f, Y_m) given
//! the observations by quasi-Newton ascent, then treats the conditional as
//! Gaussian with covariance from the negative Hessian at the mode. The
//! expected complete-data log likelihood depends on the latent fields only
//! through the second-moment matrix
//!
//! ```text
//! Psi = E[(Y_m - B Y_f - m)(Y_m - B Y_f - m)'] = W + U S U' + r r'
//! ```
//!
//! with W the inverse of the mole-block precision M, S the flux-block
//! posterior covariance, U = B - W Q_zeta B, and r the residual at the
//! mode. Psi is never materialized at production sizes; M-step traces
//! contract it against the temporal tridiagonal patterns of the AR(1)
//! inverse.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::discrepancy::{ar1_log_det, DiscrepancyParams, SeparableCovariance};
use crate::domains::ObservationIncidence;
use crate::error::{Error, Result};
use crate::fileio;
use crate::flux::LognormalFluxPrior;
use crate::linalg;
use crate::optim::{self, LbfgsOptions};
use crate::solver::MoleSystem;

/// How the flux prior enters the joint density.
///
/// `GaussianTest` reinterprets the prior's log-scale mean and covariance as
/// a Gaussian law for the flux itself, making the model linear-Gaussian
/// with a closed-form posterior; it exists to validate the Laplace step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Lognormal,
    GaussianTest,
}

/// Data and fixed structure for one estimation problem.
pub struct EmProblem {
    pub prior: LognormalFluxPrior,
    pub prior_kind: PriorKind,
    pub b: DMatrix<f64>,
    pub incidence: ObservationIncidence,
    pub z: DVector<f64>,
    pub sigma2_eps: f64,
    pub site_dist: DMatrix<f64>,
    pub n_steps: usize,
    pub disc_mean: Option<DVector<f64>>,
    prior_precision: DMatrix<f64>,
}

impl EmProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prior: LognormalFluxPrior,
        prior_kind: PriorKind,
        b: DMatrix<f64>,
        incidence: ObservationIncidence,
        z: DVector<f64>,
        sigma2_eps: f64,
        site_coords: &[Vec<f64>],
        n_steps: usize,
        disc_mean: Option<DVector<f64>>,
    ) -> Result<Self> {
        let q = site_coords.len();
        let n = n_steps * q;
        if incidence.stacked_dim() != n {
            return Err(Error::DimensionMismatch {
                context: "incidence stacked dimension",
                expected: n,
                got: incidence.stacked_dim(),
            });
        }
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
        if !(sigma2_eps > 0.0) || !sigma2_eps.is_finite() {
            return Err(Error::InvalidParams(format!(
                "observation noise variance must be positive, got {sigma2_eps}"
            )));
        }
        let mut site_dist = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in (i + 1)..q {
                let h = crate::domains::dist(&site_coords[i], &site_coords[j]);
                site_dist[(i, j)] = h;
                site_dist[(j, i)] = h;
            }
        }
        let (prior_precision, _) = prior.precision()?;
        Ok(EmProblem {
            prior,
            prior_kind,
            b,
            incidence,
            z,
            sigma2_eps,
            site_dist,
            n_steps,
            disc_mean,
            prior_precision,
        })
    }

    pub fn n(&self) -> usize {
        self.incidence.stacked_dim()
    }

    pub fn n_flux(&self) -> usize {
        self.prior.len()
    }

    pub fn prior_precision(&self) -> &DMatrix<f64> {
        &self.prior_precision
    }

    fn disc_residual(&self, y_f: &DVector<f64>, y_m: &DVector<f64>) -> DVector<f64> {
        let mut r = y_m - &self.b * y_f;
        if let Some(m) = &self.disc_mean {
            r -= m;
        }
        r
    }

    /// Deviation of the prior coordinate (log flux, or flux itself for the
    /// Gaussian test prior) from the prior mean.
    fn prior_deviation(&self, y_f: &DVector<f64>) -> Result<DVector<f64>> {
        match self.prior_kind {
            PriorKind::Lognormal => {
                if y_f.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
                    return Err(Error::DomainError(
                        "flux field must be strictly positive".into(),
                    ));
                }
                Ok(DVector::from_fn(y_f.len(), |i, _| {
                    y_f[i].ln() - self.prior.log_mean[i]
                }))
            }
            PriorKind::GaussianTest => Ok(y_f - &self.prior.log_mean),
        }
    }

    /// Mode-search starting point: the prior mean field, with observed
    /// entries of the mole-fraction field replaced by station averages.
    pub fn default_init(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let y_f = match self.prior_kind {
            PriorKind::Lognormal => {
                let (mean, _) = self.prior.natural_moments()?;
                mean
            }
            PriorKind::GaussianTest => self.prior.log_mean.clone(),
        };
        let mut y_m = &self.b * &y_f;
        if let Some(m) = &self.disc_mean {
            y_m += m;
        }
        let counts = self.incidence.col_counts();
        let sums = self.incidence.scatter_add(&self.z);
        for i in 0..y_m.len() {
            if counts[i] > 0.0 {
                y_m[i] = sums[i] / counts[i];
            }
        }
        Ok((y_f, y_m))
    }
}

/// Joint log density of (Y_f, Y_m) given the observations, up to an
/// additive constant in the data and covariance parameters.
pub fn joint_log_density(
    problem: &EmProblem,
    cov: &SeparableCovariance,
    y_f: &DVector<f64>,
    y_m: &DVector<f64>,
) -> Result<f64> {
    let dev = problem.prior_deviation(y_f)?;
    let obs_res = &problem.z - problem.incidence.gather(y_m);
    let disc_res = problem.disc_residual(y_f, y_m);
    let mut value = -0.5 * obs_res.norm_squared() / problem.sigma2_eps
        - 0.5 * cov.quad_form_inv(&disc_res)?
        - 0.5 * dev.dot(&(problem.prior_precision() * &dev));
    if problem.prior_kind == PriorKind::Lognormal {
        value -= y_f.iter().map(|v| v.ln()).sum::<f64>();
    }
    Ok(value)
}

/// Gradient of [`joint_log_density`] in the original coordinates, stacked
/// as (flux block, mole block).
pub fn joint_gradient(
    problem: &EmProblem,
    cov: &SeparableCovariance,
    y_f: &DVector<f64>,
    y_m: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dev = problem.prior_deviation(y_f)?;
    let disc_res = problem.disc_residual(y_f, y_m);
    let q_res = cov.kron_solve(&disc_res)?;
    let obs_res = &problem.z - problem.incidence.gather(y_m);
    let g_m = problem.incidence.scatter_add(&obs_res) / problem.sigma2_eps - &q_res;
    let mut g_f = problem.b.transpose() * &q_res;
    let prior_pull = problem.prior_precision() * &dev;
    match problem.prior_kind {
        PriorKind::Lognormal => {
            for i in 0..g_f.len() {
                g_f[i] -= (prior_pull[i] + 1.0) / y_f[i];
            }
        }
        PriorKind::GaussianTest => {
            g_f -= &prior_pull;
        }
    }
    let mut out = DVector::zeros(g_f.len() + g_m.len());
    out.rows_mut(0, g_f.len()).copy_from(&g_f);
    out.rows_mut(g_f.len(), g_m.len()).copy_from(&g_m);
    Ok(out)
}

/// Dense Hessian of the joint log density, for validation-sized problems.
pub fn joint_hessian(
    problem: &EmProblem,
    cov: &SeparableCovariance,
    y_f: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let p = problem.n_flux();
    let n = problem.n();
    let sigma = cov.dense()?;
    let q_zeta = linalg::cholesky_with_jitter(&sigma)?.factor.inverse();
    let mut h = DMatrix::zeros(p + n, p + n);
    let b_q = problem.b.transpose() * &q_zeta;
    let h_ff_data = -(&b_q * &problem.b);
    h.view_mut((0, 0), (p, p)).copy_from(&h_ff_data);
    match problem.prior_kind {
        PriorKind::Lognormal => {
            let dev = problem.prior_deviation(y_f)?;
            let pull = problem.prior_precision() * &dev;
            for i in 0..p {
                for j in 0..p {
                    h[(i, j)] -= problem.prior_precision()[(i, j)] / (y_f[i] * y_f[j]);
                }
                let dff = 1.0 / (y_f[i] * y_f[i]);
                h[(i, i)] += pull[i] * dff + dff;
            }
        }
        PriorKind::GaussianTest => {
            for i in 0..p {
                for j in 0..p {
                    h[(i, j)] -= problem.prior_precision()[(i, j)];
                }
            }
        }
    }
    h.view_mut((0, p), (p, n)).copy_from(&b_q);
    h.view_mut((p, 0), (n, p)).copy_from(&b_q.transpose());
    let counts = problem.incidence.col_counts();
    let mut h_mm = -q_zeta;
    for i in 0..n {
        h_mm[(i, i)] -= counts[i] / problem.sigma2_eps;
    }
    h.view_mut((p, p), (n, n)).copy_from(&h_mm);
    Ok(h)
}

/// Cap on the Newton steps that refine the quasi-Newton mode.
const NEWTON_POLISH_LIMIT: usize = 60;

/// Largest relative ridge tried before the damped Newton refinement gives up.
const NEWTON_RIDGE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy)]
pub struct ModeSearchConfig {
    pub max_iters: usize,
    /// Gradient tolerance, relative to the larger of one and the gradient
    /// norm at the starting point.
    pub grad_tol: f64,
}

impl Default for ModeSearchConfig {
    fn default() -> Self {
        ModeSearchConfig {
            max_iters: 400,
            grad_tol: 1e-6,
        }
    }
}

/// Temporal contractions of Psi sufficient for every M-step trace: the sum
/// of diagonal blocks, of interior diagonal blocks, and of adjacent
/// off-diagonal blocks.
#[derive(Debug, Clone)]
pub struct PsiStats {
    pub p0: DMatrix<f64>,
    pub p0m: DMatrix<f64>,
    pub p1: DMatrix<f64>,
    pub n_steps: usize,
}

impl PsiStats {
    /// Contraction against the tridiagonal AR(1) inverse correlation. A
    /// single step has no serial structure: the inverse correlation is 1
    /// and the contraction reduces to the lone diagonal block.
    pub fn contract_ar1_inverse(&self, a: f64) -> DMatrix<f64> {
        if self.n_steps == 1 {
            return self.p0.clone();
        }
        (&self.p0 + &self.p0m * (a * a) - &self.p1 * a) / (1.0 - a * a)
    }

    /// Derivative of [`Self::contract_ar1_inverse`] in a.
    pub fn contract_ar1_inverse_da(&self, a: f64) -> DMatrix<f64> {
        if self.n_steps == 1 {
            return DMatrix::zeros(self.p0.nrows(), self.p0.ncols());
        }
        let one = 1.0 - a * a;
        let num = &self.p0 + &self.p0m * (a * a) - &self.p1 * a;
        ((&self.p0m * (2.0 * a) - &self.p1) * one + num * (2.0 * a)) / (one * one)
    }
}

fn accumulate_outer_stats(
    v: &DVector<f64>,
    q: usize,
    t: usize,
    p0: &mut DMatrix<f64>,
    p0m: &mut DMatrix<f64>,
    p1: &mut DMatrix<f64>,
) {
    let mat = DMatrix::from_column_slice(q, t, v.as_slice());
    *p0 += &mat * mat.transpose();
    if t > 2 {
        let mid = mat.columns(1, t - 2);
        *p0m += &mid * mid.transpose();
    }
    if t > 1 {
        let head = mat.columns(0, t - 1);
        let tail = mat.columns(1, t - 1);
        let cross = &head * tail.transpose();
        *p1 += &cross;
        *p1 += cross.transpose();
    }
}

/// Second-moment matrix of the discrepancy residual under the Laplace
/// approximation, either dense or in solver-backed factored form.
pub enum PsiMatrix {
    Dense {
        psi: DMatrix<f64>,
        n_steps: usize,
    },
    Factored(Box<PsiFactored>),
}

pub struct PsiFactored {
    pub system: MoleSystem,
    /// Scaled low-rank factor; Psi = M^-1 + u_tilde u_tilde' + r r'.
    pub u_tilde: DMatrix<f64>,
    pub r: DVector<f64>,
    w_p0: DMatrix<f64>,
    w_p0m: DMatrix<f64>,
    w_p1: DMatrix<f64>,
}

impl PsiMatrix {
    pub fn n_sites(&self) -> usize {
        match self {
            PsiMatrix::Dense { psi, n_steps } => psi.nrows() / n_steps,
            PsiMatrix::Factored(f) => f.system.cov().n_sites(),
        }
    }

    pub fn n_steps(&self) -> usize {
        match self {
            PsiMatrix::Dense { n_steps, .. } => *n_steps,
            PsiMatrix::Factored(f) => f.system.cov().n_steps(),
        }
    }

    /// Temporal contractions used by the M-step, one sweep.
    pub fn stats(&self) -> PsiStats {
        let q = self.n_sites();
        let t = self.n_steps();
        match self {
            PsiMatrix::Dense { psi, .. } => {
                let mut p0 = DMatrix::zeros(q, q);
                let mut p0m = DMatrix::zeros(q, q);
                let mut p1 = DMatrix::zeros(q, q);
                for step in 0..t {
                    let blk = psi.view((step * q, step * q), (q, q));
                    p0 += blk;
                    if step > 0 && step + 1 < t {
                        p0m += blk;
                    }
                    if step + 1 < t {
                        p1 += psi.view((step * q, (step + 1) * q), (q, q));
                        p1 += psi.view(((step + 1) * q, step * q), (q, q));
                    }
                }
                PsiStats {
                    p0,
                    p0m,
                    p1,
                    n_steps: t,
                }
            }
            PsiMatrix::Factored(f) => {
                let mut p0 = f.w_p0.clone();
                let mut p0m = f.w_p0m.clone();
                let mut p1 = f.w_p1.clone();
                for c in 0..f.u_tilde.ncols() {
                    let col = DVector::from(f.u_tilde.column(c));
                    accumulate_outer_stats(&col, q, t, &mut p0, &mut p0m, &mut p1);
                }
                accumulate_outer_stats(&f.r, q, t, &mut p0, &mut p0m, &mut p1);
                PsiStats {
                    p0,
                    p0m,
                    p1,
                    n_steps: t,
                }
            }
        }
    }

    /// General temporal contraction sum_{t,t'} Mt[t',t] Psi_block(t,t').
    pub fn contract_temporal(&self, mt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let q = self.n_sites();
        let t = self.n_steps();
        if mt.nrows() != t || mt.ncols() != t {
            return Err(Error::DimensionMismatch {
                context: "temporal contraction factor",
                expected: t,
                got: mt.nrows(),
            });
        }
        match self {
            PsiMatrix::Dense { psi, .. } => {
                let mut c = DMatrix::zeros(q, q);
                for ta in 0..t {
                    for tb in 0..t {
                        let w = mt[(tb, ta)];
                        if w != 0.0 {
                            c += psi.view((ta * q, tb * q), (q, q)) * w;
                        }
                    }
                }
                Ok(c)
            }
            PsiMatrix::Factored(f) => {
                let mut c = f.system.contract_w_temporal(mt)?;
                let contract_col = |v: &DVector<f64>, c: &mut DMatrix<f64>| {
                    let mat = DMatrix::from_column_slice(q, t, v.as_slice());
                    *c += &mat * mt.transpose() * mat.transpose();
                };
                for col in 0..f.u_tilde.ncols() {
                    contract_col(&DVector::from(f.u_tilde.column(col)), &mut c);
                }
                contract_col(&f.r, &mut c);
                Ok(c)
            }
        }
    }

    /// tr((Mt kron Ms) Psi) without forming either Kronecker factor.
    pub fn trace_kron(&self, mt: &DMatrix<f64>, ms: &DMatrix<f64>) -> Result<f64> {
        let q = self.n_sites();
        if ms.nrows() != q || ms.ncols() != q {
            return Err(Error::DimensionMismatch {
                context: "spatial contraction factor",
                expected: q,
                got: ms.nrows(),
            });
        }
        let c = self.contract_temporal(mt)?;
        let mut acc = 0.0;
        for i in 0..q {
            for j in 0..q {
                acc += ms[(i, j)] * c[(j, i)];
            }
        }
        Ok(acc)
    }

    /// Materialize Psi, for validation-sized problems.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        match self {
            PsiMatrix::Dense { psi, .. } => Ok(psi.clone()),
            PsiMatrix::Factored(f) => {
                let n = f.r.len();
                if n > crate::discrepancy::DENSE_LIMIT {
                    return Err(Error::ScaleLimit(n));
                }
                let w = f.system.solve_mat(&DMatrix::identity(n, n))?;
                Ok(w + &f.u_tilde * f.u_tilde.transpose() + &f.r * f.r.transpose())
            }
        }
    }
}

/// Output of one Laplace E-step.
pub struct InversionState {
    pub mode_flux: DVector<f64>,
    pub mode_mole: DVector<f64>,
    /// Posterior covariance of the flux block at the mode.
    pub cov_ff: DMatrix<f64>,
    pub psi: PsiMatrix,
    pub grad_norm: f64,
    pub mode_iters: usize,
}

/// Find the conditional mode of (Y_f, Y_m) and assemble Laplace moments.
///
/// The search runs on (ln Y_f, Y_m) for the lognormal prior, which keeps
/// the flux positive without explicit constraints, and on (Y_f, Y_m) for
/// the Gaussian test prior. The system argument carries the discrepancy
/// covariance at the current parameter values and is consumed into the
/// returned factored moment matrix.
pub fn laplace_e_step(
    problem: &EmProblem,
    system: MoleSystem,
    init: &(DVector<f64>, DVector<f64>),
    config: &ModeSearchConfig,
) -> Result<InversionState> {
    let p = problem.n_flux();
    let n = problem.n();
    let lognormal = problem.prior_kind == PriorKind::Lognormal;
    let cov = system.cov();

    let encode = |y_f: &DVector<f64>, y_m: &DVector<f64>| {
        let mut x = DVector::zeros(p + n);
        for i in 0..p {
            x[i] = if lognormal { y_f[i].ln() } else { y_f[i] };
        }
        x.rows_mut(p, n).copy_from(y_m);
        x
    };
    let decode_flux = |x: &DVector<f64>| {
        DVector::from_fn(p, |i, _| if lognormal { x[i].exp() } else { x[i] })
    };

    let j0 = joint_gradient(problem, cov, &init.0, &init.1)?;
    let tol = config.grad_tol * linalg::max_abs(&j0).max(1.0);

    let objective = |x: &DVector<f64>| -> (f64, DVector<f64>) {
        let y_f = decode_flux(x);
        let y_m = DVector::from(x.rows(p, n));
        match (
            joint_log_density(problem, cov, &y_f, &y_m),
            joint_gradient(problem, cov, &y_f, &y_m),
        ) {
            (Ok(v), Ok(mut g)) => {
                if lognormal {
                    for i in 0..p {
                        g[i] *= y_f[i];
                    }
                }
                (v, g)
            }
            _ => (f64::NEG_INFINITY, DVector::zeros(p + n)),
        }
    };
    let original_norm = |x: &DVector<f64>, g: &DVector<f64>| {
        let mut worst = 0.0f64;
        for i in 0..p + n {
            let scale = if lognormal && i < p { (-x[i]).exp() } else { 1.0 };
            worst = worst.max((g[i] * scale).abs());
        }
        worst
    };
    let outcome = optim::maximize(
        objective,
        encode(&init.0, &init.1),
        &LbfgsOptions {
            max_iters: config.max_iters,
            grad_tol: 0.0,
            ..LbfgsOptions::default()
        },
        |x, g, _| original_norm(x, g) <= tol,
    )?;

    let q_zeta_b = cov.kron_solve_mat(&problem.b)?;
    let pass = system.moment_pass(&q_zeta_b)?;
    let bt_q_zeta_b = problem.b.transpose() * &q_zeta_b;
    let mut schur_base = &bt_q_zeta_b - q_zeta_b.transpose() * &pass.solved;
    linalg::symmetrize(&mut schur_base);

    // The flux block of the Newton system at a given flux field, with the
    // point-independent mole coupling already eliminated.
    let assemble_schur = |y_f: &DVector<f64>| -> Result<DMatrix<f64>> {
        let mut schur = schur_base.clone();
        match problem.prior_kind {
            PriorKind::Lognormal => {
                let dev = problem.prior_deviation(y_f)?;
                let pull = problem.prior_precision() * &dev;
                for i in 0..p {
                    for j in 0..p {
                        schur[(i, j)] += problem.prior_precision()[(i, j)] / (y_f[i] * y_f[j]);
                    }
                    let dff = 1.0 / (y_f[i] * y_f[i]);
                    schur[(i, i)] -= pull[i] * dff + dff;
                }
            }
            PriorKind::GaussianTest => {
                schur += problem.prior_precision();
            }
        }
        Ok(schur)
    };

    // Newton refinement of the quasi-Newton mode. The block elimination
    // reuses the moment pass, so each step costs one p-by-p factorization
    // and one structured solve. A Levenberg ridge keeps the step an ascent
    // direction away from the concave basin; near the mode the undamped
    // steps drive the stationarity gap to rounding level that the
    // line-searched ascent cannot reach.
    let mut mode_flux = decode_flux(&outcome.x);
    let mut mode_mole = DVector::from(outcome.x.rows(p, n));
    let mut mode_iters = outcome.iters;
    let mut value = joint_log_density(problem, cov, &mode_flux, &mode_mole)?;
    let mut grad = joint_gradient(problem, cov, &mode_flux, &mode_mole)?;
    let mut grad_norm = linalg::max_abs(&grad);
    let mut ridge = 0.0f64;
    for _ in 0..NEWTON_POLISH_LIMIT {
        if grad_norm <= tol {
            break;
        }
        let schur = assemble_schur(&mode_flux)?;
        let scale = schur.diagonal().amax().max(1.0);
        let chol = loop {
            let mut damped = schur.clone();
            if ridge > 0.0 {
                for i in 0..p {
                    damped[(i, i)] += ridge * scale;
                }
            }
            match damped.cholesky() {
                Some(c) => break Some(c),
                None => {
                    ridge = if ridge > 0.0 { ridge * 10.0 } else { 1e-8 };
                    if ridge > NEWTON_RIDGE_LIMIT {
                        break None;
                    }
                }
            }
        };
        let Some(chol) = chol else {
            break;
        };
        let g_f = DVector::from(grad.rows(0, p));
        let g_m = DVector::from(grad.rows(p, n));
        let m_inv_gm = system.solve(&g_m)?;
        let delta_f = chol.solve(&(g_f + pass.solved.transpose() * &g_m));
        let delta_m = &m_inv_gm + &pass.solved * &delta_f;
        let mut alpha = 1.0f64;
        let mut moved = false;
        while alpha > 1e-4 {
            let cand_f = &mode_flux + alpha * &delta_f;
            if lognormal && cand_f.iter().any(|v| !(*v > 0.0)) {
                alpha *= 0.5;
                continue;
            }
            let cand_m = &mode_mole + alpha * &delta_m;
            let cand_value = match joint_log_density(problem, cov, &cand_f, &cand_m) {
                Ok(v) if v.is_finite() => v,
                _ => {
                    alpha *= 0.5;
                    continue;
                }
            };
            if cand_value < value - 1e-12 * value.abs().max(1.0) {
                alpha *= 0.5;
                continue;
            }
            mode_flux = cand_f;
            mode_mole = cand_m;
            value = cand_value;
            moved = true;
            break;
        }
        mode_iters += 1;
        if moved {
            ridge *= 0.25;
            if ridge < 1e-10 {
                ridge = 0.0;
            }
            grad = joint_gradient(problem, cov, &mode_flux, &mode_mole)?;
            grad_norm = linalg::max_abs(&grad);
        } else {
            // Rejected even at the smallest step: damp harder and retry.
            ridge = if ridge > 0.0 { ridge * 100.0 } else { 1e-6 };
            if ridge > NEWTON_RIDGE_LIMIT {
                break;
            }
        }
    }
    if !grad_norm.is_finite() || grad_norm > tol {
        return Err(Error::ModeSearchFailed { grad_norm });
    }

    let schur = assemble_schur(&mode_flux)?;
    let g = pass.solved;
    let schur_chol = schur.cholesky().ok_or(Error::NonConcaveAtMode)?;
    let cov_ff = schur_chol.inverse();
    // Any square root of cov_ff works for the low-rank factor; use the
    // inverse transposed Cholesky factor of the Schur complement.
    let rt = schur_chol.l().transpose();
    let rt_inv = rt
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::SingularFactor)?;
    let u_tilde = (&problem.b - &g) * rt_inv;
    let r = problem.disc_residual(&mode_flux, &mode_mole);

    let psi = if system.is_structured() {
        PsiMatrix::Factored(Box::new(PsiFactored {
            system,
            u_tilde,
            r,
            w_p0: pass.p0,
            w_p0m: pass.p0m,
            w_p1: pass.p1,
        }))
    } else {
        let n_steps = problem.n_steps;
        let w = system.solve_mat(&DMatrix::identity(n, n))?;
        let mut psi = w + &u_tilde * u_tilde.transpose() + &r * r.transpose();
        linalg::symmetrize(&mut psi);
        PsiMatrix::Dense { psi, n_steps }
    };
    Ok(InversionState {
        mode_flux,
        mode_mole,
        cov_ff,
        psi,
        grad_norm,
        mode_iters,
    })
}

/// Expected complete-data log likelihood of the discrepancy block and its
/// gradient in (sigma2, a, d), sharing one spatial factorization.
pub fn q_value_and_grad(
    params: &DiscrepancyParams,
    stats: &PsiStats,
    site_dist: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>)> {
    params.validate()?;
    let q = site_dist.nrows();
    let t = stats.n_steps;
    let tf = t as f64;
    let qf = q as f64;
    let n = tf * qf;
    let s2 = params.sigma2;
    let a = params.a;
    let d = params.d;
    let r_s = DMatrix::from_fn(q, q, |i, j| (-site_dist[(i, j)] / d).exp());
    let chol_s = linalg::cholesky_with_jitter(&r_s)?.factor;
    let log_det = n * s2.ln()
        + qf * ar1_log_det(a, t)
        + tf * linalg::cholesky_log_det(&chol_s);
    let c = stats.contract_ar1_inverse(a);
    let rs_inv_c = chol_s.solve(&c);
    let tr0 = rs_inv_c.trace();
    let value = -0.5 * log_det - 0.5 * tr0 / s2;

    let g_s2 = 0.5 * (-n / s2 + tr0 / (s2 * s2));
    let c_da = stats.contract_ar1_inverse_da(a);
    let tr_a = chol_s.solve(&c_da).trace();
    let g_a = qf * (tf - 1.0) * a / (1.0 - a * a) - 0.5 * tr_a / s2;
    let dr_s = DMatrix::from_fn(q, q, |i, j| {
        let h = site_dist[(i, j)];
        (h / (d * d)) * (-h / d).exp()
    });
    let x = chol_s.solve(&dr_s);
    let mut tr_d = 0.0;
    for i in 0..q {
        for j in 0..q {
            tr_d += x[(i, j)] * rs_inv_c[(j, i)];
        }
    }
    let g_d = -0.5 * tf * x.trace() + 0.5 * tr_d / s2;
    Ok((value, DVector::from_vec(vec![g_s2, g_a, g_d])))
}

pub fn q_function(
    params: &DiscrepancyParams,
    stats: &PsiStats,
    site_dist: &DMatrix<f64>,
) -> Result<f64> {
    Ok(q_value_and_grad(params, stats, site_dist)?.0)
}

pub fn q_gradient(
    params: &DiscrepancyParams,
    stats: &PsiStats,
    site_dist: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    Ok(q_value_and_grad(params, stats, site_dist)?.1)
}

#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Ascent steps per M-step; the M-step is deliberately partial.
    pub m_step_steps: usize,
    /// Convergence threshold on the largest parameter change, measured on
    /// the unconstrained scale.
    pub param_tol: f64,
    pub mode_search: ModeSearchConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 60,
            m_step_steps: 50,
            param_tol: 1e-4,
            mode_search: ModeSearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmTraceRow {
    pub iter: usize,
    pub params: DiscrepancyParams,
    pub q_value: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    pub rows: Vec<EmTraceRow>,
}

impl EmTrace {
    pub fn write_csv(&self, path: &std::path::Path, meta: Option<&str>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.iter.to_string(),
                    fileio::fmt_f64(r.params.sigma2),
                    fileio::fmt_f64(r.params.a),
                    fileio::fmt_f64(r.params.d),
                    fileio::fmt_f64(r.q_value),
                    fileio::fmt_f64(r.grad_norm),
                    fileio::fmt_f64(r.seconds),
                ]
            })
            .collect();
        fileio::write_table(
            path,
            meta,
            &["iter", "sigma2_zeta", "a", "d", "Q", "grad_norm", "seconds"],
            &rows,
        )
    }
}

pub struct EmOutcome {
    pub params: DiscrepancyParams,
    pub trace: EmTrace,
    pub state: InversionState,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternate Laplace E-steps with partial gradient-ascent M-steps until
/// the parameters settle.
pub fn run_em(
    problem: &EmProblem,
    theta0: DiscrepancyParams,
    config: &EmConfig,
) -> Result<EmOutcome> {
    theta0.validate()?;
    let mut theta = theta0;
    let mut init = problem.default_init()?;
    let mut trace = EmTrace::default();
    let mut last_state: Option<InversionState> = None;
    let mut converged = false;
    let mut iterations = 0;
    let started = Instant::now();
    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let cov = SeparableCovariance::from_distances(
            theta,
            problem.site_dist.clone(),
            problem.n_steps,
        )?;
        let system = MoleSystem::new(cov, &problem.incidence, problem.sigma2_eps)?;
        let state = laplace_e_step(problem, system, &init, &config.mode_search)?;
        let stats = state.psi.stats();

        let q_at = |params: &DiscrepancyParams| -> Result<f64> {
            q_function(params, &stats, &problem.site_dist)
        };
        let q_old = q_at(&theta)?;
        let objective = |phi: &DVector<f64>| -> (f64, DVector<f64>) {
            let params = match DiscrepancyParams::from_transformed(phi) {
                Ok(p) => p,
                Err(_) => return (f64::NEG_INFINITY, DVector::zeros(3)),
            };
            match q_value_and_grad(&params, &stats, &problem.site_dist) {
                Ok((v, g)) => {
                    let chain = DVector::from_vec(vec![
                        g[0] * params.sigma2,
                        g[1] * (1.0 - params.a * params.a),
                        g[2] * params.d,
                    ]);
                    (v, chain)
                }
                Err(_) => (f64::NEG_INFINITY, DVector::zeros(3)),
            }
        };
        let m_step = optim::maximize(
            objective,
            theta.to_transformed(),
            &LbfgsOptions {
                max_iters: config.m_step_steps,
                grad_tol: 1e-10,
                ..LbfgsOptions::default()
            },
            |_, _, _| false,
        )?;
        let theta_new = DiscrepancyParams::from_transformed(&m_step.x)?;
        let q_new = m_step.value;
        if q_new < q_old - 1e-9 * q_old.abs().max(1.0) {
            return Err(Error::EmMonotonicity {
                iter,
                from: q_old,
                to: q_new,
            });
        }
        let delta = linalg::max_abs(&(&m_step.x - theta.to_transformed()));
        trace.rows.push(EmTraceRow {
            iter,
            params: theta_new,
            q_value: q_new,
            grad_norm: linalg::max_abs(&m_step.grad),
            seconds: started.elapsed().as_secs_f64(),
        });
        init = (state.mode_flux.clone(), state.mode_mole.clone());
        last_state = Some(state);
        theta = theta_new;
        if delta < config.param_tol {
            converged = true;
            break;
        }
    }
    Ok(EmOutcome {
        params: theta,
        trace,
        state: last_state.expect("at least one EM iteration"),
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrepancy::sites_1d;
    use crate::domains::{build_incidence, Observation, SpatialGrid, TemporalDomain};
    use crate::flux::FluxMode;
    use crate::optim::central_diff_grad;
    use crate::rng::{stream_rng, STREAM_DISCREPANCY, STREAM_NOISE};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_prior(scale: f64) -> LognormalFluxPrior {
        let coords = [0.0, 0.5, 1.0];
        let grid = SpatialGrid::from_coords_1d(&coords, 0.5).unwrap();
        let log_mean = DVector::from_vec(vec![0.2, 0.0, -0.1]);
        let log_cov = DMatrix::from_fn(3, 3, |i, j| {
            scale * (-(coords[i] - coords[j]).abs() / 0.8).exp()
        });
        LognormalFluxPrior::new(grid, log_mean, log_cov, FluxMode::Density).unwrap()
    }

    fn small_problem(kind: PriorKind, prior_scale: f64) -> EmProblem {
        let sites = [0.1, 0.9];
        let n_steps = 3;
        let prior = small_prior(prior_scale);
        let b = DMatrix::from_fn(6, 3, |i, j| 0.1 + 0.25 * (((i + 2 * j) % 5) as f64) * 0.4);
        let mole_grid = SpatialGrid::from_coords_1d(&sites, 1.0).unwrap();
        let time = TemporalDomain::new(n_steps, 2.0).unwrap();
        let mut obs = Vec::new();
        for t in 0..n_steps {
            for (i, &s) in sites.iter().enumerate() {
                obs.push(Observation {
                    t,
                    station_id: i as u64,
                    coord: vec![s],
                    value: 1.0 + 0.3 * t as f64 - 0.2 * i as f64,
                });
            }
        }
        let (incidence, z) = build_incidence(&mole_grid, &time, &obs).unwrap();
        EmProblem::new(
            prior,
            kind,
            b,
            incidence,
            z,
            0.5,
            &sites_1d(&sites),
            n_steps,
            None,
        )
        .unwrap()
    }

    fn small_cov(problem: &EmProblem) -> SeparableCovariance {
        SeparableCovariance::from_distances(
            DiscrepancyParams::new(0.8, 0.4, 0.7).unwrap(),
            problem.site_dist.clone(),
            problem.n_steps,
        )
        .unwrap()
    }

    #[test]
    fn scalar_toy_log_density_is_zero() {
        let grid = SpatialGrid::from_coords_1d(&[0.0], 1.0).unwrap();
        let prior = LognormalFluxPrior::new(
            grid,
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            FluxMode::Density,
        )
        .unwrap();
        let mole_grid = SpatialGrid::from_coords_1d(&[0.0], 1.0).unwrap();
        let time = TemporalDomain::new(1, 1.0).unwrap();
        let obs = [Observation {
            t: 0,
            station_id: 0,
            coord: vec![0.0],
            value: 1.0,
        }];
        let (incidence, z) = build_incidence(&mole_grid, &time, &obs).unwrap();
        let problem = EmProblem::new(
            prior,
            PriorKind::Lognormal,
            DMatrix::from_element(1, 1, 1.0),
            incidence,
            z,
            1.0,
            &sites_1d(&[0.0]),
            1,
            None,
        )
        .unwrap();
        let cov = SeparableCovariance::from_distances(
            DiscrepancyParams::new(1.0, 0.0, 1.0).unwrap(),
            DMatrix::zeros(1, 1),
            1,
        )
        .unwrap();
        let one = DVector::from_element(1, 1.0);
        let v = joint_log_density(&problem, &cov, &one, &one).unwrap();
        assert!(v.abs() < 1e-12, "value {v}");
        let zero = DVector::from_element(1, 0.0);
        assert!(matches!(
            joint_log_density(&problem, &cov, &zero, &one),
            Err(Error::DomainError(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for kind in [PriorKind::Lognormal, PriorKind::GaussianTest] {
            let problem = small_problem(kind, 0.3);
            let cov = small_cov(&problem);
            let y_f = DVector::from_vec(vec![0.9, 1.3, 0.7]);
            let y_m = DVector::from_fn(6, |i, _| 0.8 + 0.15 * i as f64);
            let g = {
                let mut x = DVector::zeros(9);
                x.rows_mut(0, 3).copy_from(&y_f);
                x.rows_mut(3, 6).copy_from(&y_m);
                let f = |v: &DVector<f64>| {
                    let yf = DVector::from(v.rows(0, 3));
                    let ym = DVector::from(v.rows(3, 6));
                    joint_log_density(&problem, &cov, &yf, &ym).unwrap()
                };
                let fd = central_diff_grad(f, &x, 1e-6);
                let analytic = joint_gradient(&problem, &cov, &y_f, &y_m).unwrap();
                (&fd - &analytic).amax() / analytic.amax().max(1.0)
            };
            assert!(g < 1e-6, "{kind:?}: relative gradient error {g}");
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        for kind in [PriorKind::Lognormal, PriorKind::GaussianTest] {
            let problem = small_problem(kind, 0.3);
            let cov = small_cov(&problem);
            let y_f = DVector::from_vec(vec![1.1, 0.8, 1.4]);
            let y_m = DVector::from_fn(6, |i, _| 1.0 - 0.1 * i as f64);
            let h = joint_hessian(&problem, &cov, &y_f).unwrap();
            let mut x = DVector::zeros(9);
            x.rows_mut(0, 3).copy_from(&y_f);
            x.rows_mut(3, 6).copy_from(&y_m);
            let step = 1e-6;
            for k in 0..9 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += step;
                xm[k] -= step;
                let gp = joint_gradient(
                    &problem,
                    &cov,
                    &DVector::from(xp.rows(0, 3)),
                    &DVector::from(xp.rows(3, 6)),
                )
                .unwrap();
                let gm = joint_gradient(
                    &problem,
                    &cov,
                    &DVector::from(xm.rows(0, 3)),
                    &DVector::from(xm.rows(3, 6)),
                )
                .unwrap();
                let col = (gp - gm) / (2.0 * step);
                let err = (&col - &h.column(k)).amax();
                assert!(err < 5e-5, "{kind:?}: column {k} error {err}");
            }
        }
    }

    #[test]
    fn gaussian_prior_matches_conjugate_posterior() {
        let problem = small_problem(PriorKind::GaussianTest, 0.3);
        let cov = small_cov(&problem);
        let system = MoleSystem::new(cov.clone(), &problem.incidence, problem.sigma2_eps).unwrap();
        let init = problem.default_init().unwrap();
        let state = laplace_e_step(
            &problem,
            system,
            &init,
            &ModeSearchConfig {
                max_iters: 2000,
                grad_tol: 1e-11,
            },
        )
        .unwrap();

        let (p, n) = (3, 6);
        let q_zeta = linalg::spd_inverse(&cov.dense().unwrap()).unwrap();
        let q_tilde = problem.prior_precision().clone();
        let counts = problem.incidence.col_counts();
        let mut prec = DMatrix::zeros(p + n, p + n);
        let bq = problem.b.transpose() * &q_zeta;
        prec.view_mut((0, 0), (p, p))
            .copy_from(&(&q_tilde + &bq * &problem.b));
        prec.view_mut((0, p), (p, n)).copy_from(&(-&bq));
        prec.view_mut((p, 0), (n, p)).copy_from(&(-bq.transpose()));
        let mut mm = q_zeta.clone();
        for i in 0..n {
            mm[(i, i)] += counts[i] / problem.sigma2_eps;
        }
        prec.view_mut((p, p), (n, n)).copy_from(&mm);
        let mut rhs = DVector::zeros(p + n);
        rhs.rows_mut(0, p)
            .copy_from(&(&q_tilde * &problem.prior.log_mean));
        rhs.rows_mut(p, n)
            .copy_from(&(problem.incidence.scatter_add(&problem.z) / problem.sigma2_eps));
        let post_cov = linalg::spd_inverse(&prec).unwrap();
        let mean = &post_cov * rhs;

        assert!((state.mode_flux.clone() - mean.rows(0, p)).amax() < 1e-7);
        assert!((state.mode_mole.clone() - mean.rows(p, n)).amax() < 1e-7);
        assert!(
            (&state.cov_ff - post_cov.view((0, 0), (p, p))).amax() < 1e-7,
            "flux covariance disagrees"
        );

        let mut j = DMatrix::zeros(n, p + n);
        j.view_mut((0, 0), (n, p)).copy_from(&(-&problem.b));
        j.view_mut((0, p), (n, n))
            .copy_from(&DMatrix::identity(n, n));
        let r = DVector::from(mean.rows(p, n)) - &problem.b * DVector::from(mean.rows(0, p));
        let psi_oracle = &j * &post_cov * j.transpose() + &r * r.transpose();
        assert!(
            (state.psi.dense().unwrap() - psi_oracle).amax() < 1e-7,
            "psi disagrees"
        );
    }

    #[test]
    fn tight_prior_pins_mode_at_prior_median() {
        let loose = small_problem(PriorKind::Lognormal, 0.3);
        let tight = small_problem(PriorKind::Lognormal, 1e-4);
        let config = ModeSearchConfig {
            max_iters: 3000,
            grad_tol: 1e-9,
        };
        let run = |problem: &EmProblem| {
            let cov = small_cov(problem);
            let system =
                MoleSystem::new(cov, &problem.incidence, problem.sigma2_eps).unwrap();
            let init = problem.default_init().unwrap();
            laplace_e_step(problem, system, &init, &config)
                .unwrap()
                .mode_flux
        };
        let median = tight.prior.log_mean.map(|v| v.exp());
        let mode_tight = run(&tight);
        let mode_loose = run(&loose);
        for i in 0..3 {
            let rel_tight = (mode_tight[i] / median[i] - 1.0).abs();
            let rel_loose = (mode_loose[i] / median[i] - 1.0).abs();
            assert!(rel_tight < 1e-3, "cell {i}: tight-prior deviation {rel_tight}");
            assert!(rel_loose > 1e-2, "cell {i}: data pull unexpectedly weak");
        }
    }

    #[test]
    fn factored_psi_agrees_with_dense_form() {
        let problem = small_problem(PriorKind::Lognormal, 0.3);
        let cov = small_cov(&problem);
        let system = MoleSystem::new(cov, &problem.incidence, problem.sigma2_eps).unwrap();
        assert!(system.is_structured());
        let init = problem.default_init().unwrap();
        let state =
            laplace_e_step(&problem, system, &init, &ModeSearchConfig::default()).unwrap();
        let dense = PsiMatrix::Dense {
            psi: state.psi.dense().unwrap(),
            n_steps: problem.n_steps,
        };

        let fast = state.psi.stats();
        let slow = dense.stats();
        assert!((&fast.p0 - &slow.p0).amax() < 1e-9);
        assert!((&fast.p0m - &slow.p0m).amax() < 1e-9);
        assert!((&fast.p1 - &slow.p1).amax() < 1e-9);

        let mt = DMatrix::from_fn(3, 3, |i, j| 0.2 * i as f64 - 0.3 * j as f64 + 1.0);
        let ms = DMatrix::from_fn(2, 2, |i, j| 0.5 * (i + j) as f64 + 0.4);
        let tr_fast = state.psi.trace_kron(&mt, &ms).unwrap();
        let tr_slow = dense.trace_kron(&mt, &ms).unwrap();
        assert!((tr_fast - tr_slow).abs() < 1e-9 * tr_slow.abs().max(1.0));
        let oracle = (linalg::kron_dense(&mt, &ms) * state.psi.dense().unwrap()).trace();
        assert!((tr_fast - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
    }

    fn random_psi_stats(q: usize, t: usize, seed: u64) -> PsiStats {
        let mut rng = stream_rng(seed, STREAM_DISCREPANCY);
        let n = q * t;
        let x = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = &x * x.transpose() / n as f64 + DMatrix::identity(n, n);
        PsiMatrix::Dense { psi, n_steps: t }.stats()
    }

    #[test]
    fn q_gradient_matches_central_differences() {
        let stats = random_psi_stats(3, 5, 4);
        let site_dist = DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64).abs() * 0.6);
        let at = DVector::from_vec(vec![1.3, 0.45, 0.8]);
        let f = |v: &DVector<f64>| {
            let params = DiscrepancyParams::new(v[0], v[1], v[2]).unwrap();
            q_function(&params, &stats, &site_dist).unwrap()
        };
        let fd = central_diff_grad(f, &at, 1e-6);
        let params = DiscrepancyParams::new(at[0], at[1], at[2]).unwrap();
        let analytic = q_gradient(&params, &stats, &site_dist).unwrap();
        let err = (&fd - &analytic).amax() / analytic.amax().max(1.0);
        assert!(err < 1e-6, "relative gradient error {err}");
    }

    #[test]
    fn q_matches_dense_gaussian_log_likelihood() {
        let (q, t) = (3, 4);
        let mut rng = stream_rng(9, STREAM_DISCREPANCY);
        let n = q * t;
        let x = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = &x * x.transpose() / n as f64 + DMatrix::identity(n, n);
        let stats = PsiMatrix::Dense {
            psi: psi.clone(),
            n_steps: t,
        }
        .stats();
        let site_dist = DMatrix::from_fn(q, q, |i, j| (i as f64 - j as f64).abs() * 0.7);
        let params = DiscrepancyParams::new(1.7, 0.35, 0.9).unwrap();
        let cov =
            SeparableCovariance::from_distances(params, site_dist.clone(), t).unwrap();
        let sigma = cov.dense().unwrap();
        let sigma_chol = sigma.clone().cholesky().unwrap();
        let log_det = 2.0 * sigma_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let oracle = -0.5 * log_det - 0.5 * (sigma_chol.solve(&psi)).trace();
        let fast = q_function(&params, &stats, &site_dist).unwrap();
        assert!(
            (fast - oracle).abs() < 1e-9 * oracle.abs().max(1.0),
            "fast {fast} oracle {oracle}"
        );
    }

    #[test]
    fn single_step_contraction_drops_the_serial_term() {
        let mut rng = stream_rng(12, STREAM_DISCREPANCY);
        let x = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = &x * x.transpose() + DMatrix::identity(3, 3);
        let stats = PsiMatrix::Dense {
            psi: psi.clone(),
            n_steps: 1,
        }
        .stats();
        assert_eq!(stats.contract_ar1_inverse(0.6), psi);
        assert_eq!(stats.contract_ar1_inverse_da(0.6).amax(), 0.0);
        let site_dist = DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64).abs() * 0.7);
        let params = DiscrepancyParams::new(1.7, 0.35, 0.9).unwrap();
        let cov = SeparableCovariance::from_distances(params, site_dist.clone(), 1).unwrap();
        let chol = cov.dense().unwrap().cholesky().unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let oracle = -0.5 * log_det - 0.5 * chol.solve(&psi).trace();
        let fast = q_function(&params, &stats, &site_dist).unwrap();
        assert!(
            (fast - oracle).abs() < 1e-12 * oracle.abs(),
            "fast {fast} oracle {oracle}"
        );
    }

    #[test]
    fn variance_gradient_vanishes_at_trace_ratio() {
        let stats = random_psi_stats(3, 5, 7);
        let site_dist = DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64).abs() * 0.6);
        let (a, d) = (0.45, 0.8);
        let r_s = DMatrix::from_fn(3, 3, |i, j| (-site_dist[(i, j)] / d).exp());
        let chol = r_s.cholesky().unwrap();
        let tr0 = chol.solve(&stats.contract_ar1_inverse(a)).trace();
        let n = 15.0;
        let params = DiscrepancyParams::new(tr0 / n, a, d).unwrap();
        let g = q_gradient(&params, &stats, &site_dist).unwrap();
        assert!(g[0].abs() < 1e-10 * n / params.sigma2, "variance gradient {}", g[0]);
    }

    #[test]
    fn em_recovers_residual_variance_in_reduced_model() {
        let sites = [0.0, 5.0, 10.0, 15.0];
        let n_steps = 150;
        let n = sites.len() * n_steps;
        let sigma2_true: f64 = 4.0;
        let mut disc_rng = stream_rng(11, STREAM_DISCREPANCY);
        let mut noise_rng = stream_rng(11, STREAM_NOISE);
        let mole_grid = SpatialGrid::from_coords_1d(&sites, 1.0).unwrap();
        let time = TemporalDomain::new(n_steps, 2.0).unwrap();
        let mut obs = Vec::new();
        for t in 0..n_steps {
            for (i, &s) in sites.iter().enumerate() {
                let zeta: f64 = disc_rng.sample::<f64, _>(StandardNormal);
                let eps: f64 = noise_rng.sample::<f64, _>(StandardNormal);
                obs.push(Observation {
                    t,
                    station_id: i as u64,
                    coord: vec![s],
                    value: sigma2_true.sqrt() * zeta + eps,
                });
            }
        }
        let (incidence, z) = build_incidence(&mole_grid, &time, &obs).unwrap();
        let prior = small_prior(0.3);
        let problem = EmProblem::new(
            prior,
            PriorKind::Lognormal,
            DMatrix::zeros(n, 3),
            incidence,
            z,
            1.0,
            &sites_1d(&sites),
            n_steps,
            None,
        )
        .unwrap();
        let config = EmConfig {
            max_iters: 40,
            m_step_steps: 40,
            param_tol: 1e-5,
            mode_search: ModeSearchConfig::default(),
        };
        let outcome = run_em(
            &problem,
            DiscrepancyParams::new(1.5, 0.2, 0.5).unwrap(),
            &config,
        )
        .unwrap();
        let rel = (outcome.params.sigma2 / sigma2_true - 1.0).abs();
        assert!(rel < 0.1, "sigma2 estimate {} off by {rel}", outcome.params.sigma2);
        // The noise is independent across steps, so the fitted temporal
        // coefficient should be near zero.
        assert!(outcome.params.a.abs() < 0.1, "spurious a {}", outcome.params.a);
        assert!(outcome.converged, "EM did not settle in {} iterations", outcome.iterations);
        assert_eq!(outcome.trace.rows.len(), outcome.iterations);
    }
}

