//! Estimation of surface trace-gas fluxes from atmospheric mole-fraction
//! observations, using a bivariate lognormal spatio-temporal model.
//!
//! The library covers the full inversion pipeline:
//!
//! * calibration of a lognormal flux prior from a gridded inventory
//!   ([`calibration`]),
//! * source-receptor relationships, either loaded from file or synthesised
//!   from a plume-scale Gaussian-process field ([`srr`]),
//! * separable space-time discrepancy covariances with Kronecker-structured
//!   solves ([`discrepancy`]),
//! * marginal-likelihood estimation of the discrepancy parameters by a
//!   Laplace-approximate EM algorithm ([`laplace_em`]),
//! * posterior sampling of the flux field by Hamiltonian Monte Carlo with the
//!   mole-fraction field marginalised out, and conditional draws of the
//!   mole-fraction field ([`hmc`]),
//! * scoring of posterior summaries against simulation truth ([`scoring`]).
//!
//! [`study`] bundles the reference one-dimensional simulation configuration
//! used by the integration suite and the command-line front end.

pub mod calibration;
pub mod discrepancy;
pub mod domains;
pub mod error;
pub mod fileio;
pub mod flux;
pub mod hmc;
pub mod laplace_em;
pub mod linalg;
pub mod moments;
pub mod optim;
pub mod rng;
pub mod scoring;
pub mod solver;
pub mod srr;
pub mod study;

pub use calibration::{
    empirical_semivariogram, fit_best_model, fit_variogram, log_transform_inventory,
    loo_zscores, EmpiricalVariogram, InventoryCell, VariogramFit, VariogramModel,
    VariogramParams,
};
pub use discrepancy::{DiscrepancyParams, SeparableCovariance};
pub use domains::{
    build_incidence, trim_flux_domain, GridCell, Observation, ObservationIncidence,
    SpatialGrid, TemporalDomain, LOCATION_TOL,
};
pub use error::{Error, Result};
pub use flux::{FluxMode, LognormalFluxPrior};
pub use hmc::{
    hmc_sample, pilot_tune_delta, sample_posterior, CollapsedTarget, HmcConfig, MassSpec,
    PosteriorChain, RawChain,
};
pub use laplace_em::{
    joint_gradient, joint_hessian, joint_log_density, laplace_e_step, q_function,
    q_gradient, q_value_and_grad, run_em, EmConfig, EmOutcome, EmProblem, EmTrace,
    EmTraceRow, InversionState, ModeSearchConfig, PriorKind, PsiMatrix, PsiStats,
};
pub use moments::{forward_simulate, joint_moments, BivariateMoments, ObservationModel};
pub use solver::{MoleSystem, MomentPass};
pub use scoring::{
    column_means, column_quantiles, column_variances, predictive_quantiles, regional_total,
    s1_rmse, s2_flux, ScoreReport,
};
pub use srr::{assemble_stacked, synthesize_plume_srr, PlumeGpParams, PlumeScaleField, SrrTensor};
pub use study::{simulate_study, EstimationInputs, SimulatedStudy, StudySetup, REFERENCE_SEED};
