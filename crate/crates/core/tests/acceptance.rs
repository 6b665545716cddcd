//! Release acceptance checks, one test per criterion. Tolerances are pinned
//! in the assertions; each test also prints a one-line summary with the
//! measured numbers behind its verdict (visible with `--nocapture`).
//!
//! The reference-study criteria share one fixture: the shipped dataset is
//! regenerated from its recorded seed, estimated and sampled under both the
//! spatial and the independence prior, once per test process.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use traceinv_core::calibration::VariogramBin;
use traceinv_core::discrepancy::sites_1d;
use traceinv_core::optim::{self, central_diff_grad, LbfgsOptions};
use traceinv_core::rng::stream_rng;
use traceinv_core::*;

/// Sampler step-size interval of the reference study.
const PINNED_DELTA: (f64, f64) = (0.066, 0.068);

fn oracle_problem(kind: PriorKind) -> EmProblem {
    let coords = [0.0, 0.6, 1.1];
    let grid = SpatialGrid::from_coords_1d(&coords, 0.5).expect("flux grid");
    let log_cov = DMatrix::from_fn(3, 3, |i, j| {
        0.4 * (-(coords[i] - coords[j]).abs() / 0.9).exp()
    });
    let prior = LognormalFluxPrior::new(
        grid,
        DVector::from_vec(vec![0.3, 0.0, -0.2]),
        log_cov,
        FluxMode::Density,
    )
    .expect("prior");
    let sites = [0.2, 0.8];
    let n_steps = 3;
    let b = DMatrix::from_fn(6, 3, |i, j| 0.15 + 0.3 * (((2 * i + j) % 7) as f64) / 7.0);
    let mole_grid = SpatialGrid::from_coords_1d(&sites, 1.0).expect("mole grid");
    let time = TemporalDomain::new(n_steps, 2.0).expect("time domain");
    let mut obs = Vec::new();
    for t in 0..n_steps {
        for (i, &s) in sites.iter().enumerate() {
            obs.push(Observation {
                t,
                station_id: i as u64,
                coord: vec![s],
                value: 1.2 + 0.25 * t as f64 - 0.3 * i as f64,
            });
        }
    }
    let (incidence, z) = build_incidence(&mole_grid, &time, &obs).expect("incidence");
    EmProblem::new(prior, kind, b, incidence, z, 0.7, &sites_1d(&sites), n_steps, None)
        .expect("oracle problem")
}

fn oracle_cov(problem: &EmProblem) -> SeparableCovariance {
    SeparableCovariance::from_distances(
        DiscrepancyParams::new(0.9, 0.5, 0.6).expect("params"),
        problem.site_dist.clone(),
        problem.n_steps,
    )
    .expect("covariance")
}

#[test]
fn criterion_1_derivative_oracles() {
    let start = Instant::now();
    let problem = oracle_problem(PriorKind::Lognormal);
    let cov = oracle_cov(&problem);
    let (p, n) = (problem.n_flux(), problem.n());
    let mut rng = stream_rng(101, "acceptance-derivatives");

    let mut worst_grad = 0.0f64;
    for _ in 0..20 {
        let y_f = DVector::from_fn(p, |_, _| (0.6 * rng.sample::<f64, _>(StandardNormal)).exp());
        let y_m = DVector::from_fn(n, |_, _| 1.0 + 0.6 * rng.sample::<f64, _>(StandardNormal));
        let mut x = DVector::zeros(p + n);
        x.rows_mut(0, p).copy_from(&y_f);
        x.rows_mut(p, n).copy_from(&y_m);
        let f = |v: &DVector<f64>| {
            let yf = DVector::from(v.rows(0, p));
            let ym = DVector::from(v.rows(p, n));
            joint_log_density(&problem, &cov, &yf, &ym).expect("log density")
        };
        let fd = central_diff_grad(f, &x, 1e-6);
        let analytic = joint_gradient(&problem, &cov, &y_f, &y_m).expect("gradient");
        let err = (&fd - &analytic).amax() / analytic.amax().max(1.0);
        worst_grad = worst_grad.max(err);
    }
    assert!(
        worst_grad <= 1e-5,
        "joint gradient vs central differences: {worst_grad:.3e}"
    );

    let mut worst_hess = 0.0f64;
    for _ in 0..20 {
        let y_f = DVector::from_fn(p, |_, _| (0.5 * rng.sample::<f64, _>(StandardNormal)).exp());
        let y_m = DVector::from_fn(n, |_, _| 1.0 + 0.4 * rng.sample::<f64, _>(StandardNormal));
        let analytic = joint_hessian(&problem, &cov, &y_f).expect("hessian");
        let mut x = DVector::zeros(p + n);
        x.rows_mut(0, p).copy_from(&y_f);
        x.rows_mut(p, n).copy_from(&y_m);
        let grad_at = |v: &DVector<f64>| {
            let yf = DVector::from(v.rows(0, p));
            let ym = DVector::from(v.rows(p, n));
            joint_gradient(&problem, &cov, &yf, &ym).expect("gradient")
        };
        let mut fd = DMatrix::zeros(p + n, p + n);
        for k in 0..p + n {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            fd.set_column(k, &((grad_at(&xp) - grad_at(&xm)) / (2.0 * h)));
        }
        let err = (&fd - &analytic).amax() / analytic.amax();
        worst_hess = worst_hess.max(err);
    }
    assert!(
        worst_hess <= 1e-4,
        "joint hessian vs gradient differences: {worst_hess:.3e}"
    );

    let mut worst_m = 0.0f64;
    for k in 0..20u64 {
        let (q, t) = (3usize, 5usize);
        let nqt = q * t;
        let x = DMatrix::from_fn(nqt, nqt, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = &x * x.transpose() / nqt as f64 + DMatrix::identity(nqt, nqt);
        let stats = PsiMatrix::Dense { psi, n_steps: t }.stats();
        let coords: Vec<f64> = (0..q)
            .map(|i| i as f64 * 0.8 + 0.3 * rng.gen::<f64>())
            .collect();
        let site_dist = DMatrix::from_fn(q, q, |i, j| (coords[i] - coords[j]).abs());
        let at = DVector::from_vec(vec![
            1.5 * (0.8 * rng.sample::<f64, _>(StandardNormal)).exp(),
            0.05 + 0.85 * rng.gen::<f64>(),
            (0.6 * rng.sample::<f64, _>(StandardNormal)).exp(),
        ]);
        let f = |v: &DVector<f64>| {
            let params = DiscrepancyParams::new(v[0], v[1], v[2]).expect("feasible params");
            q_function(&params, &stats, &site_dist).expect("Q value")
        };
        let fd = central_diff_grad(f, &at, 1e-6);
        let params = DiscrepancyParams::new(at[0], at[1], at[2]).expect("feasible params");
        let g = q_gradient(&params, &stats, &site_dist).expect("Q gradient");
        let err = (&fd - &g).amax() / g.amax().max(1.0);
        assert!(err <= 1e-5, "m-step gradient at point {k}: {err:.3e}");
        worst_m = worst_m.max(err);
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "oracle suite took {secs:.1}s");
    println!(
        "criterion 1 (derivative oracles): PASS — gradient {worst_grad:.2e}, \
         hessian {worst_hess:.2e}, m-step {worst_m:.2e} over 20 points each; {secs:.2}s"
    );
}

#[test]
fn criterion_2_kronecker_dense_equivalence() {
    let start = Instant::now();
    let mut rng = stream_rng(102, "acceptance-kron");
    let params = DiscrepancyParams::new(2.3, 0.55, 1.4).expect("params");
    let mut worst_solve = 0.0f64;
    let mut worst_logdet = 0.0f64;
    let mut worst_trace = 0.0f64;
    let mut worst_value = 0.0f64;
    for t in 1..=8usize {
        for q in 1..=8usize {
            let coords: Vec<f64> = (0..q)
                .map(|i| i as f64 * 0.9 + 0.4 * rng.gen::<f64>())
                .collect();
            let cov = SeparableCovariance::new(params, &sites_1d(&coords), t).expect("covariance");
            let n = q * t;
            // Dense oracle assembled entry by entry from the correlation
            // definitions, independent of the structured code paths.
            let sigma = DMatrix::from_fn(n, n, |r, c| {
                let (tr, sr) = (r / q, r % q);
                let (tc, sc) = (c / q, c % q);
                params.sigma2
                    * params.a.powi((tr as i32 - tc as i32).abs())
                    * (-(coords[sr] - coords[sc]).abs() / params.d).exp()
            });
            let chol = sigma.clone().cholesky().expect("dense oracle factor");

            let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let fast = cov.kron_solve(&v).expect("kron solve");
            let oracle = chol.solve(&v);
            worst_solve = worst_solve.max((&fast - &oracle).amax() / oracle.amax().max(1e-12));

            let ld = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            worst_logdet = worst_logdet.max((cov.log_det() - ld).abs() / ld.abs().max(1.0));

            let x = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let psi = &x * x.transpose() / n as f64 + DMatrix::identity(n, n);
            let stats = PsiMatrix::Dense {
                psi: psi.clone(),
                n_steps: t,
            }
            .stats();
            let contracted = stats.contract_ar1_inverse(params.a);
            let tr_fast = (cov.spatial_inverse() * contracted).trace() / params.sigma2;
            let tr_oracle = chol.solve(&psi).trace();
            worst_trace = worst_trace.max((tr_fast - tr_oracle).abs() / tr_oracle.abs().max(1.0));

            let q_fast = q_function(&params, &stats, cov.site_distances()).expect("Q value");
            let q_oracle = -0.5 * ld - 0.5 * tr_oracle;
            worst_value = worst_value.max((q_fast - q_oracle).abs() / q_oracle.abs().max(1.0));
        }
    }
    assert!(worst_solve <= 1e-9, "kron solve drift {worst_solve:.3e}");
    assert!(worst_logdet <= 1e-9, "log det drift {worst_logdet:.3e}");
    assert!(worst_trace <= 1e-9, "trace term drift {worst_trace:.3e}");
    assert!(worst_value <= 1e-9, "Q value drift {worst_value:.3e}");
    let secs = start.elapsed().as_secs_f64();
    println!(
        "criterion 2 (kronecker equivalence): PASS — solve {worst_solve:.2e}, \
         logdet {worst_logdet:.2e}, trace {worst_trace:.2e}, Q {worst_value:.2e} \
         over factor sizes 1..=8; {secs:.2}s"
    );
}

#[test]
fn criterion_3_gaussian_reduction() {
    let problem = oracle_problem(PriorKind::GaussianTest);
    let cov = oracle_cov(&problem);
    let (p, n) = (problem.n_flux(), problem.n());

    // Conjugate joint posterior over the stacked (flux, mole) state.
    let q_zeta = cov
        .dense()
        .expect("dense covariance")
        .cholesky()
        .expect("factor")
        .inverse();
    let q_tilde = problem.prior_precision().clone();
    let b = problem.b.clone();
    let mut lam = DMatrix::zeros(p + n, p + n);
    lam.view_mut((0, 0), (p, p))
        .copy_from(&(&q_tilde + b.transpose() * &q_zeta * &b));
    lam.view_mut((0, p), (p, n))
        .copy_from(&(-(b.transpose() * &q_zeta)));
    lam.view_mut((p, 0), (n, p)).copy_from(&(-(&q_zeta * &b)));
    let counts = problem.incidence.col_counts();
    let mut mm = q_zeta;
    for i in 0..n {
        mm[(i, i)] += counts[i] / problem.sigma2_eps;
    }
    lam.view_mut((p, p), (n, n)).copy_from(&mm);
    let mut rhs = DVector::zeros(p + n);
    rhs.rows_mut(0, p)
        .copy_from(&(&q_tilde * &problem.prior.log_mean));
    rhs.rows_mut(p, n)
        .copy_from(&(problem.incidence.scatter_add(&problem.z) / problem.sigma2_eps));
    let lam_chol = lam.cholesky().expect("joint precision factor");
    let mean = lam_chol.solve(&rhs);
    let cov_joint = lam_chol.inverse();
    let mean_f = DVector::from(mean.rows(0, p));
    let mean_m = DVector::from(mean.rows(p, n));

    let make_system = || {
        let c = SeparableCovariance::from_distances(
            cov.params(),
            problem.site_dist.clone(),
            problem.n_steps,
        )
        .expect("covariance");
        MoleSystem::new(c, &problem.incidence, problem.sigma2_eps).expect("mole system")
    };
    let state = laplace_e_step(
        &problem,
        make_system(),
        &problem.default_init().expect("init"),
        &ModeSearchConfig::default(),
    )
    .expect("e-step");

    let scale = mean.amax();
    let mode_err = (&state.mode_flux - &mean_f)
        .amax()
        .max((&state.mode_mole - &mean_m).amax())
        / scale;
    assert!(mode_err <= 1e-8, "posterior mean drift {mode_err:.3e}");

    let cov_ff_oracle = cov_joint.view((0, 0), (p, p)).into_owned();
    let cov_err = (&state.cov_ff - &cov_ff_oracle).amax() / cov_ff_oracle.amax();
    assert!(cov_err <= 1e-8, "flux covariance drift {cov_err:.3e}");

    let mut d_mat = DMatrix::zeros(n, p + n);
    d_mat.view_mut((0, 0), (n, p)).copy_from(&(-&b));
    for i in 0..n {
        d_mat[(i, p + i)] = 1.0;
    }
    let resid_mean = &mean_m - &b * &mean_f;
    let psi_oracle = &d_mat * &cov_joint * d_mat.transpose() + &resid_mean * resid_mean.transpose();
    let psi_err =
        (&state.psi.dense().expect("dense psi") - &psi_oracle).amax() / psi_oracle.amax();
    assert!(psi_err <= 1e-8, "discrepancy moment drift {psi_err:.3e}");

    // The collapsed sampling target, read with the same Gaussian prior, is
    // quadratic; its mode must sit at the marginal posterior mean.
    let target = CollapsedTarget::new(
        &problem.prior,
        problem.b.clone(),
        problem.incidence.clone(),
        make_system(),
        problem.z.clone(),
        None,
    )
    .expect("collapsed target");
    let out = optim::maximize(
        |y| target.log_density_and_grad_gaussian(y).expect("gaussian target"),
        DVector::from_element(p, 0.5),
        &LbfgsOptions {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-11,
        },
        |_, _, _| false,
    )
    .expect("mode search");
    let collapsed_err = (&out.x - &mean_f).amax() / mean_f.amax().max(1.0);
    assert!(collapsed_err <= 1e-6, "collapsed mode drift {collapsed_err:.3e}");

    println!(
        "criterion 3 (gaussian reduction): PASS — mean {mode_err:.2e}, \
         covariance {cov_err:.2e}, psi {psi_err:.2e}, collapsed mode {collapsed_err:.2e}"
    );
}

struct Arm {
    inputs: EstimationInputs,
    em: EmOutcome,
    chain: PosteriorChain,
}

struct ArmScores {
    s1f: f64,
    s2f: f64,
    s1m: f64,
}

fn run_arm(study: &SimulatedStudy, range: f64, seed: u64, delta: Option<(f64, f64)>) -> Arm {
    let inputs = study
        .estimation_inputs_with_range(range)
        .expect("trimmed estimation inputs");
    let problem = inputs
        .em_problem(PriorKind::Lognormal)
        .expect("estimation problem");
    let em = run_em(&problem, study.setup.theta0, &EmConfig::default()).expect("EM run");
    let target = inputs.collapsed_target(em.params).expect("collapsed target");
    let delta_range = match delta {
        Some(fixed) => fixed,
        None => pilot_tune_delta(
            |x| target.log_density_and_grad_x(x),
            &em.state.mode_flux.map(f64::ln),
            &MassSpec::Identity,
            10,
            0.05,
            200,
            seed,
        )
        .expect("pilot step tuning"),
    };
    let config = HmcConfig {
        n_leapfrog: 10,
        delta_range,
        n_samples: 10_000,
        n_burnin: 1_000,
        mass: MassSpec::Identity,
        seed,
    };
    let chain =
        sample_posterior(&target, &config, &em.state.mode_flux, true).expect("posterior chain");
    Arm { inputs, em, chain }
}

fn arm_scores(study: &SimulatedStudy, arm: &Arm) -> ArmScores {
    let truth = study.flux_truth_at(&arm.inputs.kept_cells);
    let mean = column_means(&arm.chain.flux_samples);
    let var = column_variances(&arm.chain.flux_samples);
    let s1f = s1_rmse(&truth, &mean).expect("flux S1");
    let s2f = s2_flux(&truth, &mean, &var).expect("flux S2");
    let q = arm.inputs.mole_sites.len();
    let site = study.setup.prediction_site_indices()[0];
    let draws = arm.chain.mole_site_draws(q, site).expect("site draws");
    let pred = column_means(&draws);
    let s1m = s1_rmse(&study.mole_series(site), &pred).expect("mole S1");
    ArmScores { s1f, s2f, s1m }
}

struct Fixture {
    study: SimulatedStudy,
    spatial: Arm,
    flat: Arm,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let setup = StudySetup::reference().expect("reference setup");
        let study = simulate_study(&setup, REFERENCE_SEED).expect("reference dataset");
        let spatial = run_arm(&study, setup.variogram.range, REFERENCE_SEED, Some(PINNED_DELTA));
        let flat = run_arm(&study, 0.0, REFERENCE_SEED, Some(PINNED_DELTA));
        Fixture {
            study,
            spatial,
            flat,
        }
    })
}

#[test]
fn criterion_4_reference_study_reproduction() {
    let fx = fixture();
    let theta = fx.spatial.em.params;
    assert!(fx.spatial.em.converged, "EM did not converge");
    assert!(
        (1500.0..=3000.0).contains(&theta.sigma2),
        "sigma2 {:.1} outside [1500, 3000]",
        theta.sigma2
    );
    assert!((0.6..=0.9).contains(&theta.a), "a {:.3} outside [0.6, 0.9]", theta.a);
    assert!((0.5..=1.3).contains(&theta.d), "d {:.3} outside [0.5, 1.3]", theta.d);

    let acc = fx.spatial.chain.acceptance_rate;
    assert!(
        (0.45..=0.70).contains(&acc),
        "acceptance {:.1}% outside [45%, 70%]",
        100.0 * acc
    );

    let s = arm_scores(&fx.study, &fx.spatial);
    let f = arm_scores(&fx.study, &fx.flat);
    assert!(s.s1f < f.s1f, "flux S1 {:.2} not below {:.2}", s.s1f, f.s1f);
    assert!(
        (s.s2f - 1.0).abs() < (f.s2f - 1.0).abs(),
        "flux S2 {:.3} not closer to 1 than {:.3}",
        s.s2f,
        f.s2f
    );
    let drift = (s.s1m - f.s1m).abs() / s.s1m;
    assert!(drift < 0.15, "prediction S1 drift {:.1}%", 100.0 * drift);

    println!(
        "criterion 4 (reference study): PASS — theta ({:.0}, {:.2}, {:.2}), \
         acceptance {:.0}%, S1f {:.1} < {:.1}, S2f {:.3} vs {:.3}, S1m drift {:.0}%",
        theta.sigma2,
        theta.a,
        theta.d,
        100.0 * acc,
        s.s1f,
        f.s1f,
        s.s2f,
        f.s2f,
        100.0 * drift
    );
}

#[test]
fn criterion_4d_ordering_replicates_on_fresh_seeds() {
    let setup = StudySetup::reference().expect("reference setup");
    let mut holds = 0usize;
    for seed in REFERENCE_SEED + 1..=REFERENCE_SEED + 10 {
        let study = simulate_study(&setup, seed).expect("fresh dataset");
        let spatial = run_arm(&study, setup.variogram.range, seed, None);
        let flat = run_arm(&study, 0.0, seed, None);
        let s = arm_scores(&study, &spatial);
        let f = arm_scores(&study, &flat);
        let ok = s.s1f < f.s1f
            && (s.s2f - 1.0).abs() < (f.s2f - 1.0).abs()
            && (s.s1m - f.s1m).abs() / s.s1m < 0.15;
        if ok {
            holds += 1;
        }
    }
    assert!(holds >= 8, "ordering held in only {holds}/10 fresh seeds");
    println!("criterion 4d (fresh-seed replication): PASS — ordering held in {holds}/10 seeds");
}

#[test]
fn criterion_5_dense_data_variant() {
    let start = Instant::now();
    let setup = StudySetup::dense_variant(1000, REFERENCE_SEED).expect("dense setup");
    let study = simulate_study(&setup, REFERENCE_SEED).expect("dense dataset");
    assert_eq!(study.observations.len(), 100_000);
    let inputs = study.estimation_inputs().expect("estimation inputs");
    let problem = inputs
        .em_problem(PriorKind::Lognormal)
        .expect("estimation problem");
    let em = run_em(&problem, setup.theta0, &EmConfig::default()).expect("EM run");
    assert!(em.converged, "EM did not converge in {} iterations", em.iterations);
    assert!(em.iterations <= 10, "EM took {} iterations", em.iterations);
    let theta = em.params;
    assert!(
        (2000.0..=3000.0).contains(&theta.sigma2),
        "sigma2 {:.1} outside [2000, 3000]",
        theta.sigma2
    );
    assert!((0.75..=0.85).contains(&theta.a), "a {:.3} outside [0.75, 0.85]", theta.a);
    assert!((0.8..=1.1).contains(&theta.d), "d {:.3} outside [0.8, 1.1]", theta.d);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 7200.0, "dense variant took {secs:.0}s");
    println!(
        "criterion 5 (dense variant): PASS — {} observations, EM converged in {} \
         iterations, theta ({:.0}, {:.3}, {:.3}); {secs:.0}s on one core",
        study.observations.len(),
        em.iterations,
        theta.sigma2,
        theta.a,
        theta.d
    );
}

#[test]
fn criterion_6_lognormal_moment_oracle() {
    // Closed-form natural moments against Monte Carlo on a five-cell grid.
    let grid = SpatialGrid::regular_1d(0.0, 0.7, 5, 0.7).expect("grid");
    let vario =
        VariogramParams::new(VariogramModel::Spherical, 0.02, 0.5, 1.6).expect("variogram");
    let prior = LognormalFluxPrior::from_variogram(grid, &vario, 0.4).expect("prior");
    let (mean, cov) = prior.natural_moments().expect("moments");
    let n = 1_000_000usize;
    let mut rng = stream_rng(103, "acceptance-moments");
    let draws = prior.sample(n, &mut rng).expect("draws");
    let batches = 20;
    let per = n / batches;
    let batch_z = |stat: &dyn Fn(usize) -> f64, truth: f64| -> f64 {
        let mut ms = Vec::with_capacity(batches);
        for b in 0..batches {
            let acc: f64 = (b * per..(b + 1) * per).map(stat).sum();
            ms.push(acc / per as f64);
        }
        let m = ms.iter().sum::<f64>() / batches as f64;
        let v = ms.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (batches as f64 - 1.0);
        let se = (v / batches as f64).sqrt().max(1e-12);
        (m - truth).abs() / se
    };
    let mut worst_z = 0.0f64;
    for i in 0..5 {
        worst_z = worst_z.max(batch_z(&|r| draws[(r, i)], mean[i]));
    }
    for i in 0..5 {
        for j in i..5 {
            let second = cov[(i, j)] + mean[i] * mean[j];
            worst_z = worst_z.max(batch_z(&|r| draws[(r, i)] * draws[(r, j)], second));
        }
    }
    assert!(worst_z <= 3.0, "monte carlo z-score {worst_z:.2}");

    // Reparameterization identity, bitwise: with exactly representable cell
    // areas both stacking conventions give the same observed field.
    let flux_grid =
        SpatialGrid::from_coords_1d(&[0.0, 0.5, 1.0, 1.5, 2.0], 0.5).expect("flux grid");
    let mut srr_rng = stream_rng(104, "acceptance-srr");
    let (srr, _) = synthesize_plume_srr(
        &[0.1, 0.9, 1.7],
        &flux_grid,
        4,
        PlumeGpParams::default(),
        &mut srr_rng,
    )
    .expect("srr");
    let b_density = assemble_stacked(&srr, &flux_grid, FluxMode::Density).expect("density matrix");
    let b_total = assemble_stacked(&srr, &flux_grid, FluxMode::TotalPerCell).expect("total matrix");
    let y = DVector::from_fn(5, |i, _| 0.5 + 0.25 * i as f64);
    let areas = flux_grid.areas();
    let y_tot = DVector::from_fn(5, |i, _| areas[i] * y[i]);
    assert_eq!(&b_density * &y, &b_total * &y_tot, "area reparameterization not exact");

    // For arbitrary areas the two matrices agree entry for entry once the
    // areas are folded in.
    let ref_grid = SpatialGrid::regular_1d(-0.9, 0.2, 10, 0.2).expect("reference grid");
    let mut srr_rng2 = stream_rng(105, "acceptance-srr");
    let (srr2, _) = synthesize_plume_srr(
        &[-0.5, 0.3],
        &ref_grid,
        3,
        PlumeGpParams::default(),
        &mut srr_rng2,
    )
    .expect("srr");
    let bd = assemble_stacked(&srr2, &ref_grid, FluxMode::Density).expect("density matrix");
    let mut bt = assemble_stacked(&srr2, &ref_grid, FluxMode::TotalPerCell).expect("total matrix");
    let ref_areas = ref_grid.areas();
    for c in 0..bt.ncols() {
        for r in 0..bt.nrows() {
            bt[(r, c)] *= ref_areas[c];
        }
    }
    assert_eq!(bd, bt, "area folding not exact");

    println!(
        "criterion 6 (lognormal moments): PASS — worst z-score {worst_z:.2} over 20 \
         statistics at 1e6 draws; reparameterization bitwise exact"
    );
}

#[test]
fn criterion_7_variogram_self_consistency() {
    let truth =
        VariogramParams::new(VariogramModel::Spherical, 0.0053, 0.80, 3.3).expect("params");
    let bins: Vec<VariogramBin> = (1..=25)
        .map(|k| {
            let lag = 0.3 * k as f64;
            VariogramBin {
                lag,
                semivariance: truth.semivariance(lag),
                pair_count: 40,
            }
        })
        .collect();
    let emp = EmpiricalVariogram {
        bins,
        dropped_bins: 0,
        max_lag: 7.5,
    };
    let fit = fit_variogram(&emp, VariogramModel::Spherical).expect("fit");
    let rels = [
        (fit.params.nugget - truth.nugget).abs() / truth.nugget,
        (fit.params.partial_sill - truth.partial_sill).abs() / truth.partial_sill,
        (fit.params.range - truth.range).abs() / truth.range,
    ];
    let worst_rel = rels.iter().copied().fold(0.0, f64::max);
    assert!(worst_rel <= 1e-4, "noiseless refit drift {worst_rel:.2e}");

    let mut rng = stream_rng(106, "acceptance-psd");
    let mut worst_eig = 0.0f64;
    for _ in 0..20 {
        let m = 5 + (rng.gen::<u64>() % 28) as usize;
        let coords: Vec<Vec<f64>> = (0..m)
            .map(|_| vec![10.0 * rng.gen::<f64>(), 10.0 * rng.gen::<f64>()])
            .collect();
        let gram = fit.params.gram(&coords);
        let min_eig = gram.symmetric_eigen().eigenvalues.min();
        worst_eig = worst_eig.min(min_eig / fit.params.sill());
    }
    assert!(
        worst_eig >= -1e-8,
        "relative minimum eigenvalue {worst_eig:.2e}"
    );
    println!(
        "criterion 7 (variogram self-consistency): PASS — refit drift {worst_rel:.2e}, \
         min relative eigenvalue {worst_eig:.2e} over 20 site sets"
    );
}

#[test]
fn criterion_8_predictive_coverage() {
    let fx = fixture();
    let q = fx.spatial.inputs.mole_sites.len();
    let site = fx.study.setup.prediction_site_indices()[0];
    let draws = fx.spatial.chain.mole_site_draws(q, site).expect("site draws");
    let mut noise_rng = stream_rng(REFERENCE_SEED, "holdout-noise");
    let bands = predictive_quantiles(
        &draws,
        fx.spatial.inputs.sigma2_eps,
        &[0.05, 0.95],
        &mut noise_rng,
    )
    .expect("predictive bands");
    let mut holdout_rng = stream_rng(REFERENCE_SEED, "holdout");
    let holdout = fx.study.holdout_observations(site, &mut holdout_rng);
    let n = holdout.len();
    let hits = (0..n)
        .filter(|&t| holdout[t] >= bands[(t, 0)] && holdout[t] <= bands[(t, 1)])
        .count();
    let coverage = hits as f64 / n as f64;
    assert!(
        (coverage - 0.90).abs() <= 0.05,
        "coverage {:.0}% outside 90% +/- 5pp",
        100.0 * coverage
    );
    println!(
        "criterion 8 (predictive coverage): PASS — {:.0}% of {n} held-out observations \
         inside the 90% band",
        100.0 * coverage
    );
}
