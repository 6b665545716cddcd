//! Scratch harness for picking the reference fixture seed. Not shipped.
//!
//! Usage:
//!   seed_scan trim <lo> <hi>       trim geometry scan
//!   seed_scan em <seed>            EM under the spatial prior
//!   seed_scan full <seed>          EM + HMC + scores, both priors
//!   seed_scan replicate <seeds..>  ordering check over fresh seeds

use std::env;
use std::time::Instant;

use nalgebra::DVector;
use traceinv_core::laplace_em::PriorKind;
use traceinv_core::rng::stream_rng;
use traceinv_core::scoring::{column_means, column_variances, quantile_type7};
use traceinv_core::*;

fn trim_scan(lo: u64, hi: u64) {
    let setup = StudySetup::reference().unwrap();
    let mut candidates = Vec::new();
    for seed in lo..=hi {
        let study = simulate_study(&setup, seed).unwrap();
        match study.estimation_inputs() {
            Ok(inputs) => {
                let coords: Vec<f64> = inputs
                    .kept_cells
                    .iter()
                    .map(|&u| setup.flux_grid.cell(u).centroid[0])
                    .collect();
                let max = coords.iter().cloned().fold(f64::MIN, f64::max);
                let min = coords.iter().cloned().fold(f64::MAX, f64::min);
                let contiguous = inputs.kept_cells.windows(2).all(|w| w[1] == w[0] + 1);
                let ok = max <= 4.35 && max >= 3.25 && min <= -9.85 && contiguous;
                if ok {
                    candidates.push(seed);
                }
                println!(
                    "seed {seed:>4}: kept {:>3} cells in [{min:>5.1}, {max:>4.1}] contiguous={contiguous} {}",
                    coords.len(),
                    if ok { "CANDIDATE" } else { "" }
                );
            }
            Err(e) => println!("seed {seed:>4}: trim failed: {e}"),
        }
    }
    println!("\ncandidates: {candidates:?}");
}

struct PipelineResult {
    params: DiscrepancyParams,
    em_iters: usize,
    em_converged: bool,
    acceptance: f64,
    divergences: usize,
    s1f: f64,
    s2f: f64,
    s1m_pred: f64,
    coverage: f64,
}

fn run_pipeline(
    study: &SimulatedStudy,
    range: f64,
    seed: u64,
    delta: Option<(f64, f64)>,
    verbose: bool,
) -> Result<PipelineResult> {
    let inputs = study.estimation_inputs_with_range(range)?;
    let problem = inputs.em_problem(PriorKind::Lognormal)?;
    let em_config = EmConfig {
        max_iters: 80,
        ..EmConfig::default()
    };
    let t0 = Instant::now();
    let outcome = run_em(&problem, study.setup.theta0, &em_config)?;
    let em_secs = t0.elapsed().as_secs_f64();
    if verbose {
        println!(
            "  EM(range={range}): {} iters ({:.1}s, converged={}) theta = ({:.1}, {:.4}, {:.4})",
            outcome.iterations,
            em_secs,
            outcome.converged,
            outcome.params.sigma2,
            outcome.params.a,
            outcome.params.d
        );
    }

    let target = inputs.collapsed_target(outcome.params)?;
    let delta_range = match delta {
        Some(range) => range,
        None => pilot_tune_delta(
            |x| target.log_density_and_grad_x(x),
            &outcome.state.mode_flux.map(|v| v.ln()),
            &MassSpec::Identity,
            10,
            0.05,
            200,
            seed,
        )?,
    };
    let config = HmcConfig {
        n_leapfrog: 10,
        delta_range,
        n_samples: 10_000,
        n_burnin: 1_000,
        mass: MassSpec::Identity,
        seed,
    };
    let t1 = Instant::now();
    let chain = sample_posterior(&target, &config, &outcome.state.mode_flux, true)?;
    let hmc_secs = t1.elapsed().as_secs_f64();
    if verbose {
        println!(
            "  HMC(range={range}): acceptance {:.1}% divergences {} ({:.1}s)",
            100.0 * chain.acceptance_rate,
            chain.divergences,
            hmc_secs
        );
    }

    let truth_f = study.flux_truth_at(&inputs.kept_cells);
    let pred_f = column_means(&chain.flux_samples);
    let var_f = column_variances(&chain.flux_samples);
    let s1f = s1_rmse(&truth_f, &pred_f)?;
    let s2f = s2_flux(&truth_f, &pred_f, &var_f)?;

    let q = inputs.mole_sites.len();
    let pred_site = study.setup.prediction_site_indices()[0];
    let n_steps = inputs.n_steps;
    let site_draws = chain.mole_site_draws(q, pred_site)?;
    let pred_series = column_means(&site_draws);
    let mut noise_rng = stream_rng(seed, "holdout-noise");
    let bands = predictive_quantiles(&site_draws, inputs.sigma2_eps, &[0.05, 0.95], &mut noise_rng)?;
    let mut holdout_rng = stream_rng(seed, "holdout");
    let holdout = study.holdout_observations(pred_site, &mut holdout_rng);
    let coverage_hits = (0..n_steps)
        .filter(|&t| holdout[t] >= bands[(t, 0)] && holdout[t] <= bands[(t, 1)])
        .count();
    let truth_m = study.mole_series(pred_site);
    let s1m_pred = s1_rmse(&truth_m, &pred_series)?;
    let coverage = coverage_hits as f64 / n_steps as f64;

    Ok(PipelineResult {
        params: outcome.params,
        em_iters: outcome.iterations,
        em_converged: outcome.converged,
        acceptance: chain.acceptance_rate,
        divergences: chain.divergences,
        s1f,
        s2f,
        s1m_pred,
        coverage,
    })
}

fn rand_distr_sample(rng: &mut impl rand::Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn lambda_max(seed: u64) -> Result<(f64, DiscrepancyParams, f64)> {
    use nalgebra::DMatrix;
    let setup = StudySetup::reference()?;
    let study = simulate_study(&setup, seed)?;
    let inputs = study.estimation_inputs()?;
    let problem = inputs.em_problem(PriorKind::Lognormal)?;
    let outcome = run_em(
        &problem,
        setup.theta0,
        &EmConfig {
            max_iters: 80,
            ..EmConfig::default()
        },
    )?;
    let system = inputs.mole_system(outcome.params)?;
    let target = CollapsedTarget::new(
        &inputs.prior,
        inputs.b.clone(),
        inputs.incidence.clone(),
        system,
        inputs.z.clone(),
        None,
    )?;
    let x_hat = outcome.state.mode_flux.map(|v| v.ln());
    let p = x_hat.len();
    let h = 1e-5;
    let mut neg_h = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut xp = x_hat.clone();
        let mut xm = x_hat.clone();
        xp[j] += h;
        xm[j] -= h;
        let (_, gp) = target.log_density_and_grad_x(&xp)?;
        let (_, gm) = target.log_density_and_grad_x(&xm)?;
        for i in 0..p {
            neg_h[(i, j)] = -(gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let sym = (&neg_h + neg_h.transpose()) * 0.5;
    let lmax = sym.symmetric_eigen().eigenvalues.amax();
    Ok((lmax, outcome.params, outcome.state.mode_flux.max()))
}

fn stiff_scan(seeds: &[u64]) {
    for &seed in seeds {
        match lambda_max(seed) {
            Ok((lmax, params, max_mode)) => {
                let in_band = params.sigma2 >= 1500.0
                    && params.sigma2 <= 3000.0
                    && params.a >= 0.6
                    && params.a <= 0.9
                    && params.d >= 0.5
                    && params.d <= 1.3;
                println!(
                    "seed {seed:>4}: lmax {lmax:>8.1} stable_delta {:.4} max_mode {max_mode:>7.1} theta=({:.0}, {:.3}, {:.3}) bands={in_band}",
                    2.0 / lmax.sqrt(),
                    params.sigma2,
                    params.a,
                    params.d
                );
            }
            Err(e) => println!("seed {seed:>4}: failed: {e}"),
        }
    }
}

fn stiffness(seed: u64) {
    use nalgebra::DMatrix;
    let setup = StudySetup::reference().unwrap();
    let study = simulate_study(&setup, seed).unwrap();
    let inputs = study.estimation_inputs().unwrap();
    let problem = inputs.em_problem(PriorKind::Lognormal).unwrap();
    let outcome = run_em(
        &problem,
        setup.theta0,
        &EmConfig {
            max_iters: 80,
            ..EmConfig::default()
        },
    )
    .unwrap();
    println!(
        "theta=({:.1}, {:.4}, {:.4})  z in [{:.1}, {:.1}]  mode flux in [{:.1}, {:.1}]",
        outcome.params.sigma2,
        outcome.params.a,
        outcome.params.d,
        inputs.z.min(),
        inputs.z.max(),
        outcome.state.mode_flux.min(),
        outcome.state.mode_flux.max()
    );
    let system = inputs.mole_system(outcome.params).unwrap();
    let target = CollapsedTarget::new(
        &inputs.prior,
        inputs.b.clone(),
        inputs.incidence.clone(),
        system,
        inputs.z.clone(),
        None,
    )
    .unwrap();
    let x_hat = outcome.state.mode_flux.map(|v| v.ln());
    let p = x_hat.len();
    let h = 1e-5;
    let mut neg_h = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut xp = x_hat.clone();
        let mut xm = x_hat.clone();
        xp[j] += h;
        xm[j] -= h;
        let (_, gp) = target.log_density_and_grad_x(&xp).unwrap();
        let (_, gm) = target.log_density_and_grad_x(&xm).unwrap();
        for i in 0..p {
            neg_h[(i, j)] = -(gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let sym = (&neg_h + neg_h.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let lmin = eig.eigenvalues.min();
    println!(
        "identity mass: lambda in [{lmin:.3e}, {lmax:.3e}], stable delta {:.4}",
        2.0 / lmax.sqrt()
    );
    let precond = |mass: &DVector<f64>, label: &str| {
        let mut m = sym.clone();
        for i in 0..p {
            for j in 0..p {
                m[(i, j)] /= (mass[i] * mass[j]).sqrt();
            }
        }
        let ev = m.symmetric_eigen().eigenvalues;
        let lm = ev.amax();
        println!(
            "{label}: lambda in [{:.3e}, {:.3e}], stable delta {:.4}",
            ev.min(),
            lm,
            2.0 / lm.sqrt()
        );
    };
    let curv_diag = DVector::from_fn(p, |i, _| sym[(i, i)]);
    precond(&curv_diag, "diag(-H_x) mass");
    let laplace_mass = DVector::from_fn(p, |i, _| {
        let y = outcome.state.mode_flux[i];
        y * y / outcome.state.cov_ff[(i, i)]
    });
    precond(&laplace_mass, "y^2/cov_ff mass");
    let y_mass = DVector::from_fn(p, |i, _| {
        let y = outcome.state.mode_flux[i];
        y * y
    });
    precond(&y_mass, "y^2 mass");
}

fn em_only(seed: u64) {
    let setup = StudySetup::reference().unwrap();
    let study = simulate_study(&setup, seed).unwrap();
    let inputs = study.estimation_inputs().unwrap();
    let problem = inputs.em_problem(PriorKind::Lognormal).unwrap();
    let t0 = Instant::now();
    let outcome = run_em(
        &problem,
        setup.theta0,
        &EmConfig {
            max_iters: 80,
            ..EmConfig::default()
        },
    )
    .unwrap();
    println!(
        "seed {seed}: EM {} iters in {:.1}s converged={} theta=({:.1}, {:.4}, {:.4})",
        outcome.iterations,
        t0.elapsed().as_secs_f64(),
        outcome.converged,
        outcome.params.sigma2,
        outcome.params.a,
        outcome.params.d
    );
    for row in &outcome.trace.rows {
        println!(
            "  iter {:>2}: q={:>10.2} theta=({:>7.1}, {:.4}, {:.4}) grad={:.2e} {:.2}s",
            row.iter, row.q_value, row.params.sigma2, row.params.a, row.params.d,
            row.grad_norm, row.seconds
        );
    }
}

fn full(seed: u64) -> bool {
    let setup = StudySetup::reference().unwrap();
    let study = simulate_study(&setup, seed).unwrap();
    println!("seed {seed}:");
    let spatial = match run_pipeline(&study, setup.variogram.range, seed, Some((0.066, 0.068)), true) {
        Ok(r) => r,
        Err(e) => {
            println!("  spatial pipeline failed: {e}");
            return false;
        }
    };
    let flat = match run_pipeline(&study, 0.0, seed, Some((0.066, 0.068)), true) {
        Ok(r) => r,
        Err(e) => {
            println!("  zero-range pipeline failed: {e}");
            return false;
        }
    };
    let bands = spatial.params.sigma2 >= 1500.0
        && spatial.params.sigma2 <= 3000.0
        && spatial.params.a >= 0.6
        && spatial.params.a <= 0.9
        && spatial.params.d >= 0.5
        && spatial.params.d <= 1.3;
    let acc_ok = spatial.acceptance >= 0.45 && spatial.acceptance <= 0.70;
    let ord1 = spatial.s1f < flat.s1f;
    let ord2 = (spatial.s2f - 1.0).abs() < (flat.s2f - 1.0).abs();
    let ord3 = (spatial.s1m_pred - flat.s1m_pred).abs() / spatial.s1m_pred < 0.15;
    let cov_ok = (spatial.coverage - 0.90).abs() <= 0.05;
    println!(
        "  scores: S1f {:.2} vs {:.2} | S2f {:.3} vs {:.3} | S1m {:.2} vs {:.2} | coverage {:.0}%",
        spatial.s1f, flat.s1f, spatial.s2f, flat.s2f, spatial.s1m_pred, flat.s1m_pred,
        100.0 * spatial.coverage
    );
    println!(
        "  checks: bands={bands} acc={acc_ok} ord1={ord1} ord2={ord2} ord3={ord3} coverage={cov_ok} em_conv={} iters={} div={}",
        spatial.em_converged, spatial.em_iters, spatial.divergences
    );
    bands && acc_ok && ord1 && ord2 && ord3 && cov_ok
}

fn replicate(seeds: &[u64]) {
    let setup = StudySetup::reference().unwrap();
    let mut holds = 0usize;
    for &seed in seeds {
        let study = simulate_study(&setup, seed).unwrap();
        let spatial = run_pipeline(&study, setup.variogram.range, seed, None, false);
        let flat = run_pipeline(&study, 0.0, seed, None, false);
        match (spatial, flat) {
            (Ok(s), Ok(f)) => {
                let ord1 = s.s1f < f.s1f;
                let ord2 = (s.s2f - 1.0).abs() < (f.s2f - 1.0).abs();
                let ord3 = (s.s1m_pred - f.s1m_pred).abs() / s.s1m_pred < 0.15;
                let all = ord1 && ord2 && ord3;
                if all {
                    holds += 1;
                }
                println!(
                    "seed {seed:>4}: ord1={ord1} ({:.1} vs {:.1}) ord2={ord2} ({:.3} vs {:.3}) ord3={ord3} ({:.1} vs {:.1}) -> {}",
                    s.s1f, f.s1f, s.s2f, f.s2f, s.s1m_pred, f.s1m_pred,
                    if all { "HOLDS" } else { "fails" }
                );
            }
            (s, f) => {
                println!(
                    "seed {seed:>4}: pipeline error spatial={:?} flat={:?}",
                    s.err().map(|e| e.to_string()),
                    f.err().map(|e| e.to_string())
                );
            }
        }
    }
    println!("\nordering holds in {holds}/{} seeds", seeds.len());
}

fn dense(seed: u64) {
    let setup = StudySetup::dense_variant(1000, seed).unwrap();
    let t0 = Instant::now();
    let study = simulate_study(&setup, seed).unwrap();
    println!("simulate: {:.1}s, {} obs", t0.elapsed().as_secs_f64(), study.observations.len());
    let inputs = study.estimation_inputs().unwrap();
    println!(
        "kept {} cells, stacked dim {}",
        inputs.kept_cells.len(),
        inputs.mole_sites.len() * inputs.n_steps
    );
    let problem = inputs.em_problem(PriorKind::Lognormal).unwrap();
    let t1 = Instant::now();
    let outcome = run_em(&problem, setup.theta0, &EmConfig::default()).unwrap();
    let bands = outcome.params.sigma2 >= 2000.0
        && outcome.params.sigma2 <= 3000.0
        && outcome.params.a >= 0.75
        && outcome.params.a <= 0.85
        && outcome.params.d >= 0.8
        && outcome.params.d <= 1.1;
    println!(
        "seed {seed}: EM {} iters in {:.1}s converged={} theta=({:.1}, {:.4}, {:.4}) bands={bands}",
        outcome.iterations,
        t1.elapsed().as_secs_f64(),
        outcome.converged,
        outcome.params.sigma2,
        outcome.params.a,
        outcome.params.d
    );
    for row in &outcome.trace.rows {
        println!(
            "  iter {:>2}: q={:>12.2} theta=({:>7.1}, {:.4}, {:.4}) grad={:.2e} {:.2}s",
            row.iter, row.q_value, row.params.sigma2, row.params.a, row.params.d,
            row.grad_norm, row.seconds
        );
    }
}

fn main() {
    let args: Vec<String> = env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("trim") => {
            let lo: u64 = args[1].parse().unwrap();
            let hi: u64 = args[2].parse().unwrap();
            trim_scan(lo, hi);
        }
        Some("em") => em_only(args[1].parse().unwrap()),
        Some("stiff") => stiffness(args[1].parse().unwrap()),
        Some("stiffscan") => {
            let seeds: Vec<u64> = args[1..].iter().map(|s| s.parse().unwrap()).collect();
            stiff_scan(&seeds);
        }
        Some("full") => {
            let ok = full(args[1].parse().unwrap());
            println!("overall: {}", if ok { "PASS" } else { "FAIL" });
        }
        Some("replicate") => {
            let seeds: Vec<u64> = args[1..].iter().map(|s| s.parse().unwrap()).collect();
            replicate(&seeds);
        }
        Some("dense") => dense(args[1].parse().unwrap()),
        _ => eprintln!("usage: seed_scan trim <lo> <hi> | em <seed> | full <seed> | replicate <seeds..>"),
    }
}
