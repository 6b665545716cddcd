//! Prediction-quality statistics and posterior summaries.
//!
//! S1 is the root-average-squared error of the posterior mean against the
//! simulation truth; S2 rescales that error by the average posterior
//! variance, so a well-calibrated posterior scores near one. Regional
//! totals are per-sample masked sums converted from g/s to Tg/yr.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fileio;

/// 1 g/s sustained over a 365-day year, in Tg.
pub const GRAMS_PER_SECOND_TO_TG_PER_YEAR: f64 = 3.1536e-5;

fn check_len(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// Root-average-squared error between a truth vector and a prediction.
pub fn s1_rmse(truth: &DVector<f64>, prediction: &DVector<f64>) -> Result<f64> {
    check_len(truth.len(), prediction.len(), "score vectors")?;
    if truth.is_empty() {
        return Err(Error::EmptyDomain("scoring over zero cells".into()));
    }
    let sse = (truth - prediction).norm_squared();
    Ok((sse / truth.len() as f64).sqrt())
}

/// Distributional accuracy: squared errors summed against posterior
/// variances. Near one when the posterior spread matches the actual errors.
pub fn s2_flux(
    truth: &DVector<f64>,
    prediction: &DVector<f64>,
    variance: &DVector<f64>,
) -> Result<f64> {
    check_len(truth.len(), prediction.len(), "score vectors")?;
    check_len(truth.len(), variance.len(), "score variances")?;
    let var_sum = variance.sum();
    if !(var_sum > 0.0) || variance.iter().any(|v| *v < 0.0) {
        return Err(Error::ZeroVariance);
    }
    let sse = (truth - prediction).norm_squared();
    Ok((sse / var_sum).sqrt())
}

/// Posterior mean and standard deviation of the masked total across
/// samples, after unit conversion. Rows of `flux_samples` are draws.
pub fn regional_total(
    flux_samples: &DMatrix<f64>,
    mask: &[bool],
    unit_conversion: f64,
) -> Result<(f64, f64)> {
    if mask.len() != flux_samples.ncols() {
        return Err(Error::MaskMismatch {
            expected: flux_samples.ncols(),
            got: mask.len(),
        });
    }
    let n = flux_samples.nrows();
    if n == 0 {
        return Err(Error::EmptyDomain("no posterior samples".into()));
    }
    let totals: Vec<f64> = (0..n)
        .map(|s| {
            let mut acc = 0.0;
            for (j, &keep) in mask.iter().enumerate() {
                if keep {
                    acc += flux_samples[(s, j)];
                }
            }
            acc * unit_conversion
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// Linear-interpolation quantile (the convention statistical software
/// labels type 7). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Quantiles of each column of a sample matrix; rows of the result follow
/// the columns, one output column per requested probability.
pub fn column_quantiles(samples: &DMatrix<f64>, probs: &[f64]) -> Result<DMatrix<f64>> {
    if samples.nrows() == 0 {
        return Err(Error::EmptyDomain("no samples to summarize".into()));
    }
    let mut out = DMatrix::zeros(samples.ncols(), probs.len());
    let mut buf = vec![0.0; samples.nrows()];
    for j in 0..samples.ncols() {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = samples[(i, j)];
        }
        buf.sort_by(|a, b| a.total_cmp(b));
        for (k, &p) in probs.iter().enumerate() {
            out[(j, k)] = quantile_type7(&buf, p);
        }
    }
    Ok(out)
}

/// Predictive observation quantiles per column: each posterior draw is
/// perturbed with fresh measurement noise before summarizing, so the bands
/// cover new observations rather than the latent field.
pub fn predictive_quantiles(
    samples: &DMatrix<f64>,
    sigma2_eps: f64,
    probs: &[f64],
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    if !(sigma2_eps >= 0.0) {
        return Err(Error::DomainError(
            "measurement-error variance must be nonnegative".into(),
        ));
    }
    let sd = sigma2_eps.sqrt();
    let noisy = samples.map(|v| v + sd * rng.sample::<f64, _>(StandardNormal));
    column_quantiles(&noisy, probs)
}

pub fn column_means(samples: &DMatrix<f64>) -> DVector<f64> {
    let n = samples.nrows().max(1) as f64;
    DVector::from_fn(samples.ncols(), |j, _| samples.column(j).sum() / n)
}

pub fn column_variances(samples: &DMatrix<f64>) -> DVector<f64> {
    let n = samples.nrows();
    let means = column_means(samples);
    DVector::from_fn(samples.ncols(), |j, _| {
        if n < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            acc += (samples[(i, j)] - means[j]).powi(2);
        }
        acc / (n as f64 - 1.0)
    })
}

/// Bundle of the statistics reported for one study run.
#[derive(Debug, Clone, Default)]
pub struct ScoreReport {
    pub s1_flux: f64,
    pub s2_flux: f64,
    pub s1_mole_by_site: BTreeMap<String, f64>,
    pub regional_totals: BTreeMap<String, (f64, f64)>,
}

impl ScoreReport {
    pub fn write_csv(&self, path: &Path, meta: Option<&str>) -> Result<()> {
        let mut rows = vec![
            vec!["s1_flux".to_string(), String::new(), fileio::fmt_f64(self.s1_flux)],
            vec!["s2_flux".to_string(), String::new(), fileio::fmt_f64(self.s2_flux)],
        ];
        for (site, v) in &self.s1_mole_by_site {
            rows.push(vec!["s1_mole".to_string(), site.clone(), fileio::fmt_f64(*v)]);
        }
        for (region, (mean, std)) in &self.regional_totals {
            rows.push(vec![
                "regional_total_mean".to_string(),
                region.clone(),
                fileio::fmt_f64(*mean),
            ]);
            rows.push(vec![
                "regional_total_std".to_string(),
                region.clone(),
                fileio::fmt_f64(*std),
            ]);
        }
        fileio::write_table(path, meta, &["metric", "key", "value"], &rows)
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "S1 (flux)  {:.4}", self.s1_flux)?;
        writeln!(f, "S2 (flux)  {:.4}", self.s2_flux)?;
        for (site, v) in &self.s1_mole_by_site {
            writeln!(f, "S1 (mole)  site {site}  {v:.4}")?;
        }
        for (region, (mean, std)) in &self.regional_totals {
            writeln!(f, "total      {region}  {mean:.4} +/- {std:.4} Tg/yr")?;
        }
        Ok(())
    }
}
