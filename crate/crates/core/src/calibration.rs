//! Calibration of the lognormal flux prior from a gridded inventory.
//!
//! The inventory totals are converted to log flux densities, an empirical
//! semivariogram is formed, and a parametric model (spherical, exponential or
//! Gaussian) is fitted by weighted least squares with weights
//! `N_h / gamma(h)^2`. The fitted model induces the prior covariance on the
//! log scale through `cov(h) = sill - gamma(h)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fileio;
use crate::linalg;
use crate::optim::{self, LbfgsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariogramModel {
    Spherical,
    Exponential,
    Gaussian,
}

impl VariogramModel {
    pub const ALL: [VariogramModel; 3] = [
        VariogramModel::Spherical,
        VariogramModel::Exponential,
        VariogramModel::Gaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariogramModel::Spherical => "spherical",
            VariogramModel::Exponential => "exponential",
            VariogramModel::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spherical" => Ok(VariogramModel::Spherical),
            "exponential" => Ok(VariogramModel::Exponential),
            "gaussian" => Ok(VariogramModel::Gaussian),
            other => Err(Error::InvalidParams(format!(
                "unknown variogram model {other:?}"
            ))),
        }
    }
}

/// Nugget, partial sill and range of a semivariogram model. The nugget and
/// partial sill are variances on the log-flux scale; the range shares units
/// with the grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramParams {
    pub model: VariogramModel,
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
}

impl VariogramParams {
    pub fn new(model: VariogramModel, nugget: f64, partial_sill: f64, range: f64) -> Result<Self> {
        let p = VariogramParams {
            model,
            nugget,
            partial_sill,
            range,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.nugget >= 0.0
            && self.partial_sill >= 0.0
            && self.range >= 0.0
            && self.nugget.is_finite()
            && self.partial_sill.is_finite()
            && self.range.is_finite()
            && self.sill() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("variogram {self:?}")))
        }
    }

    pub fn sill(&self) -> f64 {
        self.nugget + self.partial_sill
    }

    /// Semivariance at separation `h`; exactly zero at the origin, jumping to
    /// the nugget for any positive separation.
    pub fn semivariance(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        let structured = if self.range > 0.0 {
            let r = h / self.range;
            match self.model {
                VariogramModel::Spherical => {
                    if r < 1.0 {
                        1.5 * r - 0.5 * r * r * r
                    } else {
                        1.0
                    }
                }
                VariogramModel::Exponential => 1.0 - (-r).exp(),
                VariogramModel::Gaussian => 1.0 - (-r * r).exp(),
            }
        } else {
            1.0
        };
        self.nugget + self.partial_sill * structured
    }

    /// Log-scale covariance at separation `h`: `sill - semivariance(h)`.
    /// At `h = 0` this is the full sill, nugget included.
    pub fn covariance(&self, h: f64) -> f64 {
        self.sill() - self.semivariance(h)
    }

    /// Covariance matrix over a set of locations.
    pub fn gram(&self, coords: &[Vec<f64>]) -> DMatrix<f64> {
        let n = coords.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = self.sill();
            for j in (i + 1)..n {
                let c = self.covariance(crate::domains::dist(&coords[i], &coords[j]));
                out[(i, j)] = c;
                out[(j, i)] = c;
            }
        }
        out
    }
}

/// One cell of a flux inventory.
#[derive(Debug, Clone)]
pub struct InventoryCell {
    pub id: u64,
    pub coord: Vec<f64>,
    pub area: f64,
    /// Total flux of the cell in g/s.
    pub total_flux: f64,
}

/// Convert inventory totals to log flux densities `ln(total / area)` and
/// return them with their sample mean, which becomes the constant prior mean
/// on the log scale.
pub fn log_transform_inventory(cells: &[InventoryCell]) -> Result<(DVector<f64>, f64)> {
    if cells.is_empty() {
        return Err(Error::EmptyDomain("inventory is empty".into()));
    }
    let bad: Vec<u64> = cells
        .iter()
        .filter(|c| !(c.total_flux > 0.0) || !(c.area > 0.0))
        .map(|c| c.id)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonpositiveFlux(bad));
    }
    let values = DVector::from_iterator(
        cells.len(),
        cells.iter().map(|c| (c.total_flux / c.area).ln()),
    );
    let mean = values.mean();
    Ok((values, mean))
}

#[derive(Debug, Clone, Copy)]
pub struct VariogramBin {
    /// Mean pair separation within the bin.
    pub lag: f64,
    pub semivariance: f64,
    pub pair_count: usize,
}

#[derive(Debug, Clone)]
pub struct EmpiricalVariogram {
    pub bins: Vec<VariogramBin>,
    /// Bins dropped because no pair fell into them.
    pub dropped_bins: usize,
    pub max_lag: f64,
}

pub const DEFAULT_BINS: usize = 15;

/// Matheron estimator on equal-width lag bins.
///
/// Bins partition `(0, max_lag]`; pairs beyond `max_lag` are ignored. When
/// `max_lag` is `None` it defaults to half the maximum pairwise distance.
/// Each bin reports `sum (v_i - v_j)^2 / (2 N)` over its `N` unordered pairs.
pub fn empirical_semivariogram(
    values: &DVector<f64>,
    coords: &[Vec<f64>],
    n_bins: usize,
    max_lag: Option<f64>,
) -> Result<EmpiricalVariogram> {
    if values.len() != coords.len() {
        return Err(Error::DimensionMismatch {
            context: "semivariogram values vs coordinates",
            expected: coords.len(),
            got: values.len(),
        });
    }
    if values.len() < 2 {
        return Err(Error::EmptyDomain("need at least two sites".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidParams("zero variogram bins".into()));
    }
    let mut h_max_pairwise = 0.0_f64;
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            h_max_pairwise = h_max_pairwise.max(crate::domains::dist(&coords[i], &coords[j]));
        }
    }
    let max_lag = max_lag.unwrap_or(0.5 * h_max_pairwise);
    if !(max_lag > 0.0) {
        return Err(Error::InvalidParams(format!("max lag {max_lag}")));
    }
    let width = max_lag / n_bins as f64;
    let mut sum_sq = vec![0.0; n_bins];
    let mut sum_lag = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            let h = crate::domains::dist(&coords[i], &coords[j]);
            if h <= 0.0 || h > max_lag {
                continue;
            }
            let mut bin = (h / width).ceil() as usize - 1;
            bin = bin.min(n_bins - 1);
            let d = values[i] - values[j];
            sum_sq[bin] += d * d;
            sum_lag[bin] += h;
            count[bin] += 1;
        }
    }
    let mut bins = Vec::new();
    let mut dropped = 0;
    for b in 0..n_bins {
        if count[b] == 0 {
            dropped += 1;
            continue;
        }
        bins.push(VariogramBin {
            lag: sum_lag[b] / count[b] as f64,
            semivariance: sum_sq[b] / (2.0 * count[b] as f64),
            pair_count: count[b],
        });
    }
    if bins.is_empty() {
        return Err(Error::EmptyDomain(
            "no site pairs fall within the lag range".into(),
        ));
    }
    Ok(EmpiricalVariogram {
        bins,
        dropped_bins: dropped,
        max_lag,
    })
}

#[derive(Debug, Clone)]
pub struct VariogramFit {
    pub params: VariogramParams,
    pub weighted_sse: f64,
}

const FIT_STARTS: usize = 8;

/// Weighted least squares with weights `N_h / gamma(h)^2`, minimized by
/// multi-start quasi-Newton over `(sqrt nugget, sqrt partial sill, ln range)`.
pub fn fit_variogram(emp: &EmpiricalVariogram, model: VariogramModel) -> Result<VariogramFit> {
    let sill_guess = {
        let tail = emp.bins.len().div_ceil(3);
        let from = emp.bins.len() - tail;
        emp.bins[from..]
            .iter()
            .map(|b| b.semivariance)
            .sum::<f64>()
            / tail as f64
    };
    let sill_guess = sill_guess.max(1e-12);
    let max_lag = emp.max_lag;

    let objective = |t: &DVector<f64>| -> f64 {
        let params = decode(model, t);
        weighted_sse(emp, &params)
    };

    let mut best: Option<(f64, VariogramParams)> = None;
    for k in 0..FIT_STARTS {
        // Ranges log-spaced across the resolved lags; nugget starts small.
        let frac = (k as f64 + 1.0) / FIT_STARTS as f64;
        let range0 = max_lag * 0.03 * (2.0 / 0.03_f64).powf(frac);
        let t0 = DVector::from_vec(vec![
            (0.1 * sill_guess).sqrt(),
            (0.9 * sill_guess).sqrt(),
            range0.ln(),
        ]);
        let opts = LbfgsOptions {
            memory: 8,
            max_iters: 400,
            grad_tol: 1e-11 * (1.0 + sill_guess),
        };
        let out = optim::maximize(
            |t| {
                let v = objective(t);
                let g = optim::central_diff_grad(&objective, t, 1e-7);
                (-v, -g)
            },
            t0,
            &opts,
            |_, _, _| false,
        );
        if let Ok(out) = out {
            let params = decode(model, &out.x);
            let sse = -out.value;
            if sse.is_finite() && best.as_ref().map_or(true, |(b, _)| sse < *b) {
                best = Some((sse, params));
            }
        }
    }
    match best {
        Some((weighted_sse, params)) => Ok(VariogramFit {
            params,
            weighted_sse,
        }),
        None => Err(Error::FitDiverged),
    }
}

/// Fit all three models and keep the lowest weighted SSE. Also returns the
/// per-model SSE values for reporting.
pub fn fit_best_model(
    emp: &EmpiricalVariogram,
) -> Result<(VariogramFit, Vec<(VariogramModel, f64)>)> {
    let mut best: Option<VariogramFit> = None;
    let mut table = Vec::new();
    for model in VariogramModel::ALL {
        match fit_variogram(emp, model) {
            Ok(fit) => {
                table.push((model, fit.weighted_sse));
                if best
                    .as_ref()
                    .map_or(true, |b| fit.weighted_sse < b.weighted_sse)
                {
                    best = Some(fit);
                }
            }
            Err(Error::FitDiverged) => table.push((model, f64::INFINITY)),
            Err(e) => return Err(e),
        }
    }
    best.map(|fit| (fit, table)).ok_or(Error::FitDiverged)
}

fn decode(model: VariogramModel, t: &DVector<f64>) -> VariogramParams {
    VariogramParams {
        model,
        nugget: t[0] * t[0],
        partial_sill: t[1] * t[1],
        range: t[2].exp(),
    }
}

fn weighted_sse(emp: &EmpiricalVariogram, params: &VariogramParams) -> f64 {
    let mut sse = 0.0;
    for bin in &emp.bins {
        let g = params.semivariance(bin.lag);
        let denom = g.max(1e-12);
        let w = bin.pair_count as f64 / (denom * denom);
        let d = bin.semivariance - g;
        sse += w * d * d;
    }
    sse
}

#[derive(Debug, Clone, Copy)]
pub struct LooDiagnostics {
    pub mean_z: f64,
    pub std_z: f64,
    pub n: usize,
    /// Raised when `|mean_z| > 0.2`, hinting at a biased calibration.
    pub warning: bool,
}

/// Leave-one-out kriging z-scores under the fitted covariance, predicting
/// each site from all others with the sample mean as known mean. Uses the
/// precision-matrix identity: the LOO residual at site `i` is
/// `(Q y)_i / Q_ii` with variance `1 / Q_ii`.
pub fn loo_zscores(
    values: &DVector<f64>,
    coords: &[Vec<f64>],
    params: &VariogramParams,
) -> Result<LooDiagnostics> {
    if values.len() != coords.len() {
        return Err(Error::DimensionMismatch {
            context: "loo values vs coordinates",
            expected: coords.len(),
            got: values.len(),
        });
    }
    let n = values.len();
    if n < 3 {
        return Err(Error::EmptyDomain("need at least three sites".into()));
    }
    let gram = params.gram(coords);
    let precision = linalg::spd_inverse(&gram)?;
    let centered = values.add_scalar(-values.mean());
    let qy = &precision * &centered;
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let qii = precision[(i, i)];
        if qii <= 0.0 {
            return Err(Error::SingularFactor);
        }
        zs.push(qy[i] / qii.sqrt());
    }
    let mean_z = zs.iter().sum::<f64>() / n as f64;
    let var_z = zs.iter().map(|z| (z - mean_z) * (z - mean_z)).sum::<f64>() / (n as f64 - 1.0);
    Ok(LooDiagnostics {
        mean_z,
        std_z: var_z.sqrt(),
        n,
        warning: mean_z.abs() > 0.2,
    })
}

/// Inventory file: `id,coord1[,coord2],area,total_flux_g_per_s`.
pub fn load_inventory_csv(path: &Path) -> Result<Vec<InventoryCell>> {
    let (header, rows) = fileio::read_table(path)?;
    if header.len() < 4 {
        return Err(fileio::format_err(
            path,
            "inventory needs id, coords, area, total_flux_g_per_s",
        ));
    }
    let dim = header.len() - 3;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let id = fileio::parse_u64(path, &row[0], "cell id")?;
        let coord = row[1..1 + dim]
            .iter()
            .map(|f| fileio::parse_f64(path, f, "coordinate"))
            .collect::<Result<Vec<f64>>>()?;
        let area = fileio::parse_f64(path, &row[1 + dim], "area")?;
        let total_flux = fileio::parse_f64(path, &row[2 + dim], "total flux")?;
        out.push(InventoryCell {
            id,
            coord,
            area,
            total_flux,
        });
    }
    Ok(out)
}

pub fn write_inventory_csv(
    path: &Path,
    cells: &[InventoryCell],
    meta: Option<&str>,
) -> Result<()> {
    let dim = cells.first().map_or(1, |c| c.coord.len());
    let mut header = vec!["id".to_string()];
    header.extend((1..=dim).map(|k| format!("coord{k}")));
    header.push("area".to_string());
    header.push("total_flux_g_per_s".to_string());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let mut row = vec![c.id.to_string()];
            row.extend(c.coord.iter().map(|v| fileio::fmt_f64(*v)));
            row.push(fileio::fmt_f64(c.area));
            row.push(fileio::fmt_f64(c.total_flux));
            row
        })
        .collect();
    fileio::write_table(path, meta, &header, &rows)
}
