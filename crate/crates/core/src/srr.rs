//! Source-receptor relationships.
//!
//! An [`SrrTensor`] holds the sensitivity b_t(s,u) of the mole fraction at
//! site s and time t to flux in cell u. Real tensors come from a dispersion
//! model via the binary or CSV loaders; the 1D simulation study synthesizes
//! a truncated Gaussian plume whose scale field follows a separable
//! space-time Gaussian process.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domains::SpatialGrid;
use crate::error::{Error, Result};
use crate::fileio;
use crate::flux::FluxMode;
use crate::linalg;

const MAGIC: &[u8; 4] = b"SRR1";

/// Time-major stack of sensitivity matrices, one `n_mole x n_flux` slice
/// per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SrrTensor {
    n_steps: usize,
    n_mole: usize,
    n_flux: usize,
    area_weighted: bool,
    values: Vec<f64>,
}

impl SrrTensor {
    pub fn new(
        n_steps: usize,
        n_mole: usize,
        n_flux: usize,
        area_weighted: bool,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expected = n_steps * n_mole * n_flux;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "srr tensor values",
                expected,
                got: values.len(),
            });
        }
        if expected == 0 {
            return Err(Error::EmptyDomain("srr tensor has a zero dimension".into()));
        }
        for v in &values {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidParams(format!(
                    "srr entries must be finite and nonnegative, found {v}"
                )));
            }
        }
        Ok(SrrTensor {
            n_steps,
            n_mole,
            n_flux,
            area_weighted,
            values,
        })
    }

    pub fn constant(
        n_steps: usize,
        n_mole: usize,
        n_flux: usize,
        value: f64,
    ) -> Result<Self> {
        SrrTensor::new(
            n_steps,
            n_mole,
            n_flux,
            false,
            vec![value; n_steps * n_mole * n_flux],
        )
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_mole(&self) -> usize {
        self.n_mole
    }

    pub fn n_flux(&self) -> usize {
        self.n_flux
    }

    pub fn area_weighted(&self) -> bool {
        self.area_weighted
    }

    #[inline]
    fn offset(&self, t: usize, s: usize, u: usize) -> usize {
        (t * self.n_mole + s) * self.n_flux + u
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, u: usize) -> f64 {
        self.values[self.offset(t, s, u)]
    }

    /// Sensitivity matrix for one time step, sites by flux cells.
    pub fn matrix_at(&self, t: usize) -> DMatrix<f64> {
        let start = t * self.n_mole * self.n_flux;
        let slice = &self.values[start..start + self.n_mole * self.n_flux];
        // The slice is row-major (flux index fastest), nalgebra stores
        // column-major, so transpose the raw view.
        DMatrix::from_row_slice(self.n_mole, self.n_flux, slice)
    }

    /// Largest sensitivity any site at any time has to flux cell `u`.
    pub fn max_at_flux_cell(&self, u: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for t in 0..self.n_steps {
            for s in 0..self.n_mole {
                best = best.max(self.get(t, s, u));
            }
        }
        best
    }

    /// Restrict to the given flux cells, preserving their order.
    pub fn select_flux_cells(&self, keep: &[usize]) -> Result<SrrTensor> {
        for &u in keep {
            if u >= self.n_flux {
                return Err(Error::DimensionMismatch {
                    context: "srr flux selection",
                    expected: self.n_flux,
                    got: u,
                });
            }
        }
        let mut values = Vec::with_capacity(self.n_steps * self.n_mole * keep.len());
        for t in 0..self.n_steps {
            for s in 0..self.n_mole {
                for &u in keep {
                    values.push(self.get(t, s, u));
                }
            }
        }
        SrrTensor::new(self.n_steps, self.n_mole, keep.len(), self.area_weighted, values)
    }

    /// Restrict to the given mole-fraction sites, preserving their order.
    pub fn select_mole_sites(&self, keep: &[usize]) -> Result<SrrTensor> {
        for &s in keep {
            if s >= self.n_mole {
                return Err(Error::DimensionMismatch {
                    context: "srr mole-site selection",
                    expected: self.n_mole,
                    got: s,
                });
            }
        }
        let mut values = Vec::with_capacity(self.n_steps * keep.len() * self.n_flux);
        for t in 0..self.n_steps {
            for &s in keep {
                for u in 0..self.n_flux {
                    values.push(self.get(t, s, u));
                }
            }
        }
        SrrTensor::new(self.n_steps, keep.len(), self.n_flux, self.area_weighted, values)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_steps as u64).to_le_bytes())?;
        w.write_all(&(self.n_mole as u64).to_le_bytes())?;
        w.write_all(&(self.n_flux as u64).to_le_bytes())?;
        w.write_all(&[self.area_weighted as u8])?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<SrrTensor> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fileio::format_err(path, "truncated header"))?;
        if &magic != MAGIC {
            return Err(fileio::format_err(path, "bad magic, expected SRR1"));
        }
        let mut u64buf = [0u8; 8];
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            r.read_exact(&mut u64buf)
                .map_err(|_| fileio::format_err(path, "truncated header"))?;
            *d = u64::from_le_bytes(u64buf) as usize;
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)
            .map_err(|_| fileio::format_err(path, "truncated header"))?;
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|x| x.checked_mul(dims[2]))
            .ok_or_else(|| fileio::format_err(path, "dimensions overflow"))?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)
                .map_err(|_| fileio::format_err(path, "truncated payload"))?;
            values.push(f64::from_le_bytes(u64buf));
        }
        SrrTensor::new(dims[0], dims[1], dims[2], flag[0] != 0, values)
    }

    /// CSV interchange with columns `t,s_index,u_index,value`; dimensions
    /// are inferred from the largest indices and absent entries are zero.
    pub fn read_csv(path: &Path, area_weighted: bool) -> Result<SrrTensor> {
        let (header, rows) = fileio::read_table(path)?;
        let expect = ["t", "s_index", "u_index", "value"];
        if header.len() != 4 || !header.iter().map(String::as_str).eq(expect) {
            return Err(fileio::format_err(
                path,
                "expected header t,s_index,u_index,value",
            ));
        }
        if rows.is_empty() {
            return Err(Error::EmptyDomain(format!("{} has no rows", path.display())));
        }
        let mut parsed = Vec::with_capacity(rows.len());
        let mut dims = [0usize; 3];
        for row in rows.iter() {
            let t = fileio::parse_usize(path, &row[0], "t")?;
            let s = fileio::parse_usize(path, &row[1], "s_index")?;
            let u = fileio::parse_usize(path, &row[2], "u_index")?;
            let v = fileio::parse_f64(path, &row[3], "value")?;
            dims[0] = dims[0].max(t + 1);
            dims[1] = dims[1].max(s + 1);
            dims[2] = dims[2].max(u + 1);
            parsed.push((t, s, u, v));
        }
        let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
        for (t, s, u, v) in parsed {
            values[(t * dims[1] + s) * dims[2] + u] = v;
        }
        SrrTensor::new(dims[0], dims[1], dims[2], area_weighted, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut rows = Vec::new();
        for t in 0..self.n_steps {
            for s in 0..self.n_mole {
                for u in 0..self.n_flux {
                    let v = self.get(t, s, u);
                    if v != 0.0 {
                        rows.push(vec![
                            t.to_string(),
                            s.to_string(),
                            u.to_string(),
                            fileio::fmt_f64(v),
                        ]);
                    }
                }
            }
        }
        fileio::write_table(
            path,
            Some(&format!(
                "srr dims t={} s={} u={} area_weighted={}",
                self.n_steps, self.n_mole, self.n_flux, self.area_weighted as u8
            )),
            &["t", "s_index", "u_index", "value"],
            &rows,
        )
    }
}

/// Vertically stacked interaction matrix mapping a flux field to the
/// stacked mole-fraction mean over all time steps (site index fast).
///
/// In density mode column u is weighted by the cell area A(u), giving a
/// Riemann sum of the underlying integral; in total-per-cell mode the raw
/// sensitivities apply directly.
pub fn assemble_stacked(
    srr: &SrrTensor,
    flux_grid: &SpatialGrid,
    mode: FluxMode,
) -> Result<DMatrix<f64>> {
    if srr.n_flux() != flux_grid.len() {
        return Err(Error::DimensionMismatch {
            context: "srr flux dimension vs grid",
            expected: flux_grid.len(),
            got: srr.n_flux(),
        });
    }
    if srr.area_weighted() && mode == FluxMode::Density {
        return Err(Error::InvalidParams(
            "srr already carries area weights; density mode would apply them twice".into(),
        ));
    }
    let weights: Vec<f64> = match mode {
        FluxMode::Density => flux_grid.areas().iter().copied().collect(),
        FluxMode::TotalPerCell => vec![1.0; flux_grid.len()],
    };
    let q = srr.n_mole();
    let p = srr.n_flux();
    let mut b = DMatrix::zeros(srr.n_steps() * q, p);
    for t in 0..srr.n_steps() {
        for s in 0..q {
            for u in 0..p {
                b[(t * q + s, u)] = srr.get(t, s, u) * weights[u];
            }
        }
    }
    Ok(b)
}

/// Hyperparameters of the separable Gaussian process driving the plume
/// scale field: exponential correlation in space, AR(1) in time.
#[derive(Debug, Clone, Copy)]
pub struct PlumeGpParams {
    pub mean: f64,
    pub sigma: f64,
    pub spatial_range: f64,
    pub temporal_a: f64,
}

impl Default for PlumeGpParams {
    fn default() -> Self {
        PlumeGpParams {
            mean: 0.0,
            sigma: 3.0,
            spatial_range: 2.0,
            temporal_a: 0.95,
        }
    }
}

impl PlumeGpParams {
    fn validate(&self) -> Result<()> {
        if !self.mean.is_finite()
            || !(self.sigma > 0.0)
            || !(self.spatial_range > 0.0)
            || !(self.temporal_a.abs() < 1.0)
        {
            return Err(Error::InvalidParams(format!(
                "plume gp params out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Realized plume scale υ_t(s) per time step and site. Its sign selects the
/// side of the receptor the plume occupies.
#[derive(Debug, Clone)]
pub struct PlumeScaleField {
    /// Row t, column s.
    pub values: DMatrix<f64>,
    pub params: PlumeGpParams,
}

impl PlumeScaleField {
    /// Draw the field from the separable GP: one spatial Cholesky factor,
    /// then a stationary AR(1) recursion over time.
    pub fn draw(
        params: PlumeGpParams,
        site_coords: &[f64],
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        params.validate()?;
        let q = site_coords.len();
        if q == 0 || n_steps == 0 {
            return Err(Error::EmptyDomain("plume scale field needs sites and steps".into()));
        }
        let mut corr = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..q {
                let h = (site_coords[i] - site_coords[j]).abs();
                corr[(i, j)] = (-h / params.spatial_range).exp();
            }
        }
        let l = linalg::cholesky_with_jitter(&corr)?.factor.l();
        let mut values = DMatrix::zeros(n_steps, q);
        let mut state: DVector<f64> = &l
            * DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let innov_scale = (1.0 - params.temporal_a * params.temporal_a).sqrt();
        for t in 0..n_steps {
            if t > 0 {
                let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                state = params.temporal_a * &state + innov_scale * (&l * z);
            }
            for s in 0..q {
                values[(t, s)] = params.mean + params.sigma * state[s];
            }
        }
        Ok(PlumeScaleField { values, params })
    }

    pub fn scale(&self, t: usize, s: usize) -> f64 {
        self.values[(t, s)]
    }
}

/// Truncated Gaussian plume kernel: positive only on the half-interval of
/// width |υ| on the side of s that the sign of υ selects, with value
/// exp(−(u−s)²/(2υ²)) there. υ = 0 gives an all-zero profile.
pub fn plume_kernel(site: f64, cell: f64, upsilon: f64) -> f64 {
    if upsilon == 0.0 {
        return 0.0;
    }
    let d = cell - site;
    let within = if upsilon > 0.0 {
        d >= 0.0 && d < upsilon
    } else {
        d <= 0.0 && d > upsilon
    };
    if !within {
        return 0.0;
    }
    (-d * d / (2.0 * upsilon * upsilon)).exp()
}

/// Evaluate the plume kernel over a fixed scale field.
pub fn plume_tensor(
    scale: &PlumeScaleField,
    mole_sites: &[f64],
    flux_grid: &SpatialGrid,
) -> Result<SrrTensor> {
    if flux_grid.dim() != 1 {
        return Err(Error::DomainError(
            "plume synthesis is defined for 1D domains only".into(),
        ));
    }
    let n_steps = scale.values.nrows();
    let q = mole_sites.len();
    if scale.values.ncols() != q {
        return Err(Error::DimensionMismatch {
            context: "plume scale field sites",
            expected: q,
            got: scale.values.ncols(),
        });
    }
    let cells: Vec<f64> = flux_grid.cells().iter().map(|c| c.centroid[0]).collect();
    let mut values = Vec::with_capacity(n_steps * q * cells.len());
    for t in 0..n_steps {
        for (s, &site) in mole_sites.iter().enumerate() {
            let upsilon = scale.scale(t, s);
            for &cell in &cells {
                values.push(plume_kernel(site, cell, upsilon));
            }
        }
    }
    SrrTensor::new(n_steps, q, cells.len(), false, values)
}

/// Draw a scale field from the GP, then evaluate the plume kernel on it.
pub fn synthesize_plume_srr(
    mole_sites: &[f64],
    flux_grid: &SpatialGrid,
    n_steps: usize,
    gp_params: PlumeGpParams,
    rng: &mut impl Rng,
) -> Result<(SrrTensor, PlumeScaleField)> {
    let scale = PlumeScaleField::draw(gp_params, mole_sites, n_steps, rng)?;
    let tensor = plume_tensor(&scale, mole_sites, flux_grid)?;
    Ok((tensor, scale))
}
