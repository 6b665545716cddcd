//! Spatial grids, the temporal domain, and the observation incidence.
//!
//! Flux fields live on the cells of a [`SpatialGrid`]; mole-fraction fields
//! live on another grid (usually a handful of station sites) and on every
//! step of a [`TemporalDomain`]. Stacked vectors over space and time are
//! ordered time-major: entry `t * n_sites + j` is site `j` at step `t`, which
//! is the ordering the Kronecker algebra in [`crate::discrepancy`] assumes.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fileio;
use crate::srr::SrrTensor;

/// Absolute per-coordinate tolerance when matching locations to grid cells.
pub const LOCATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub id: u64,
    pub centroid: Vec<f64>,
    pub area: f64,
}

/// A finite collection of grid cells with strictly positive areas and
/// pairwise-distinct centroids.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cells: Vec<GridCell>,
    dim: usize,
}

impl SpatialGrid {
    pub fn new(cells: Vec<GridCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::EmptyDomain("grid has no cells".into()));
        }
        let dim = cells[0].centroid.len();
        if dim == 0 {
            return Err(Error::InvalidParams("grid cells need coordinates".into()));
        }
        for cell in &cells {
            if cell.centroid.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "grid centroid coordinates",
                    expected: dim,
                    got: cell.centroid.len(),
                });
            }
            if !(cell.area > 0.0) || !cell.area.is_finite() {
                return Err(Error::InvalidParams(format!(
                    "cell {} has non-positive area {}",
                    cell.id, cell.area
                )));
            }
            if cell.centroid.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "cell {} has a non-finite coordinate",
                    cell.id
                )));
            }
        }
        for i in 0..cells.len() {
            for j in (i + 1)..cells.len() {
                if close(&cells[i].centroid, &cells[j].centroid, LOCATION_TOL) {
                    return Err(Error::InvalidParams(format!(
                        "cells {} and {} share a centroid",
                        cells[i].id, cells[j].id
                    )));
                }
            }
        }
        Ok(SpatialGrid { cells, dim })
    }

    /// Regular one-dimensional grid: centroids `start + k * step`.
    pub fn regular_1d(start: f64, step: f64, n: usize, area: f64) -> Result<Self> {
        let cells = (0..n)
            .map(|k| GridCell {
                id: k as u64,
                centroid: vec![start + step * k as f64],
                area,
            })
            .collect();
        SpatialGrid::new(cells)
    }

    pub fn from_coords_1d(coords: &[f64], area: f64) -> Result<Self> {
        let cells = coords
            .iter()
            .enumerate()
            .map(|(k, &c)| GridCell {
                id: k as u64,
                centroid: vec![c],
                area,
            })
            .collect();
        SpatialGrid::new(cells)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &GridCell {
        &self.cells[i]
    }

    pub fn areas(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.cells.iter().map(|c| c.area))
    }

    pub fn centroids(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|c| c.centroid.clone()).collect()
    }

    /// Index of the cell whose centroid matches `coord` within `tol` on every
    /// coordinate.
    pub fn find(&self, coord: &[f64], tol: f64) -> Option<usize> {
        self.cells
            .iter()
            .position(|c| close(&c.centroid, coord, tol))
    }

    /// Index of the cell whose centroid is nearest to `coord` in Euclidean
    /// distance.
    pub fn nearest(&self, coord: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.cells.iter().enumerate() {
            let d = dist(&c.centroid, coord);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn pairwise_distances(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = dist(&self.cells[i].centroid, &self.cells[j].centroid);
                out[(i, j)] = d;
                out[(j, i)] = d;
            }
        }
        out
    }

    /// New grid holding only the listed cells (ids preserved).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::EmptyDomain("subset keeps no cells".into()));
        }
        let cells = keep.iter().map(|&i| self.cells[i].clone()).collect();
        SpatialGrid::new(cells)
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalDomain {
    pub n_steps: usize,
    pub step_hours: f64,
}

impl TemporalDomain {
    pub fn new(n_steps: usize, step_hours: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::EmptyDomain("temporal domain has no steps".into()));
        }
        if !(step_hours > 0.0) {
            return Err(Error::InvalidParams(format!(
                "non-positive time step {step_hours}"
            )));
        }
        Ok(TemporalDomain { n_steps, step_hours })
    }
}

/// One mole-fraction observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub station_id: u64,
    pub coord: Vec<f64>,
    /// Mole fraction in ppb.
    pub value: f64,
}

/// The incidence map from stacked mole-fraction entries to observation rows.
///
/// Each observation selects exactly one entry of the stacked mole-fraction
/// vector, so the stacked matrix `C` has one unit entry per row and `C'C` is
/// diagonal. Rows are grouped by time step in ascending order; within a step
/// the original observation order is preserved, and the paired observation
/// vector returned by [`build_incidence`] follows the same order.
#[derive(Debug, Clone)]
pub struct ObservationIncidence {
    n_steps: usize,
    n_sites: usize,
    rows: Vec<(usize, usize)>,
}

impl ObservationIncidence {
    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Length of the stacked mole-fraction vector.
    pub fn stacked_dim(&self) -> usize {
        self.n_steps * self.n_sites
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn stacked_col(&self, row: usize) -> usize {
        let (t, s) = self.rows[row];
        t * self.n_sites + s
    }

    /// `C v`: pick the observed entries out of a stacked vector.
    pub fn gather(&self, stacked: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            (0..self.rows.len()).map(|r| stacked[self.stacked_col(r)]),
        )
    }

    /// `C' v`: accumulate observation-space values into stacked space.
    pub fn scatter_add(&self, obs: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.stacked_dim());
        for r in 0..self.rows.len() {
            out[self.stacked_col(r)] += obs[r];
        }
        out
    }

    /// Diagonal of `C'C`: observation counts per stacked entry.
    pub fn col_counts(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.stacked_dim());
        for r in 0..self.rows.len() {
            out[self.stacked_col(r)] += 1.0;
        }
        out
    }

    /// Per-site observation counts when the pattern is identical at every
    /// time step, which unlocks the block-diagonalized solver path.
    pub fn time_invariant_site_counts(&self) -> Option<Vec<f64>> {
        let mut per_time = vec![vec![0usize; self.n_sites]; self.n_steps];
        for &(t, s) in &self.rows {
            per_time[t][s] += 1;
        }
        let first = per_time[0].clone();
        if per_time.iter().all(|c| *c == first) {
            Some(first.into_iter().map(|c| c as f64).collect())
        } else {
            None
        }
    }
}

/// Match observations to mole-fraction grid cells and stack their values.
///
/// Returns the incidence together with the observation vector in incidence
/// row order (grouped by time step, original order within a step).
pub fn build_incidence(
    grid: &SpatialGrid,
    time: &TemporalDomain,
    obs: &[Observation],
) -> Result<(ObservationIncidence, DVector<f64>)> {
    if obs.is_empty() {
        return Err(Error::EmptyDomain("no observations".into()));
    }
    let mut indexed: Vec<(usize, usize, f64)> = Vec::with_capacity(obs.len());
    for ob in obs {
        if ob.t >= time.n_steps {
            return Err(Error::InvalidParams(format!(
                "observation at step {} outside domain of {} steps",
                ob.t, time.n_steps
            )));
        }
        let site = grid.find(&ob.coord, LOCATION_TOL).ok_or_else(|| {
            Error::UnmatchedLocation {
                location: ob
                    .coord
                    .iter()
                    .map(|c| format!("{c}"))
                    .collect::<Vec<_>>()
                    .join(", "),
                tol: LOCATION_TOL,
            }
        })?;
        if !ob.value.is_finite() {
            return Err(Error::InvalidParams(format!(
                "non-finite observation at step {} station {}",
                ob.t, ob.station_id
            )));
        }
        indexed.push((ob.t, site, ob.value));
    }
    indexed.sort_by_key(|&(t, _, _)| t);
    let values = DVector::from_iterator(indexed.len(), indexed.iter().map(|&(_, _, v)| v));
    let rows = indexed.into_iter().map(|(t, s, _)| (t, s)).collect();
    Ok((
        ObservationIncidence {
            n_steps: time.n_steps,
            n_sites: grid.len(),
            rows,
        },
        values,
    ))
}

/// Drop flux cells whose source-receptor sensitivity never exceeds the
/// threshold at any covered site and step. Returns the trimmed grid and the
/// kept cell indices (ascending). Pass a tensor restricted to the observation
/// sites when prediction-only sites should not keep cells alive.
pub fn trim_flux_domain(
    srr: &SrrTensor,
    flux_grid: &SpatialGrid,
    threshold: f64,
) -> Result<(SpatialGrid, Vec<usize>)> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "negative trim threshold {threshold}"
        )));
    }
    if srr.n_flux() != flux_grid.len() {
        return Err(Error::DimensionMismatch {
            context: "trim flux cells",
            expected: flux_grid.len(),
            got: srr.n_flux(),
        });
    }
    let keep: Vec<usize> = (0..flux_grid.len())
        .filter(|&u| srr.max_at_flux_cell(u) > threshold)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDomain(
            "every flux cell fell below the sensitivity threshold".into(),
        ));
    }
    Ok((flux_grid.subset(&keep)?, keep))
}

/// Grid file: `id,coord1[,coord2],area`.
pub fn load_grid_csv(path: &Path) -> Result<SpatialGrid> {
    let (header, rows) = fileio::read_table(path)?;
    if header.len() < 3 {
        return Err(fileio::format_err(path, "grid needs id, coords, area"));
    }
    let dim = header.len() - 2;
    let mut cells = Vec::with_capacity(rows.len());
    for row in rows {
        let id = fileio::parse_u64(path, &row[0], "cell id")?;
        let centroid = row[1..1 + dim]
            .iter()
            .map(|f| fileio::parse_f64(path, f, "coordinate"))
            .collect::<Result<Vec<f64>>>()?;
        let area = fileio::parse_f64(path, &row[1 + dim], "area")?;
        cells.push(GridCell { id, centroid, area });
    }
    SpatialGrid::new(cells)
}

pub fn write_grid_csv(path: &Path, grid: &SpatialGrid, meta: Option<&str>) -> Result<()> {
    let mut header = vec!["id".to_string()];
    header.extend((1..=grid.dim()).map(|k| format!("coord{k}")));
    header.push("area".to_string());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = grid
        .cells()
        .iter()
        .map(|c| {
            let mut row = vec![c.id.to_string()];
            row.extend(c.centroid.iter().map(|v| fileio::fmt_f64(*v)));
            row.push(fileio::fmt_f64(c.area));
            row
        })
        .collect();
    fileio::write_table(path, meta, &header, &rows)
}

/// Observation file: `t,station_id,coord1[,coord2],value_ppb`.
pub fn load_observations_csv(path: &Path) -> Result<Vec<Observation>> {
    let (header, rows) = fileio::read_table(path)?;
    if header.len() < 4 {
        return Err(fileio::format_err(
            path,
            "observations need t, station_id, coords, value_ppb",
        ));
    }
    let dim = header.len() - 3;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let t = fileio::parse_usize(path, &row[0], "time step")?;
        let station_id = fileio::parse_u64(path, &row[1], "station id")?;
        let coord = row[2..2 + dim]
            .iter()
            .map(|f| fileio::parse_f64(path, f, "coordinate"))
            .collect::<Result<Vec<f64>>>()?;
        let value = fileio::parse_f64(path, &row[2 + dim], "value_ppb")?;
        out.push(Observation {
            t,
            station_id,
            coord,
            value,
        });
    }
    Ok(out)
}

pub fn write_observations_csv(
    path: &Path,
    obs: &[Observation],
    meta: Option<&str>,
) -> Result<()> {
    let dim = obs.first().map_or(1, |o| o.coord.len());
    let mut header = vec!["t".to_string(), "station_id".to_string()];
    header.extend((1..=dim).map(|k| format!("coord{k}")));
    header.push("value_ppb".to_string());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = obs
        .iter()
        .map(|o| {
            let mut row = vec![o.t.to_string(), o.station_id.to_string()];
            row.extend(o.coord.iter().map(|v| fileio::fmt_f64(*v)));
            row.push(fileio::fmt_f64(o.value));
            row
        })
        .collect();
    fileio::write_table(path, meta, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn station_grid() -> SpatialGrid {
        SpatialGrid::from_coords_1d(&[-5.3, -4.5, -3.9, -3.7, -0.1, 0.3], 1.0).unwrap()
    }

    #[test]
    fn incidence_shape_matches_study_layout() {
        let grid = station_grid();
        let time = TemporalDomain::new(100, 2.0).unwrap();
        let mut obs = Vec::new();
        for t in 0..100 {
            for (k, &s) in [-5.3, -4.5, -3.9, -3.7, -0.1].iter().enumerate() {
                obs.push(Observation {
                    t,
                    station_id: k as u64,
                    coord: vec![s],
                    value: 1.0 + t as f64,
                });
            }
        }
        let (inc, z) = build_incidence(&grid, &time, &obs).unwrap();
        assert_eq!(inc.n_obs(), 500);
        assert_eq!(inc.stacked_dim(), 600);
        // One unit entry per row, all within the correct time block.
        for r in 0..inc.n_obs() {
            let col = inc.stacked_col(r);
            let t = inc.rows()[r].0;
            assert!(col >= t * 6 && col < (t + 1) * 6);
        }
        assert_eq!(z[0], 1.0);
        assert_eq!(z[499], 100.0);
        let counts = inc.time_invariant_site_counts().unwrap();
        assert_eq!(counts, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn unmatched_location_is_rejected() {
        let grid = station_grid();
        let time = TemporalDomain::new(2, 1.0).unwrap();
        let obs = [Observation {
            t: 0,
            station_id: 0,
            coord: vec![-5.3 + 1e-6],
            value: 0.0,
        }];
        match build_incidence(&grid, &time, &obs) {
            Err(Error::UnmatchedLocation { .. }) => {}
            other => panic!("expected UnmatchedLocation, got {other:?}"),
        }
    }

    #[test]
    fn wiggle_within_tolerance_matches() {
        let grid = station_grid();
        let time = TemporalDomain::new(1, 1.0).unwrap();
        let obs = [Observation {
            t: 0,
            station_id: 0,
            coord: vec![-5.3 + 5e-10],
            value: 2.5,
        }];
        let (inc, z) = build_incidence(&grid, &time, &obs).unwrap();
        assert_eq!(inc.stacked_col(0), 0);
        assert_eq!(z[0], 2.5);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let grid = station_grid();
        let time = TemporalDomain::new(3, 1.0).unwrap();
        let obs: Vec<Observation> = (0..3)
            .flat_map(|t| {
                [(-5.3, 0u64), (-0.1, 4u64), (-0.1, 4u64)]
                    .into_iter()
                    .map(move |(c, id)| Observation {
                        t,
                        station_id: id,
                        coord: vec![c],
                        value: 0.0,
                    })
            })
            .collect();
        let (inc, _) = build_incidence(&grid, &time, &obs).unwrap();
        let v = DVector::from_fn(inc.stacked_dim(), |i, _| (i as f64).sin());
        let w = DVector::from_fn(inc.n_obs(), |i, _| (i as f64 + 0.5).cos());
        let lhs = inc.gather(&v).dot(&w);
        let rhs = v.dot(&inc.scatter_add(&w));
        assert!((lhs - rhs).abs() < 1e-12);
        // Duplicate observations at one site show up in the counts.
        let counts = inc.time_invariant_site_counts().unwrap();
        assert_eq!(counts, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn grid_rejects_duplicate_centroids() {
        let cells = vec![
            GridCell {
                id: 0,
                centroid: vec![1.0],
                area: 1.0,
            },
            GridCell {
                id: 1,
                centroid: vec![1.0],
                area: 1.0,
            },
        ];
        assert!(SpatialGrid::new(cells).is_err());
    }

    #[test]
    fn grid_roundtrips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let grid = SpatialGrid::regular_1d(-9.9, 0.2, 100, 0.2).unwrap();
        write_grid_csv(&path, &grid, Some("traceinv test")).unwrap();
        let back = load_grid_csv(&path).unwrap();
        assert_eq!(back.len(), 100);
        for i in 0..100 {
            assert_eq!(back.cell(i).centroid, grid.cell(i).centroid);
            assert_eq!(back.cell(i).area, grid.cell(i).area);
        }
    }
}
