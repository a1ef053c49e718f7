use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::{CubeParts, DataCube, Location};
use crate::error::{Error, Result};

const LATTICE_TOL: f64 = 1e-6;

/// Lattice structure of a cube's locations.
///
/// Locations must sit on an axis-aligned lattice with constant spacing per
/// axis. Lattice points without a location are allowed; `is_complete` tells
/// whether every point of the bounding box is occupied.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub origin: (f64, f64),
    pub spacing: (f64, f64),
    pub nx: usize,
    pub ny: usize,
    /// Lattice index `(i, j)` of every location, in cube order.
    pub index: Vec<(usize, usize)>,
}

fn axis(values: impl Iterator<Item = f64>, name: &str) -> Result<(f64, f64, Vec<usize>)> {
    let values: Vec<f64> = values.collect();
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let origin = distinct[0];
    let spacing = distinct
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if !spacing.is_finite() {
        return Ok((origin, 1.0, vec![0; values.len()]));
    }
    let idx = values
        .iter()
        .map(|&v| {
            let k = (v - origin) / spacing;
            let r = k.round();
            if (k - r).abs() > LATTICE_TOL {
                Err(Error::UnsupportedLayout(format!(
                    "coordinate {name}={v} is not on a regular lattice with spacing {spacing}"
                )))
            } else {
                Ok(r as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((origin, spacing, idx))
}

impl GridLayout {
    pub fn detect(locations: &[Location]) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::UnsupportedLayout("no locations".into()));
        }
        let (x0, dx, ix) = axis(locations.iter().map(|l| l.s1), "s1")?;
        let (y0, dy, iy) = axis(locations.iter().map(|l| l.s2), "s2")?;
        let index: Vec<(usize, usize)> = ix.into_iter().zip(iy).collect();
        let mut seen = HashSet::with_capacity(index.len());
        for (k, ij) in index.iter().enumerate() {
            if !seen.insert(*ij) {
                return Err(Error::UnsupportedLayout(format!(
                    "location '{}' shares its lattice cell with another location",
                    locations[k].id
                )));
            }
        }
        let nx = index.iter().map(|ij| ij.0).max().unwrap_or(0) + 1;
        let ny = index.iter().map(|ij| ij.1).max().unwrap_or(0) + 1;
        Ok(Self {
            origin: (x0, y0),
            spacing: (dx, dy),
            nx,
            ny,
            index,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.index.len() == self.nx * self.ny
    }
}

/// What a transposed cube needs to map back onto its source.
#[derive(Debug, PartialEq)]
pub(crate) struct TransposeOrigin {
    locations: Vec<Location>,
    index: Vec<(usize, usize)>,
    m: usize,
    time_origin: i64,
    ny: usize,
    previous: Option<Arc<TransposeOrigin>>,
}

fn transposed_id(t: usize, j: usize, m: usize, ny: usize) -> String {
    let wt = m.to_string().len();
    let wj = ny.to_string().len();
    format!("t{:0wt$}_j{:0wj$}", t + 1, j + 1)
}

/// Exchanges the time axis with the `s1` spatial axis.
///
/// The result has one location per `(time, s2)` pair, with the old time
/// label as its `s1` coordinate, and one time step per `s1` lattice column.
/// Transposing a transposed cube restores the original exactly.
pub fn transpose_axes(cube: &DataCube) -> Result<DataCube> {
    if let Some(origin) = &cube.transpose_origin {
        return untranspose(cube, origin);
    }
    let grid = GridLayout::detect(cube.locations())?;
    if !grid.is_complete() {
        return Err(Error::UnsupportedLayout(format!(
            "transposition needs a complete lattice; {} of {}x{} cells are occupied",
            grid.index.len(),
            grid.nx,
            grid.ny
        )));
    }
    let (m, d, p) = (cube.m(), cube.d(), cube.p());
    let (nx, ny) = (grid.nx, grid.ny);
    let mut at = vec![0usize; nx * ny];
    for (s, &(i, j)) in grid.index.iter().enumerate() {
        at[i * ny + j] = s;
    }

    let n_new = m * ny;
    let mut locations = Vec::with_capacity(n_new);
    let mut response = Vec::with_capacity(n_new * nx);
    let mut treatments = Vec::with_capacity(n_new * nx * d);
    let mut covariates = Vec::with_capacity(n_new * nx * p);
    for t in 0..m {
        for j in 0..ny {
            let s2 = grid.origin.1 + j as f64 * grid.spacing.1;
            locations.push(Location::new(
                transposed_id(t, j, m, ny),
                (cube.time_origin() + t as i64) as f64,
                s2,
            ));
            for i in 0..nx {
                let s = at[i * ny + j];
                response.push(cube.y(s, t));
                treatments.extend((0..d).map(|k| cube.x(s, t, k)));
                covariates.extend((0..p).map(|k| cube.w(s, t, k)));
            }
        }
    }
    let mut out = DataCube::from_parts(CubeParts {
        locations,
        m: nx,
        time_origin: 1,
        names: (*cube.names).clone(),
        response,
        treatments,
        covariates,
    })?;
    out.transpose_origin = Some(Arc::new(TransposeOrigin {
        locations: cube.locations().to_vec(),
        index: grid.index,
        m,
        time_origin: cube.time_origin(),
        ny,
        previous: cube.transpose_origin.clone(),
    }));
    Ok(out)
}

fn untranspose(cube: &DataCube, origin: &TransposeOrigin) -> Result<DataCube> {
    let (d, p) = (cube.d(), cube.p());
    let by_id: HashMap<&str, usize> = cube
        .locations()
        .iter()
        .enumerate()
        .map(|(k, l)| (l.id.as_str(), k))
        .collect();
    let m = origin.m;
    let mut response = Vec::with_capacity(origin.locations.len() * m);
    let mut treatments = Vec::with_capacity(origin.locations.len() * m * d);
    let mut covariates = Vec::with_capacity(origin.locations.len() * m * p);
    for &(i, j) in &origin.index {
        for t in 0..m {
            let id = transposed_id(t, j, m, origin.ny);
            let s = *by_id.get(id.as_str()).ok_or_else(|| {
                Error::Integrity(format!("transposed cube lacks location '{id}'"))
            })?;
            if i >= cube.m() {
                return Err(Error::Integrity("transposed cube has too few time steps".into()));
            }
            response.push(cube.y(s, i));
            treatments.extend((0..d).map(|k| cube.x(s, i, k)));
            covariates.extend((0..p).map(|k| cube.w(s, i, k)));
        }
    }
    let mut out = DataCube::from_parts(CubeParts {
        locations: origin.locations.clone(),
        m,
        time_origin: origin.time_origin,
        names: (*cube.names).clone(),
        response,
        treatments,
        covariates,
    })?;
    out.transpose_origin = origin.previous.clone();
    Ok(out)
}
