//! Spatio-temporal data model.
//!
//! A [`DataCube`] holds one response, `d` treatment variables and `p`
//! covariates on `n` spatial locations observed at the contiguous time
//! indices `1..=m`. Every variable is stored per cell as `Option<f64>`, so
//! missingness is explicit and never encoded as a sentinel value.
//!
//! Locations are kept sorted by id. All spatial reductions in the crate walk
//! the cube in this order, which makes results independent of input row
//! order and of thread scheduling.

mod csv_io;
mod layout;
mod results;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{read_cube, write_cube, CubeSchema};
pub use layout::{transpose_axes, GridLayout};
pub use results::{read_results, write_results, Provenance, ResultBody, ResultDocument, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub s1: f64,
    pub s2: f64,
}

impl Location {
    pub fn new(id: impl Into<String>, s1: f64, s2: f64) -> Self {
        Self {
            id: id.into(),
            s1,
            s2,
        }
    }
}

/// Variable names of a cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableNames {
    pub response: String,
    pub treatments: Vec<String>,
    pub covariates: Vec<String>,
}

impl VariableNames {
    pub fn new(response: &str, treatments: &[&str], covariates: &[&str]) -> Self {
        Self {
            response: response.to_string(),
            treatments: treatments.iter().map(|s| s.to_string()).collect(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// `y`, `x1..xd`, `w1..wp`.
    pub fn default_for(d: usize, p: usize) -> Self {
        Self {
            response: "y".into(),
            treatments: (1..=d).map(|j| format!("x{j}")).collect(),
            covariates: (1..=p).map(|j| format!("w{j}")).collect(),
        }
    }
}

/// Raw arrays used to assemble a [`DataCube`].
///
/// `response` is `n*m` in location-major order (`s*m + t`), `treatments` is
/// `n*m*d` and `covariates` is `n*m*p` with the variable index innermost.
#[derive(Debug, Clone)]
pub struct CubeParts {
    pub locations: Vec<Location>,
    pub m: usize,
    pub time_origin: i64,
    pub names: VariableNames,
    pub response: Vec<Option<f64>>,
    pub treatments: Vec<Option<f64>>,
    pub covariates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    locations: Arc<[Location]>,
    m: usize,
    time_origin: i64,
    names: Arc<VariableNames>,
    response: Arc<[Option<f64>]>,
    treatments: Arc<[Option<f64>]>,
    covariates: Arc<[Option<f64>]>,
    transpose_origin: Option<Arc<layout::TransposeOrigin>>,
}

fn check_values(name: &str, values: &[Option<f64>]) -> Result<()> {
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Integrity(format!("non-finite value in {name}")));
    }
    Ok(())
}

impl DataCube {
    /// Validates the parts and sorts locations by id.
    pub fn from_parts(parts: CubeParts) -> Result<Self> {
        let CubeParts {
            locations,
            m,
            time_origin,
            names,
            response,
            treatments,
            covariates,
        } = parts;
        let n = locations.len();
        let d = names.treatments.len();
        let p = names.covariates.len();
        if n == 0 || m == 0 {
            return Err(Error::Integrity("cube must have at least one location and one time step".into()));
        }
        if response.len() != n * m {
            return Err(Error::Integrity(format!(
                "response has {} cells, expected n*m = {}",
                response.len(),
                n * m
            )));
        }
        if treatments.len() != n * m * d {
            return Err(Error::Integrity(format!(
                "treatments have {} cells, expected n*m*d = {}",
                treatments.len(),
                n * m * d
            )));
        }
        if covariates.len() != n * m * p {
            return Err(Error::Integrity(format!(
                "covariates have {} cells, expected n*m*p = {}",
                covariates.len(),
                n * m * p
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for loc in &locations {
            if !seen.insert(loc.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate location id '{}'", loc.id)));
            }
            if !loc.s1.is_finite() || !loc.s2.is_finite() {
                return Err(Error::Integrity(format!("location '{}' has non-finite coordinates", loc.id)));
            }
        }
        check_values("response", &response)?;
        check_values("treatments", &treatments)?;
        check_values("covariates", &covariates)?;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| locations[a].id.cmp(&locations[b].id));
        let sorted = order.iter().enumerate().all(|(i, &o)| i == o);
        let (locations, response, treatments, covariates) = if sorted {
            (locations, response, treatments, covariates)
        } else {
            let gather = |values: &[Option<f64>], width: usize| -> Vec<Option<f64>> {
                let block = m * width;
                order.iter().flat_map(|&o| values[o * block..(o + 1) * block].iter().copied()).collect()
            };
            (
                order.iter().map(|&o| locations[o].clone()).collect(),
                gather(&response, 1),
                gather(&treatments, d),
                gather(&covariates, p),
            )
        };
        Ok(Self {
            locations: locations.into(),
            m,
            time_origin,
            names: Arc::new(names),
            response: response.into(),
            treatments: treatments.into(),
            covariates: covariates.into(),
            transpose_origin: None,
        })
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Treatment dimension.
    pub fn d(&self) -> usize {
        self.names.treatments.len()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.names.covariates.len()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn names(&self) -> &VariableNames {
        &self.names
    }

    /// Calendar label of time index 1.
    pub fn time_origin(&self) -> i64 {
        self.time_origin
    }

    /// Flat response array, `s*m + t`.
    pub fn response(&self) -> &[Option<f64>] {
        &self.response
    }

    pub fn treatments(&self) -> &[Option<f64>] {
        &self.treatments
    }

    pub fn covariates(&self) -> &[Option<f64>] {
        &self.covariates
    }

    pub fn response_series(&self, s: usize) -> &[Option<f64>] {
        &self.response[s * self.m..(s + 1) * self.m]
    }

    /// Treatments of location `s`, `m*d` values with the variable index innermost.
    pub fn treatment_series(&self, s: usize) -> &[Option<f64>] {
        let w = self.m * self.d();
        &self.treatments[s * w..(s + 1) * w]
    }

    pub fn covariate_series(&self, s: usize) -> &[Option<f64>] {
        let w = self.m * self.p();
        &self.covariates[s * w..(s + 1) * w]
    }

    /// Response at location `s`, zero-based time `t`.
    pub fn y(&self, s: usize, t: usize) -> Option<f64> {
        self.response[s * self.m + t]
    }

    pub fn x(&self, s: usize, t: usize, j: usize) -> Option<f64> {
        self.treatments[(s * self.m + t) * self.d() + j]
    }

    pub fn w(&self, s: usize, t: usize, j: usize) -> Option<f64> {
        self.covariates[(s * self.m + t) * self.p() + j]
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.names.covariates.iter().position(|c| c == name)
    }

    pub fn missing_cells(&self) -> usize {
        self.response.iter().filter(|v| v.is_none()).count()
    }

    /// Same cube with a replaced response array. Other arrays are shared.
    pub fn with_response(&self, response: Vec<Option<f64>>) -> Result<Self> {
        if response.len() != self.response.len() {
            return Err(Error::Integrity(format!(
                "replacement response has {} cells, expected {}",
                response.len(),
                self.response.len()
            )));
        }
        check_values("response", &response)?;
        Ok(Self {
            response: response.into(),
            ..self.clone()
        })
    }

    /// Pairs the response at time `t` with the treatment at `t - lag`.
    ///
    /// The first `lag` time steps are dropped; covariates stay aligned with
    /// the response.
    pub fn with_shifted_treatments(&self, lag: usize) -> Result<Self> {
        if lag == 0 {
            return Ok(self.clone());
        }
        if lag >= self.m {
            return Err(Error::Config(format!("lag {lag} must be smaller than m = {}", self.m)));
        }
        let (n, m, d, p) = (self.n(), self.m, self.d(), self.p());
        let m_new = m - lag;
        let mut response = Vec::with_capacity(n * m_new);
        let mut treatments = Vec::with_capacity(n * m_new * d);
        let mut covariates = Vec::with_capacity(n * m_new * p);
        for s in 0..n {
            for t in lag..m {
                response.push(self.y(s, t));
                treatments.extend((0..d).map(|j| self.x(s, t - lag, j)));
                covariates.extend((0..p).map(|j| self.w(s, t, j)));
            }
        }
        Self::from_parts(CubeParts {
            locations: self.locations.to_vec(),
            m: m_new,
            time_origin: self.time_origin + lag as i64,
            names: (*self.names).clone(),
            response,
            treatments,
            covariates,
        })
    }

    /// Treatment vectors `(X^{t-k+1}, ..., X^t)` for lagged effects.
    ///
    /// The result has `m - window + 1` time steps and treatment dimension
    /// `d * window`; its time index 1 corresponds to original time `window`.
    /// Treatment names are suffixed with the lag (`x1_l0` is the
    /// contemporaneous value, `x1_l1` the previous one, ...).
    pub fn with_lagged_treatments(&self, window: usize) -> Result<Self> {
        if window == 0 || window > self.m {
            return Err(Error::Config(format!(
                "lag window {window} must lie in 1..={}",
                self.m
            )));
        }
        let (n, m, d, p) = (self.n(), self.m, self.d(), self.p());
        let m_new = m - window + 1;
        let d_new = d * window;
        let mut response = Vec::with_capacity(n * m_new);
        let mut treatments = Vec::with_capacity(n * m_new * d_new);
        let mut covariates = Vec::with_capacity(n * m_new * p);
        for s in 0..n {
            for t in (window - 1)..m {
                response.push(self.y(s, t));
                for lag in (0..window).rev() {
                    for j in 0..d {
                        treatments.push(self.x(s, t - lag, j));
                    }
                }
                for j in 0..p {
                    covariates.push(self.w(s, t, j));
                }
            }
        }
        let treatment_names = (0..window)
            .rev()
            .flat_map(|lag| self.names.treatments.iter().map(move |x| format!("{x}_l{lag}")))
            .collect();
        Self::from_parts(CubeParts {
            locations: self.locations.to_vec(),
            m: m_new,
            time_origin: self.time_origin + (window as i64 - 1),
            names: VariableNames {
                response: self.names.response.clone(),
                treatments: treatment_names,
                covariates: self.names.covariates.clone(),
            },
            response,
            treatments,
            covariates,
        })
    }
}
