//! Stationary Gaussian random fields and simulated LSCM datasets.
//!
//! Fields are drawn as `L z` where `L` is the dense Cholesky factor of the
//! covariance matrix of the sampled locations and `z` a vector of standard
//! normals. Every field of a simulation has its own random stream derived
//! from the simulation seed (`zeta` = 0, `psi` = 1, `xi^t` = 2t,
//! `eps^t` = 2t + 1), so extending the time horizon leaves earlier draws
//! untouched and parallel sampling is scheduling-independent.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacube::{CubeParts, DataCube, Location, VariableNames};
use crate::error::{Error, Result};
use crate::seeds::stream_rng;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// `u -> exp(-|u| / (2 scale))`
    Exponential,
}

/// Isotropic stationary covariance function with unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    pub kind: CovarianceKind,
    pub scale: f64,
}

impl Default for CovarianceModel {
    fn default() -> Self {
        Self {
            kind: CovarianceKind::Exponential,
            scale: 1.0,
        }
    }
}

impl CovarianceModel {
    pub fn exponential(scale: f64) -> Result<Self> {
        let model = Self {
            kind: CovarianceKind::Exponential,
            scale,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("covariance scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Covariance at lag `u`.
    pub fn eval(&self, u: [f64; 2]) -> f64 {
        let dist = u[0].hypot(u[1]);
        match self.kind {
            CovarianceKind::Exponential => (-0.5 * dist / self.scale).exp(),
        }
    }

    /// Row-major covariance matrix of `locations` (no jitter).
    pub fn matrix(&self, locations: &[Location]) -> Vec<f64> {
        let n = locations.len();
        let mut sigma = vec![0.0; n * n];
        for (i, a) in locations.iter().enumerate() {
            for (j, b) in locations.iter().enumerate().take(i + 1) {
                let c = self.eval([a.s1 - b.s1, a.s2 - b.s2]);
                sigma[i * n + j] = c;
                sigma[j * n + i] = c;
            }
        }
        sigma
    }
}

/// Lower Cholesky factor of a row-major SPD matrix, or the offending pivot.
fn cholesky(a: &[f64], n: usize) -> std::result::Result<Vec<f64>, f64> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let (head, tail) = l.split_at_mut(j * n);
        let row_j = &mut tail[..n];
        for k in 0..j {
            let row_k = &head[k * n..k * n + k + 1];
            let dot: f64 = row_j[..k].iter().zip(&row_k[..k]).map(|(a, b)| a * b).sum();
            row_j[k] = (a[j * n + k] - dot) / row_k[k];
        }
        let pivot = a[j * n + j] - row_j[..j].iter().map(|v| v * v).sum::<f64>();
        if pivot.is_nan() || pivot <= 0.0 || !pivot.is_finite() {
            return Err(pivot);
        }
        row_j[j] = pivot.sqrt();
    }
    Ok(l)
}

/// Draws mean-zero Gaussian vectors with a fixed covariance matrix.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    factor: DMatrix<f64>,
    jitter: f64,
}

impl FieldSampler {
    pub fn new(cov: &CovarianceModel, locations: &[Location]) -> Result<Self> {
        cov.validate()?;
        if locations.is_empty() {
            return Err(Error::Precondition("no locations to sample".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(locations.len());
        for l in locations {
            if !seen.insert((l.s1.to_bits(), l.s2.to_bits())) {
                return Err(Error::Precondition(format!("duplicate sampling location ({}, {})", l.s1, l.s2)));
            }
        }
        let n = locations.len();
        let mut sigma = cov.matrix(locations);
        let mut jitter = JITTER_START;
        let mut added = 0.0;
        loop {
            for i in 0..n {
                sigma[i * n + i] += jitter - added;
            }
            added = jitter;
            match cholesky(&sigma, n) {
                Ok(l) => {
                    return Ok(Self {
                        factor: DMatrix::from_row_slice(n, n, &l),
                        jitter,
                    })
                }
                Err(pivot) if jitter >= JITTER_MAX => {
                    return Err(Error::Numerical(format!(
                        "Cholesky factorization failed with diagonal jitter {jitter:e}; smallest pivot {pivot:e}"
                    )))
                }
                Err(_) => jitter *= 10.0,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.factor.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diagonal jitter that made the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// One draw per stream; column `k` of the result uses `streams[k]` of `seed`.
    pub fn draw(&self, seed: u64, streams: &[u64]) -> DMatrix<f64> {
        let n = self.len();
        let columns: Vec<Vec<f64>> = streams
            .par_iter()
            .map(|&stream| {
                let mut rng = stream_rng(seed, stream);
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let z = DMatrix::from_fn(n, streams.len(), |i, k| columns[k][i]);
        &self.factor * z
    }
}

/// `k` independent draws of a mean-zero Gaussian vector with covariance
/// `cov` evaluated at `locations`.
pub fn sample_gp(cov: &CovarianceModel, locations: &[Location], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let sampler = FieldSampler::new(cov, locations)?;
    let streams: Vec<u64> = (0..k as u64).collect();
    let draws = sampler.draw(seed, &streams);
    Ok(draws.column_iter().map(|c| c.iter().copied().collect()).collect())
}

/// Regular sampling grid, enumerated with the second coordinate running fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSampling {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub origin: (f64, f64),
}

impl GridSampling {
    /// `{1..side} x {1..side}` with unit spacing.
    pub fn square(side: usize) -> Self {
        Self {
            nx: side,
            ny: side,
            spacing: 1.0,
            origin: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(Error::Config(format!("grid spacing must be positive, got {}", self.spacing)));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    /// Location `k = i*ny + j` sits at `origin + spacing*(i, j)` and has id
    /// `s<k+1>` zero-padded so that id order equals enumeration order.
    pub fn locations(&self) -> Vec<Location> {
        let width = self.n().to_string().len().max(6);
        (0..self.nx)
            .flat_map(|i| (0..self.ny).map(move |j| (i, j)))
            .enumerate()
            .map(|(k, (i, j))| {
                Location::new(
                    format!("s{:0width$}", k + 1),
                    self.origin.0 + self.spacing * i as f64,
                    self.origin.1 + self.spacing * j as f64,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralForm {
    /// `Y = (1.5 + Hbar*Htilde) X + Hbar^2 + |Htilde| eps`
    Example,
    /// `Y = Hbar^2 + |Htilde| eps`, no effect of X.
    Null,
}

impl StructuralForm {
    /// The response mechanism `f(x, H, eps)`.
    pub fn response(&self, x: f64, h_bar: f64, h_tilde: f64, eps: f64) -> f64 {
        let confounded = h_bar * h_bar + h_tilde.abs() * eps;
        match self {
            StructuralForm::Example => (1.5 + h_bar * h_tilde) * x + confounded,
            StructuralForm::Null => confounded,
        }
    }

    /// Average causal effect `x -> E[f(x, H, eps)]`.
    pub fn analytic_ave(&self, x: f64) -> f64 {
        match self {
            StructuralForm::Example => 1.0 + 2.0 * x,
            StructuralForm::Null => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreatmentKind {
    Continuous,
    /// `X = 1{latent X > threshold}`
    Binary { threshold: f64 },
}

/// Complete description of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LscmSpec {
    pub grid: GridSampling,
    pub m: usize,
    pub form: StructuralForm,
    pub treatment: TreatmentKind,
    #[serde(default)]
    pub covariance: CovarianceModel,
    pub seed: u64,
}

impl LscmSpec {
    pub fn example(grid: GridSampling, m: usize, seed: u64) -> Self {
        Self {
            grid,
            m,
            form: StructuralForm::Example,
            treatment: TreatmentKind::Continuous,
            covariance: CovarianceModel::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.covariance.validate()?;
        if self.m == 0 {
            return Err(Error::Config("number of time steps must be positive".into()));
        }
        if let TreatmentKind::Binary { threshold } = self.treatment {
            if !threshold.is_finite() {
                return Err(Error::Config("binary threshold must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Latent quantities behind a simulated cube, in cube location order.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRecord {
    pub zeta: Vec<f64>,
    pub psi: Vec<f64>,
    /// `Hbar_s^t`, `n*m`.
    pub h_bar: Vec<f64>,
    /// `Htilde_s^t`, `n*m`.
    pub h_tilde: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub cube: DataCube,
    pub hidden: HiddenRecord,
}

/// Simulator bound to one grid, reusing the covariance factorization.
#[derive(Debug, Clone)]
pub struct LscmSimulator {
    grid: GridSampling,
    covariance: CovarianceModel,
    locations: Vec<Location>,
    sampler: FieldSampler,
}

impl LscmSimulator {
    pub fn new(grid: GridSampling, covariance: CovarianceModel) -> Result<Self> {
        grid.validate()?;
        let locations = grid.locations();
        let sampler = FieldSampler::new(&covariance, &locations)?;
        Ok(Self {
            grid,
            covariance,
            locations,
            sampler,
        })
    }

    pub fn for_spec(spec: &LscmSpec) -> Result<Self> {
        Self::new(spec.grid, spec.covariance)
    }

    pub fn simulate(&self, spec: &LscmSpec) -> Result<Simulation> {
        spec.validate()?;
        if spec.grid != self.grid || spec.covariance != self.covariance {
            return Err(Error::Config("spec does not match the simulator's grid or covariance".into()));
        }
        let (n, m) = (self.locations.len(), spec.m);
        let streams: Vec<u64> = (0..2 + 2 * m as u64).collect();
        let fields = self.sampler.draw(spec.seed, &streams);
        let zeta: Vec<f64> = fields.column(0).iter().copied().collect();
        let psi: Vec<f64> = fields.column(1).iter().copied().collect();
        let half_sqrt3 = 3f64.sqrt() / 2.0;

        let mut h_bar = Vec::with_capacity(n * m);
        let mut h_tilde = Vec::with_capacity(n * m);
        let mut response = Vec::with_capacity(n * m);
        let mut treatments = Vec::with_capacity(n * m);
        for (s, loc) in self.locations.iter().enumerate() {
            let hb = zeta[s];
            let ht = 1.0 + 0.5 * zeta[s] + half_sqrt3 * psi[s];
            let trend = (-(loc.s1 * loc.s1 + loc.s2 * loc.s2) / 1000.0).exp();
            for t in 1..=m {
                let xi = fields[(s, 2 * t)];
                let eps = fields[(s, 2 * t + 1)];
                let coefficient = 0.2 + 0.1 * (2.0 * PI * t as f64 / 100.0).sin();
                let latent = trend + coefficient * hb * ht + 0.5 * xi;
                let x = match spec.treatment {
                    TreatmentKind::Continuous => latent,
                    TreatmentKind::Binary { threshold } => f64::from(u8::from(latent > threshold)),
                };
                h_bar.push(hb);
                h_tilde.push(ht);
                treatments.push(Some(x));
                response.push(Some(spec.form.response(x, hb, ht, eps)));
            }
        }
        let cube = DataCube::from_parts(CubeParts {
            locations: self.locations.clone(),
            m,
            time_origin: 1,
            names: VariableNames::default_for(1, 0),
            response,
            treatments,
            covariates: vec![],
        })?;
        Ok(Simulation {
            cube,
            hidden: HiddenRecord {
                zeta,
                psi,
                h_bar,
                h_tilde,
            },
        })
    }
}

/// Simulates an observational dataset from `spec`.
pub fn simulate_lscm(spec: &LscmSpec) -> Result<Simulation> {
    spec.validate()?;
    LscmSimulator::for_spec(spec)?.simulate(spec)
}

/// Draws of `Y_s^t` under the intervention `do(X_s^t = x)`.
///
/// Each draw takes fresh latent values and noise at a single location; the
/// fields have unit marginal variance, so `zeta`, `psi` and `eps` are
/// independent standard normals there.
pub fn simulate_intervention(form: StructuralForm, x: f64, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0);
    let half_sqrt3 = 3f64.sqrt() / 2.0;
    (0..draws)
        .map(|_| {
            let zeta: f64 = rng.sample(StandardNormal);
            let psi: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let h_tilde = 1.0 + 0.5 * zeta + half_sqrt3 * psi;
            form.response(x, zeta, h_tilde, eps)
        })
        .collect()
}
