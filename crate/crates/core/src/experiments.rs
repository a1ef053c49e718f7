//! Seeded Monte Carlo studies: consistency of the per-location estimator,
//! its contrast with pooled regression, the level of the permutation test
//! and the interventional mean check.
//!
//! Every replicate draws its seed from the master seed before any work is
//! scheduled, so tables do not depend on the number of threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimators::{estimate_ace, estimate_pooled_ols, BasisSpec, EstimatorConfig};
use crate::gp_sim::{
    simulate_intervention, CovarianceModel, GridSampling, LscmSimulator, LscmSpec, StructuralForm, TreatmentKind,
};
use crate::resampling::{run_test, PermutationScheme, Resamples};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStudySpec {
    /// Side lengths of the square grids `{1..side}^2` (so `n = side^2`).
    pub sides: Vec<usize>,
    pub m_values: Vec<usize>,
    pub replicates: usize,
    /// Error radius; `f64::INFINITY` counts no replicate as a failure.
    pub delta: f64,
    pub beta: [f64; 2],
    #[serde(default)]
    pub covariance: CovarianceModel,
    pub seed: u64,
}

impl ConsistencyStudySpec {
    pub const DEFAULT_SIDES: [usize; 5] = [5, 10, 15, 20, 25];
    pub const DEFAULT_M: [usize; 5] = [25, 50, 100, 200, 500];

    pub fn new(seed: u64) -> Self {
        Self {
            sides: Self::DEFAULT_SIDES.to_vec(),
            m_values: Self::DEFAULT_M.to_vec(),
            replicates: 100,
            delta: 0.2,
            beta: [1.0, 2.0],
            covariance: CovarianceModel::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::Config(format!("error radius must be positive, got {}", self.delta)));
        }
        if self.sides.is_empty() || self.m_values.is_empty() {
            return Err(Error::Config("study needs at least one grid size and one time length".into()));
        }
        if self.sides.contains(&0) || self.m_values.iter().any(|&m| m < 2) {
            return Err(Error::Config("grid sides must be positive and time lengths at least 2".into()));
        }
        self.covariance.validate()
    }

    /// Seed of replicate `r` in cell `(n, m)`.
    pub fn replicate_seed(&self, n: usize, m: usize, r: usize) -> u64 {
        derive_seed(self.seed, &[n as u64, m as u64, r as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub m: usize,
    pub replicates: usize,
    pub failures: usize,
    pub error_probability: f64,
}

/// Per-replicate outcome of the consistency and contrast studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub n: usize,
    pub m: usize,
    pub replicate: usize,
    pub seed: u64,
    pub beta0: f64,
    pub beta1: f64,
    /// `||beta_hat - beta||_2`.
    pub error: f64,
    pub pooled_slope: f64,
}

fn run_cells<T: Send>(
    spec: &ConsistencyStudySpec,
    job: impl Fn(&LscmSimulator, &LscmSpec, usize) -> Result<T> + Sync,
) -> Result<Vec<(usize, usize, Vec<T>)>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &side in &spec.sides {
        let grid = GridSampling::square(side);
        let simulator = LscmSimulator::new(grid, spec.covariance)?;
        let n = grid.n();
        for &m in &spec.m_values {
            let results: Vec<Result<T>> = (0..spec.replicates)
                .into_par_iter()
                .map(|r| {
                    let mut lscm = LscmSpec::example(grid, m, spec.replicate_seed(n, m, r));
                    lscm.covariance = spec.covariance;
                    job(&simulator, &lscm, r).map_err(|e| e.context(format!("n = {n}, m = {m}, replicate {r}")))
                })
                .collect();
            out.push((n, m, results.into_iter().collect::<Result<Vec<T>>>()?));
        }
    }
    Ok(out)
}

fn replicate(simulator: &LscmSimulator, lscm: &LscmSpec, r: usize, beta: [f64; 2]) -> Result<ReplicateOutcome> {
    let cube = simulator.simulate(lscm)?.cube;
    let basis = BasisSpec::linear(1);
    let estimate = estimate_ace(&cube, &basis)?;
    let b = estimate.coefficients().expect("basis estimate");
    let pooled = estimate_pooled_ols(&cube, &basis)?;
    Ok(ReplicateOutcome {
        n: cube.n(),
        m: cube.m(),
        replicate: r,
        seed: lscm.seed,
        beta0: b[0],
        beta1: b[1],
        error: (b[0] - beta[0]).hypot(b[1] - beta[1]),
        pooled_slope: pooled.coefficients().expect("basis estimate")[1],
    })
}

/// Every replicate of every `(n, m)` cell, in cell then replicate order.
pub fn run_consistency_replicates(spec: &ConsistencyStudySpec) -> Result<Vec<ReplicateOutcome>> {
    let cells = run_cells(spec, |sim, lscm, r| replicate(sim, lscm, r, spec.beta))?;
    Ok(cells.into_iter().flat_map(|(_, _, v)| v).collect())
}

/// Fraction of replicates with `||beta_hat - beta||_2 > delta` per cell.
pub fn run_consistency_study(spec: &ConsistencyStudySpec) -> Result<Vec<ConsistencyRow>> {
    Ok(summarize_consistency(spec, &run_consistency_replicates(spec)?))
}

pub fn summarize_consistency(spec: &ConsistencyStudySpec, outcomes: &[ReplicateOutcome]) -> Vec<ConsistencyRow> {
    let mut rows: Vec<ConsistencyRow> = Vec::new();
    for o in outcomes {
        if rows.last().is_none_or(|r| (r.n, r.m) != (o.n, o.m)) {
            rows.push(ConsistencyRow {
                n: o.n,
                m: o.m,
                replicates: 0,
                failures: 0,
                error_probability: 0.0,
            });
        }
        let row = rows.last_mut().unwrap();
        row.replicates += 1;
        row.failures += usize::from(o.error > spec.delta);
    }
    for row in &mut rows {
        row.error_probability = row.failures as f64 / row.replicates as f64;
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    pub replicates: usize,
    /// Replicates where `|pooled slope - beta1| > |beta1_hat - beta1|`.
    pub pooled_worse: usize,
    pub mean_lscm_error: f64,
    pub mean_pooled_error: f64,
}

/// Compares the slope error of the per-location estimator with that of
/// pooled regression on the same replicates.
pub fn confounding_contrast(outcomes: &[ReplicateOutcome], beta1: f64) -> ContrastSummary {
    let k = outcomes.len().max(1) as f64;
    let lscm: Vec<f64> = outcomes.iter().map(|o| (o.beta1 - beta1).abs()).collect();
    let pooled: Vec<f64> = outcomes.iter().map(|o| (o.pooled_slope - beta1).abs()).collect();
    ContrastSummary {
        replicates: outcomes.len(),
        pooled_worse: lscm.iter().zip(&pooled).filter(|(a, b)| b > a).count(),
        mean_lscm_error: lscm.iter().sum::<f64>() / k,
        mean_pooled_error: pooled.iter().sum::<f64>() / k,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStudySpec {
    /// Null-form dataset; its seed is replaced per replicate.
    pub data: LscmSpec,
    pub alpha: f64,
    pub resamples: usize,
    pub replicates: usize,
    pub scheme: PermutationScheme,
    pub seed: u64,
}

impl LevelStudySpec {
    /// Binary-treatment null data on a `side x side` grid.
    pub fn binary_null(side: usize, m: usize, threshold: f64, seed: u64) -> Self {
        Self {
            data: LscmSpec {
                grid: GridSampling::square(side),
                m,
                form: StructuralForm::Null,
                treatment: TreatmentKind::Binary { threshold },
                covariance: CovarianceModel::default(),
                seed: 0,
            },
            alpha: 0.05,
            resamples: 199,
            replicates: 500,
            scheme: PermutationScheme::TimeFull,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.data.form != StructuralForm::Null {
            return Err(Error::Config("level study needs the null structural form".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.resamples == 0 || self.replicates == 0 {
            return Err(Error::Config("resamples and replicates must be positive".into()));
        }
        Ok(())
    }

    /// `f(1) - f(0)` for binary data, the slope for continuous data.
    pub fn statistic(&self) -> EstimatorConfig {
        match self.data.treatment {
            TreatmentKind::Binary { .. } => EstimatorConfig::LscmBinary { lag: 0 },
            TreatmentKind::Continuous => EstimatorConfig::LscmBasis { degree: 1, lag: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStudyResult {
    pub replicates: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Exact (Clopper-Pearson) 95% interval for the rejection probability.
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_values: Vec<f64>,
}

/// Clopper-Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: usize, n: usize, confidence: f64) -> (f64, f64) {
    let tail = (1.0 - confidence) / 2.0;
    let lower = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64).map_or(0.0, |b| b.inverse_cdf(tail))
    };
    let upper = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64).map_or(1.0, |b| b.inverse_cdf(1.0 - tail))
    };
    (lower, upper)
}

/// Rejection rate of the one-sided permutation test on null datasets.
pub fn run_level_study(spec: &LevelStudySpec) -> Result<LevelStudyResult> {
    spec.validate()?;
    let simulator = LscmSimulator::for_spec(&spec.data)?;
    let statistic = spec.statistic();
    let p_values = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            let mut data = spec.data.clone();
            data.seed = derive_seed(spec.seed, &[0, r as u64]);
            let cube = simulator.simulate(&data)?.cube;
            let test_seed = derive_seed(spec.seed, &[1, r as u64]);
            run_test(&cube, &statistic, &spec.scheme, Resamples::Random(spec.resamples), test_seed)
                .map(|t| t.p_one_sided)
                .map_err(|e| e.context(format!("replicate {r}")))
        })
        .collect::<Vec<Result<f64>>>()
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let rejections = p_values.iter().filter(|&&p| p <= spec.alpha).count();
    let (ci_lower, ci_upper) = clopper_pearson(rejections, spec.replicates, 0.95);
    Ok(LevelStudyResult {
        replicates: spec.replicates,
        rejections,
        rejection_rate: rejections as f64 / spec.replicates as f64,
        ci_lower,
        ci_upper,
        p_values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub x: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub analytic: f64,
    pub flagged: bool,
}

/// Monte Carlo means of `Y` under `do(X = x)` against the analytic effect.
/// Each `x` uses its own seed derived from `seed`.
pub fn run_intervention_check(form: StructuralForm, xs: &[f64], draws: usize, seed: u64) -> Result<Vec<InterventionRow>> {
    if draws < 2 {
        return Err(Error::Config("intervention check needs at least two draws".into()));
    }
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ys = simulate_intervention(form, x, draws, derive_seed(seed, &[i as u64]));
            let k = ys.len() as f64;
            let mean = ys.iter().sum::<f64>() / k;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (k - 1.0);
            let se = (var / k).sqrt();
            let analytic = form.analytic_ave(x);
            InterventionRow {
                x,
                mc_mean: mean,
                mc_se: se,
                analytic,
                flagged: (mean - analytic).abs() > 3.0 * se,
            }
        })
        .collect())
}

/// Writes rows as CSV with a header row.
pub fn write_table<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Config(format!("cannot write table: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
