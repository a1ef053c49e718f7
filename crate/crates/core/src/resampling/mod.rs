//! Permutation tests for the null hypothesis of no causal effect.
//!
//! Under the null the response at a location is exchangeable along time,
//! so permuting `Y` over time (with one permutation shared by all
//! locations) leaves the joint law of the data unchanged. Comparing a
//! statistic on the observed cube with its values on `B` resampled cubes
//! gives the p-value `(1 + #{T_b >= T}) / (1 + B)`, which has finite-sample
//! level for continuous statistics. Ties count toward the `>=` set.
//!
//! Resample `b` uses random stream `b` of the test seed, so results do not
//! depend on how the rayon pool schedules evaluations.

mod schemes;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacube::DataCube;
use crate::error::{Error, Result};
use crate::seeds::stream_rng;

pub use schemes::{CellPermutation, PermutationScheme, PreparedScheme};

pub const DEFAULT_RESAMPLES: usize = 999;
pub const DEFAULT_ENUMERATION_CAP: usize = 5040;

/// Real-valued test statistic on cubes.
pub trait Statistic: Sync {
    fn name(&self) -> String;

    fn evaluate(&self, cube: &DataCube) -> Result<f64>;

    /// Evaluator for `cube` and its resamples, which share the cube's
    /// treatments and covariates. Implementations may cache work that only
    /// depends on those.
    #[allow(clippy::type_complexity)]
    fn prepare<'a>(&'a self, _cube: &DataCube) -> Result<Box<dyn Fn(&DataCube) -> Result<f64> + Sync + 'a>> {
        Ok(Box::new(move |c: &DataCube| self.evaluate(c)))
    }
}

/// Statistic from a closure.
pub struct FnStatistic<F> {
    name: String,
    f: F,
}

impl<F> FnStatistic<F>
where
    F: Fn(&DataCube) -> Result<f64> + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Statistic for FnStatistic<F>
where
    F: Fn(&DataCube) -> Result<f64> + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn evaluate(&self, cube: &DataCube) -> Result<f64> {
        (self.f)(cube)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resamples {
    /// `B` independent uniform draws from the scheme.
    Random(usize),
    /// Every non-identity permutation of the time axis once (`B = m! - 1`);
    /// the p-value then equals the exact enumeration p-value.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: String,
    pub statistic_observed: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub p_one_sided: f64,
    pub p_two_sided: f64,
    pub ties_count: usize,
    pub exhaustive: bool,
    pub scheme: PermutationScheme,
    pub seed: u64,
    pub statistics_resampled: Vec<f64>,
}

/// One- and two-sided permutation p-values and the number of exact ties.
pub fn permutation_p_values(observed: f64, resampled: &[f64]) -> (f64, f64, usize) {
    let denom = (1 + resampled.len()) as f64;
    let ge = resampled.iter().filter(|&&t| t >= observed).count();
    let le = resampled.iter().filter(|&&t| t <= observed).count();
    let ties = resampled.iter().filter(|&&t| t == observed).count();
    let upper = (1 + ge) as f64 / denom;
    let lower = (1 + le) as f64 / denom;
    (upper, (2.0 * upper.min(lower)).min(1.0), ties)
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("{what} is not finite ({value})")))
    }
}

/// Permutes the response of `cube` with one draw of `scheme`.
pub fn apply_permutation(cube: &DataCube, scheme: &PermutationScheme, seed: u64) -> Result<DataCube> {
    let prepared = scheme.prepare(cube)?;
    prepared.draw(&mut stream_rng(seed, 0)).apply(cube)
}

fn evaluate_all<T: Sync>(
    items: &[T],
    eval: impl Fn(&T) -> Result<f64> + Sync,
) -> Result<Vec<f64>> {
    let results: Vec<Result<f64>> = items.par_iter().map(&eval).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.and_then(|v| finite(v, "resampled statistic")).map_err(|e| Error::Resample {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

fn factorial_capped(m: usize, cap: usize) -> Option<usize> {
    (1..=m).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&v| v <= cap))
}

/// All permutations of `0..m` in lexicographic order (identity first).
fn all_permutations(m: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..m).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..m).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..m).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

/// Permutation test of `statistic` under `scheme`.
pub fn run_test(
    cube: &DataCube,
    statistic: &dyn Statistic,
    scheme: &PermutationScheme,
    resamples: Resamples,
    seed: u64,
) -> Result<TestResult> {
    let eval = statistic.prepare(cube)?;
    let observed = finite(eval(cube)?, "observed statistic")?;
    let (resampled, exhaustive) = match resamples {
        Resamples::Random(b) => {
            if b == 0 {
                return Err(Error::Config("number of resamples must be positive".into()));
            }
            let prepared = scheme.prepare(cube)?;
            let indices: Vec<u64> = (0..b as u64).collect();
            let stats = evaluate_all(&indices, |&k| {
                let perm = prepared.draw(&mut stream_rng(seed, k));
                eval(&perm.apply(cube)?)
            })?;
            (stats, false)
        }
        Resamples::Exhaustive => {
            if *scheme != PermutationScheme::TimeFull {
                return Err(Error::Config("exhaustive resampling is only defined for the time_full scheme".into()));
            }
            let perms = exhaustive_permutations(cube.m(), DEFAULT_ENUMERATION_CAP)?;
            let stats = evaluate_all(&perms[1..], |sigma| {
                eval(&CellPermutation::from_time_permutation(cube.n(), sigma).apply(cube)?)
            })?;
            (stats, true)
        }
    };
    let (p_one_sided, p_two_sided, ties_count) = permutation_p_values(observed, &resampled);
    Ok(TestResult {
        statistic: statistic.name(),
        statistic_observed: observed,
        b: resampled.len(),
        p_one_sided,
        p_two_sided,
        ties_count,
        exhaustive,
        scheme: scheme.clone(),
        seed,
        statistics_resampled: resampled,
    })
}

fn exhaustive_permutations(m: usize, cap: usize) -> Result<Vec<Vec<usize>>> {
    if factorial_capped(m, cap).is_none() {
        return Err(Error::Config(format!(
            "m! for m = {m} exceeds the enumeration cap {cap}; use random resampling (run_test with B draws) instead"
        )));
    }
    Ok(all_permutations(m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactTest {
    pub statistic_observed: f64,
    /// `M = m!`, including the identity.
    pub permutations: usize,
    pub count_ge: usize,
    pub p_value: f64,
}

/// Exact permutation p-value `#{k : T(sigma_k) >= T} / m!` over all time
/// permutations (identity included). Refuses when `m!` exceeds `cap`.
pub fn enumerate_exact(cube: &DataCube, statistic: &dyn Statistic, cap: usize) -> Result<ExactTest> {
    let perms = exhaustive_permutations(cube.m(), cap)?;
    let eval = statistic.prepare(cube)?;
    let observed = finite(eval(cube)?, "observed statistic")?;
    let stats = evaluate_all(&perms, |sigma| {
        eval(&CellPermutation::from_time_permutation(cube.n(), sigma).apply(cube)?)
    })?;
    let count_ge = stats.iter().filter(|&&t| t >= observed).count();
    Ok(ExactTest {
        statistic_observed: observed,
        permutations: perms.len(),
        count_ge,
        p_value: count_ge as f64 / perms.len() as f64,
    })
}
