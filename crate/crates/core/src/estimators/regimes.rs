use super::{quantile_bins, BinSummary, EffectEstimate, Evaluation, FitStatus, LevelValue, LocationFit, Representation};
use crate::datacube::DataCube;
use crate::error::{Error, Result};

fn check_binary(cube: &DataCube) -> Result<()> {
    if cube.d() != 1 {
        return Err(Error::Precondition(format!(
            "binary estimators need a one-dimensional treatment, cube has d = {}",
            cube.d()
        )));
    }
    if let Some(v) = cube.treatments().iter().flatten().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Precondition(format!("treatment must take values in {{0, 1}}, found {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct RegimeSums {
    sum: [f64; 2],
    count: [usize; 2],
}

impl RegimeSums {
    fn add(&mut self, x: f64, y: f64) {
        let r = usize::from(x == 1.0);
        self.sum[r] += y;
        self.count[r] += 1;
    }

    fn both(&self) -> bool {
        self.count[0] > 0 && self.count[1] > 0
    }

    fn means(&self) -> [f64; 2] {
        [self.sum[0] / self.count[0] as f64, self.sum[1] / self.count[1] as f64]
    }
}

/// Regime sums at location `s` pairing `Y^t` with `X^{t-lag}`.
fn location_sums(cube: &DataCube, s: usize, lag: usize) -> RegimeSums {
    let mut sums = RegimeSums::default();
    let ys = cube.response_series(s);
    let xs = cube.treatment_series(s);
    for t in lag..cube.m() {
        if let (Some(x), Some(y)) = (xs[t - lag], ys[t]) {
            sums.add(x, y);
        }
    }
    sums
}

fn check_lag(cube: &DataCube, lag: usize) -> Result<()> {
    if lag >= cube.m() {
        return Err(Error::Config(format!("lag {lag} must be smaller than m = {}", cube.m())));
    }
    Ok(())
}

fn no_both_regimes() -> Error {
    Error::Estimation("no location observes both regimes".into())
}

pub(crate) fn binary_contrast(cube: &DataCube, lag: usize) -> Result<f64> {
    check_binary(cube)?;
    check_lag(cube, lag)?;
    let mut acc = [0.0; 2];
    let mut used = 0usize;
    for s in 0..cube.n() {
        let sums = location_sums(cube, s, lag);
        if sums.both() {
            let means = sums.means();
            acc[0] += means[0];
            acc[1] += means[1];
            used += 1;
        }
    }
    if used == 0 {
        return Err(no_both_regimes());
    }
    Ok(acc[1] / used as f64 - acc[0] / used as f64)
}

fn table(values: [f64; 2], counts: [usize; 2]) -> (Representation, Vec<Evaluation>) {
    let levels = (0..2)
        .map(|r| LevelValue {
            x: r as f64,
            value: values[r],
            count: counts[r],
        })
        .collect();
    let evaluations = (0..2)
        .map(|r| Evaluation {
            x: vec![r as f64],
            value: values[r],
        })
        .collect();
    (Representation::ValueTable { levels }, evaluations)
}

/// Binary-treatment estimator restricted to locations that observe both
/// regimes.
///
/// Each such location contributes its per-regime mean of `Y`; `f(x)` is the
/// average of these means. With `lag = k`, `Y^t` is paired with `X^{t-k}`
/// and the first `k` time steps are dropped.
pub fn estimate_ace_binary(cube: &DataCube, lag: usize) -> Result<EffectEstimate> {
    check_binary(cube)?;
    check_lag(cube, lag)?;
    let mut acc = [0.0; 2];
    let mut counts = [0usize; 2];
    let mut used = 0usize;
    let fits = cube
        .locations()
        .iter()
        .enumerate()
        .map(|(s, loc)| {
            let sums = location_sums(cube, s, lag);
            if sums.both() {
                let means = sums.means();
                for r in 0..2 {
                    acc[r] += means[r];
                    counts[r] += sums.count[r];
                }
                used += 1;
                LocationFit {
                    id: loc.id.clone(),
                    status: FitStatus::Ok,
                    coefficients: means.to_vec(),
                    counts: sums.count.to_vec(),
                    min_singular_value: None,
                }
            } else {
                let reason = match sums.count {
                    [0, 0] => "no observations",
                    [0, _] => "no observation with x = 0",
                    _ => "no observation with x = 1",
                };
                LocationFit {
                    id: loc.id.clone(),
                    status: FitStatus::Excluded { reason: reason.into() },
                    coefficients: vec![],
                    counts: sums.count.to_vec(),
                    min_singular_value: None,
                }
            }
        })
        .collect();
    if used == 0 {
        return Err(no_both_regimes());
    }
    let values = [acc[0] / used as f64, acc[1] / used as f64];
    let (representation, evaluations) = table(values, counts);
    Ok(EffectEstimate {
        estimator: "lscm-binary".into(),
        lag,
        representation,
        evaluations,
        n_used: used,
        n_total: cube.n(),
        bins: None,
        fits,
    })
}

/// Pooled regime means over all cells, without any adjustment.
pub fn estimate_model1(cube: &DataCube) -> Result<EffectEstimate> {
    check_binary(cube)?;
    let mut sums = RegimeSums::default();
    let mut used = 0;
    for s in 0..cube.n() {
        let before = sums.count[0] + sums.count[1];
        for t in 0..cube.m() {
            if let (Some(x), Some(y)) = (cube.x(s, t, 0), cube.y(s, t)) {
                sums.add(x, y);
            }
        }
        used += usize::from(sums.count[0] + sums.count[1] > before);
    }
    if !sums.both() {
        return Err(Error::Estimation("model1 needs observations in both regimes".into()));
    }
    let (representation, evaluations) = table(sums.means(), sums.count);
    Ok(EffectEstimate {
        estimator: "model1".into(),
        lag: 0,
        representation,
        evaluations,
        n_used: used,
        n_total: cube.n(),
        bins: None,
        fits: vec![],
    })
}

/// Quantile bin of every cell (`s*m + t`) with an observed covariate.
pub(crate) fn covariate_bins(cube: &DataCube, n_bins: usize, covariate: usize) -> Vec<Option<usize>> {
    let cells = cube.n() * cube.m();
    let observed: Vec<(usize, f64)> = (0..cells)
        .filter_map(|c| cube.w(c / cube.m(), c % cube.m(), covariate).map(|w| (c, w)))
        .collect();
    let values: Vec<f64> = observed.iter().map(|&(_, w)| w).collect();
    let mut bins = vec![None; cells];
    for (&(c, _), b) in observed.iter().zip(quantile_bins(&values, n_bins)) {
        bins[c] = Some(b);
    }
    bins
}

pub(crate) struct StratifiedMeans {
    pub values: [f64; 2],
    pub counts: [usize; 2],
    pub used_bins: usize,
    pub dropped_bins: usize,
    pub used_locations: usize,
}

pub(crate) fn model2_with_bins(cube: &DataCube, bins: &[Option<usize>], n_bins: usize) -> Result<StratifiedMeans> {
    check_binary(cube)?;
    let mut strata = vec![RegimeSums::default(); n_bins];
    let mut used_locations = 0;
    for s in 0..cube.n() {
        let mut any = false;
        for t in 0..cube.m() {
            let c = s * cube.m() + t;
            if let (Some(b), Some(x), Some(y)) = (bins[c], cube.x(s, t, 0), cube.y(s, t)) {
                strata[b].add(x, y);
                any = true;
            }
        }
        used_locations += usize::from(any);
    }
    let mut acc = [0.0; 2];
    let mut counts = [0usize; 2];
    let (mut used_bins, mut dropped_bins) = (0, 0);
    for stratum in &strata {
        if stratum.both() {
            let means = stratum.means();
            for r in 0..2 {
                acc[r] += means[r];
                counts[r] += stratum.count[r];
            }
            used_bins += 1;
        } else if stratum.count[0] + stratum.count[1] > 0 {
            dropped_bins += 1;
        }
    }
    if used_bins == 0 {
        return Err(Error::Estimation("no covariate bin contains both regimes".into()));
    }
    Ok(StratifiedMeans {
        values: [acc[0] / used_bins as f64, acc[1] / used_bins as f64],
        counts,
        used_bins,
        dropped_bins,
        used_locations,
    })
}

/// Regime means adjusted for one observed covariate by stratification.
///
/// Cells are split into `n_bins` equal-frequency bins of the pooled
/// covariate; within each bin holding both regimes the regime means of `Y`
/// are computed, and `f(x)` is their unweighted average over bins. Bins
/// lacking a regime are dropped and counted.
pub fn estimate_model2(cube: &DataCube, n_bins: usize, covariate: usize) -> Result<EffectEstimate> {
    if n_bins == 0 {
        return Err(Error::Config("number of bins must be positive".into()));
    }
    if covariate >= cube.p() {
        return Err(Error::Precondition(format!(
            "covariate #{covariate} requested, cube has {}",
            cube.p()
        )));
    }
    let bins = covariate_bins(cube, n_bins, covariate);
    let r = model2_with_bins(cube, &bins, n_bins)?;
    let (representation, evaluations) = table(r.values, r.counts);
    Ok(EffectEstimate {
        estimator: "model2".into(),
        lag: 0,
        representation,
        evaluations,
        n_used: r.used_locations,
        n_total: cube.n(),
        bins: Some(BinSummary {
            requested: n_bins,
            used: r.used_bins,
            dropped: r.dropped_bins,
        }),
        fits: vec![],
    })
}
