//! Average causal effect estimators.
//!
//! The main estimator fits a regression of `Y` on a known basis `phi(X)`
//! separately at every location, where the latent confounders are constant,
//! and averages the fitted curves over space. Because predictions are
//! linear in the coefficients, the average curve is `phi(x)^T beta` with
//! `beta` the mean of the per-location coefficient vectors.
//!
//! For binary treatments the per-location fit reduces to regime means and
//! locations that never observe one of the regimes are excluded. Pooled
//! (no adjustment) and covariate-stratified baselines are provided for
//! comparison.

mod basis;
mod binning;
mod ols;
mod regimes;
mod surface;

use serde::{Deserialize, Serialize};

use crate::datacube::DataCube;
use crate::error::{Error, Result};
use crate::resampling::Statistic;

pub use basis::{BasisFn, BasisSpec};
pub use binning::quantile_bins;
pub use ols::{fit_location_ols, RANK_TOLERANCE};
pub use regimes::{estimate_ace_binary, estimate_model1, estimate_model2};
pub use surface::{
    estimate_ace, estimate_ace_lagged, estimate_ace_observed_confounder, estimate_pooled_ols, pooled_covariates,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    Excluded { reason: String },
    RankDeficient,
}

/// Result of the regression at one location.
///
/// For basis fits `coefficients` has length `p` and `counts` holds the
/// number of usable time steps; for binary fits they are the per-regime
/// response means and observation counts for `x = 0, 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationFit {
    pub id: String,
    pub status: FitStatus,
    pub coefficients: Vec<f64>,
    pub counts: Vec<usize>,
    pub min_singular_value: Option<f64>,
}

impl LocationFit {
    pub fn is_ok(&self) -> bool {
        self.status == FitStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelValue {
    pub x: f64,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub requested: usize,
    pub used: usize,
    /// Non-empty bins dropped for lacking one of the regimes.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Representation {
    /// `f(x) = phi(x)^T coefficients`.
    BasisCoefficients { names: Vec<String>, coefficients: Vec<f64> },
    /// Mean coefficients of a basis over `(x, w)`; `f(x)` additionally
    /// averages over the pooled covariate sample (see `evaluations`).
    AdjustedCoefficients {
        names: Vec<String>,
        coefficients: Vec<f64>,
        covariate_sample_size: usize,
    },
    ValueTable { levels: Vec<LevelValue> },
}

/// Estimated average causal effect `x -> f(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimator: String,
    pub lag: usize,
    pub representation: Representation,
    /// `f` at selected points; for one-dimensional treatments this always
    /// includes `x = 0` and `x = 1`.
    pub evaluations: Vec<Evaluation>,
    pub n_used: usize,
    pub n_total: usize,
    pub bins: Option<BinSummary>,
    pub fits: Vec<LocationFit>,
}

impl EffectEstimate {
    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.representation {
            Representation::BasisCoefficients { coefficients, .. }
            | Representation::AdjustedCoefficients { coefficients, .. } => Some(coefficients),
            Representation::ValueTable { .. } => None,
        }
    }

    /// `f(x)` for a basis estimate, `phi(x)^T beta`.
    pub fn evaluate(&self, basis: &BasisSpec, x: &[f64]) -> Result<f64> {
        match &self.representation {
            Representation::BasisCoefficients { coefficients, .. } => {
                if basis.len() != coefficients.len() || basis.input_dim() != x.len() {
                    return Err(Error::Precondition("basis does not match the estimate".into()));
                }
                Ok(basis.predict(coefficients, x))
            }
            _ => Err(Error::Precondition(format!(
                "{} estimates cannot be evaluated from a basis alone",
                self.estimator
            ))),
        }
    }

    /// `f(x)` for a scalar treatment value, from the value table or the
    /// stored evaluations.
    pub fn value_at(&self, x: f64) -> Option<f64> {
        if let Representation::ValueTable { levels } = &self.representation {
            if let Some(l) = levels.iter().find(|l| l.x == x) {
                return Some(l.value);
            }
        }
        self.evaluations
            .iter()
            .find(|e| e.x.len() == 1 && e.x[0] == x)
            .map(|e| e.value)
    }

    /// `T = f(1) - f(0)`.
    pub fn contrast(&self) -> Result<f64> {
        match (self.value_at(1.0), self.value_at(0.0)) {
            (Some(a), Some(b)) => Ok(a - b),
            _ => Err(Error::Precondition(format!(
                "{} estimate has no values at x = 0 and x = 1",
                self.estimator
            ))),
        }
    }
}

/// Mean coefficient vector over the `ok` fits, summed in fit order.
pub(crate) fn aggregate(fits: &[LocationFit]) -> Result<(Vec<f64>, usize)> {
    let mut used = 0;
    let mut sum: Vec<f64> = Vec::new();
    for fit in fits.iter().filter(|f| f.is_ok()) {
        if sum.is_empty() {
            sum = vec![0.0; fit.coefficients.len()];
        }
        for (s, c) in sum.iter_mut().zip(&fit.coefficients) {
            *s += c;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Estimation("no usable locations".into()));
    }
    Ok((sum.into_iter().map(|s| s / used as f64).collect(), used))
}

/// Estimator selection shared by the CLI, the test statistics and the studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "kebab-case")]
pub enum EstimatorConfig {
    /// Per-location polynomial regression of `Y^t` on `X^{t-lag}`.
    LscmBasis { degree: usize, lag: usize },
    LscmBinary { lag: usize },
    Model1,
    Model2 { n_bins: usize, covariate: usize },
    /// Per-location polynomial regression on `(X, W)`, averaged over the
    /// pooled `W` sample.
    ObservedConfounder { degree: usize },
    /// Polynomial regression pooled over all cells (no adjustment).
    Pooled { degree: usize },
}

impl EstimatorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorConfig::LscmBasis { .. } => "lscm-basis",
            EstimatorConfig::LscmBinary { .. } => "lscm-binary",
            EstimatorConfig::Model1 => "model1",
            EstimatorConfig::Model2 { .. } => "model2",
            EstimatorConfig::ObservedConfounder { .. } => "observed-confounder",
            EstimatorConfig::Pooled { .. } => "pooled",
        }
    }

    pub fn needs_binary_treatment(&self) -> bool {
        matches!(
            self,
            EstimatorConfig::LscmBinary { .. } | EstimatorConfig::Model1 | EstimatorConfig::Model2 { .. }
        )
    }

    /// Checks that the estimator is applicable to the cube's shape.
    pub fn validate_for(&self, cube: &DataCube) -> Result<()> {
        let degree = match self {
            EstimatorConfig::LscmBasis { degree, .. }
            | EstimatorConfig::ObservedConfounder { degree }
            | EstimatorConfig::Pooled { degree } => Some(*degree),
            _ => None,
        };
        if degree == Some(0) {
            return Err(Error::Config("polynomial degree must be at least 1".into()));
        }
        match self {
            EstimatorConfig::LscmBasis { lag, .. } | EstimatorConfig::LscmBinary { lag } if *lag >= cube.m() => {
                Err(Error::Config(format!("lag {lag} must be smaller than m = {}", cube.m())))
            }
            EstimatorConfig::Model2 { n_bins, covariate } => {
                if *n_bins == 0 {
                    return Err(Error::Config("number of bins must be positive".into()));
                }
                if *covariate >= cube.p() {
                    return Err(Error::Config(format!(
                        "model2 needs covariate #{covariate}, cube has {}",
                        cube.p()
                    )));
                }
                Ok(())
            }
            EstimatorConfig::ObservedConfounder { .. } if cube.p() == 0 => {
                Err(Error::Precondition("observed-confounder estimator needs covariates".into()))
            }
            _ => Ok(()),
        }?;
        if cube.d() != 1 && !matches!(self, EstimatorConfig::LscmBasis { .. }) {
            return Err(Error::Config(format!(
                "{} needs a one-dimensional treatment, cube has d = {}",
                self.name(),
                cube.d()
            )));
        }
        Ok(())
    }

    pub fn estimate(&self, cube: &DataCube) -> Result<EffectEstimate> {
        self.validate_for(cube)?;
        match *self {
            EstimatorConfig::LscmBasis { degree, lag } => {
                estimate_ace_lagged(cube, &BasisSpec::polynomial(degree, cube.d()), lag)
            }
            EstimatorConfig::LscmBinary { lag } => estimate_ace_binary(cube, lag),
            EstimatorConfig::Model1 => estimate_model1(cube),
            EstimatorConfig::Model2 { n_bins, covariate } => estimate_model2(cube, n_bins, covariate),
            EstimatorConfig::ObservedConfounder { degree } => {
                let names: Vec<String> = cube
                    .names()
                    .treatments
                    .iter()
                    .chain(&cube.names().covariates)
                    .cloned()
                    .collect();
                estimate_ace_observed_confounder(cube, &BasisSpec::polynomial_named(degree, &names), &[vec![0.0], vec![1.0]])
            }
            EstimatorConfig::Pooled { degree } => estimate_pooled_ols(cube, &BasisSpec::polynomial(degree, cube.d())),
        }
    }
}

impl Statistic for EstimatorConfig {
    fn name(&self) -> String {
        format!("{}:f(1)-f(0)", EstimatorConfig::name(self))
    }

    fn evaluate(&self, cube: &DataCube) -> Result<f64> {
        match *self {
            EstimatorConfig::LscmBinary { lag } => regimes::binary_contrast(cube, lag),
            _ => self.estimate(cube)?.contrast(),
        }
    }

    fn prepare<'a>(&'a self, cube: &DataCube) -> Result<Box<dyn Fn(&DataCube) -> Result<f64> + Sync + 'a>> {
        self.validate_for(cube)?;
        match *self {
            EstimatorConfig::Model2 { n_bins, covariate } => {
                let bins = regimes::covariate_bins(cube, n_bins, covariate);
                Ok(Box::new(move |c: &DataCube| {
                    regimes::model2_with_bins(c, &bins, n_bins).map(|r| r.values[1] - r.values[0])
                }))
            }
            _ => Ok(Box::new(move |c: &DataCube| self.evaluate(c))),
        }
    }
}
