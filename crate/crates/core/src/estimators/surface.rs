use rayon::prelude::*;

use super::ols::{build_design, solve_least_squares};
use super::{aggregate, fit_location_ols, BasisSpec, EffectEstimate, Evaluation, LocationFit, Representation};
use crate::datacube::DataCube;
use crate::error::{Error, Result};

fn check_dim(cube: &DataCube, basis: &BasisSpec, expected: usize) -> Result<()> {
    if basis.input_dim() != expected {
        return Err(Error::Precondition(format!(
            "basis takes {}-dimensional input, the cube provides {expected}",
            basis.input_dim()
        )));
    }
    if cube.n() == 0 {
        return Err(Error::Estimation("no usable locations".into()));
    }
    Ok(())
}

fn unit_evaluations(basis: &BasisSpec, coefficients: &[f64]) -> Vec<Evaluation> {
    if basis.input_dim() != 1 {
        return vec![];
    }
    [0.0, 1.0]
        .into_iter()
        .map(|x| Evaluation {
            x: vec![x],
            value: basis.predict(coefficients, &[x]),
        })
        .collect()
}

fn fit_all(cube: &DataCube, basis: &BasisSpec, series: impl Fn(usize) -> Vec<Option<f64>> + Sync) -> Result<Vec<LocationFit>> {
    cube.locations()
        .par_iter()
        .enumerate()
        .map(|(s, loc)| fit_location_ols(&loc.id, &series(s), cube.response_series(s), basis))
        .collect()
}

/// Per-location basis regression averaged over space.
pub fn estimate_ace(cube: &DataCube, basis: &BasisSpec) -> Result<EffectEstimate> {
    estimate_ace_lagged(cube, basis, 0)
}

/// As [`estimate_ace`], regressing `Y^t` on `phi(X^{t-lag})`.
pub fn estimate_ace_lagged(cube: &DataCube, basis: &BasisSpec, lag: usize) -> Result<EffectEstimate> {
    check_dim(cube, basis, cube.d())?;
    let shifted;
    let cube = if lag > 0 {
        shifted = cube.with_shifted_treatments(lag)?;
        &shifted
    } else {
        cube
    };
    let fits = fit_all(cube, basis, |s| cube.treatment_series(s).to_vec())?;
    let (coefficients, n_used) = aggregate(&fits)?;
    Ok(EffectEstimate {
        estimator: "lscm-basis".into(),
        lag,
        evaluations: unit_evaluations(basis, &coefficients),
        representation: Representation::BasisCoefficients {
            names: basis.names().to_vec(),
            coefficients,
        },
        n_used,
        n_total: cube.n(),
        bins: None,
        fits,
    })
}

/// All covariate vectors with every component observed, in cube order.
pub fn pooled_covariates(cube: &DataCube) -> Vec<Vec<f64>> {
    let p = cube.p();
    cube.covariates()
        .chunks(p.max(1))
        .filter_map(|w| w.iter().copied().collect::<Option<Vec<f64>>>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Per-location regression of `Y` on a basis over `(X, W)`.
///
/// `f(x)` averages the fitted surfaces over the pooled empirical distribution
/// of `W` (all cells with `W` observed), then over locations. Since the
/// surface is linear in the coefficients, this equals the pooled-`W` average
/// of `phi(x, w)^T beta` with `beta` the mean coefficient vector. The
/// estimate is reported at `eval_points`.
pub fn estimate_ace_observed_confounder(
    cube: &DataCube,
    basis: &BasisSpec,
    eval_points: &[Vec<f64>],
) -> Result<EffectEstimate> {
    let (d, p) = (cube.d(), cube.p());
    if p == 0 {
        return Err(Error::Precondition("observed-confounder estimator needs covariates".into()));
    }
    check_dim(cube, basis, d + p)?;
    if let Some(x) = eval_points.iter().find(|x| x.len() != d) {
        return Err(Error::Precondition(format!("evaluation point {x:?} is not {d}-dimensional")));
    }
    let fits = fit_all(cube, basis, |s| {
        let xs = cube.treatment_series(s);
        let ws = cube.covariate_series(s);
        (0..cube.m())
            .flat_map(|t| xs[t * d..(t + 1) * d].iter().chain(&ws[t * p..(t + 1) * p]).copied())
            .collect()
    })?;
    let (coefficients, n_used) = aggregate(&fits)?;
    let pool = pooled_covariates(cube);
    if pool.is_empty() {
        return Err(Error::Estimation("no cell has all covariates observed".into()));
    }
    let mut z = vec![0.0; d + p];
    let evaluations = eval_points
        .iter()
        .map(|x| {
            z[..d].copy_from_slice(x);
            let total: f64 = pool
                .iter()
                .map(|w| {
                    z[d..].copy_from_slice(w);
                    basis.predict(&coefficients, &z)
                })
                .sum();
            Evaluation {
                x: x.clone(),
                value: total / pool.len() as f64,
            }
        })
        .collect();
    Ok(EffectEstimate {
        estimator: "observed-confounder".into(),
        lag: 0,
        representation: Representation::AdjustedCoefficients {
            names: basis.names().to_vec(),
            coefficients,
            covariate_sample_size: pool.len(),
        },
        evaluations,
        n_used,
        n_total: cube.n(),
        bins: None,
        fits,
    })
}

/// One basis regression over all cells, ignoring location.
pub fn estimate_pooled_ols(cube: &DataCube, basis: &BasisSpec) -> Result<EffectEstimate> {
    check_dim(cube, basis, cube.d())?;
    let (design, y) = build_design(cube.treatments(), cube.response(), basis);
    let sol = solve_least_squares(design, y);
    if sol.status != super::FitStatus::Ok {
        return Err(Error::Estimation(format!("pooled regression failed: {:?}", sol.status)));
    }
    Ok(EffectEstimate {
        estimator: "pooled".into(),
        lag: 0,
        evaluations: unit_evaluations(basis, &sol.coefficients),
        representation: Representation::BasisCoefficients {
            names: basis.names().to_vec(),
            coefficients: sol.coefficients,
        },
        n_used: cube.n(),
        n_total: cube.n(),
        bins: None,
        fits: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::{CubeParts, Location, VariableNames};
    use crate::estimators::FitStatus;

    fn cube_from(rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>) -> DataCube {
        let m = rows[0].0.len();
        let p = usize::from(!rows[0].2.is_empty());
        DataCube::from_parts(CubeParts {
            locations: (0..rows.len()).map(|i| Location::new(format!("l{i}"), i as f64, 0.0)).collect(),
            m,
            time_origin: 1,
            names: VariableNames::default_for(1, p),
            response: rows.iter().flat_map(|r| r.1.iter().map(|&v| Some(v))).collect(),
            treatments: rows.iter().flat_map(|r| r.0.iter().map(|&v| Some(v))).collect(),
            covariates: rows.iter().flat_map(|r| r.2.iter().map(|&v| Some(v))).collect(),
        })
        .unwrap()
    }

    #[test]
    fn mean_of_two_exact_fits() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let c = cube_from(vec![
            (x.clone(), x.iter().map(|v| 1.0 + 2.0 * v).collect(), vec![]),
            (x.clone(), x.iter().map(|v| 3.0 + 4.0 * v).collect(), vec![]),
        ]);
        let e = estimate_ace(&c, &BasisSpec::linear(1)).unwrap();
        let b = e.coefficients().unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] - 3.0).abs() < 1e-12);
        assert!((e.evaluate(&BasisSpec::linear(1), &[2.0]).unwrap() - 8.0).abs() < 1e-12);
        assert!((e.contrast().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_response_gives_intercept_only() {
        let c = cube_from(vec![
            (vec![0.3, 1.2, -0.4, 2.0], vec![7.0; 4], vec![]),
            (vec![1.0, 5.0, 2.0, 0.0], vec![7.0; 4], vec![]),
        ]);
        let e = estimate_ace(&c, &BasisSpec::polynomial(2, 1)).unwrap();
        let b = e.coefficients().unwrap();
        assert!((b[0] - 7.0).abs() < 1e-12);
        assert!(b[1].abs() < 1e-12 && b[2].abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_locations_are_excluded() {
        let c = cube_from(vec![
            (vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], vec![]),
            (vec![1.0, 1.0, 1.0], vec![1.0, 2.0, 3.0], vec![]),
        ]);
        let e = estimate_ace(&c, &BasisSpec::linear(1)).unwrap();
        assert_eq!((e.n_used, e.n_total), (1, 2));
        assert_eq!(e.fits[1].status, FitStatus::RankDeficient);
        let c = cube_from(vec![(vec![1.0, 1.0], vec![1.0, 2.0], vec![])]);
        assert!(matches!(estimate_ace(&c, &BasisSpec::linear(1)), Err(Error::Estimation(_))));
    }

    #[test]
    fn lagged_regression_uses_earlier_treatment() {
        let x = vec![0.5, 1.0, -2.0, 3.0, 0.0, 1.5];
        let mut y = vec![100.0];
        y.extend(x.windows(2).map(|w| 1.0 - 2.0 * w[0]));
        let c = cube_from(vec![(x, y, vec![])]);
        let e = estimate_ace_lagged(&c, &BasisSpec::linear(1), 1).unwrap();
        let b = e.coefficients().unwrap();
        assert!((b[0] - 1.0).abs() < 1e-10 && (b[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn observed_confounder_noiseless_additive() {
        let x = vec![0.0, 1.0, 0.5, 2.0, -1.0, 0.3];
        let w = vec![0.2, -0.7, 1.1, 0.4, -0.5, 0.9];
        let y: Vec<f64> = x.iter().zip(&w).map(|(a, b)| 2.0 + 3.0 * a + b).collect();
        let mean_w = w.iter().sum::<f64>() / w.len() as f64;
        let c = cube_from(vec![(x, y, w)]);
        let basis = BasisSpec::linear(2);
        let e = estimate_ace_observed_confounder(&c, &basis, &[vec![0.0], vec![1.0], vec![-2.0]]).unwrap();
        for ev in &e.evaluations {
            let want = 2.0 + 3.0 * ev.x[0] + mean_w;
            assert!((ev.value - want).abs() < 1e-10, "{ev:?} vs {want}");
        }
    }

    #[test]
    fn observed_confounder_needs_covariates() {
        let c = cube_from(vec![(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], vec![])]);
        assert!(matches!(
            estimate_ace_observed_confounder(&c, &BasisSpec::linear(2), &[]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pooled_regression_ignores_location() {
        let c = cube_from(vec![
            (vec![0.0, 1.0], vec![0.0, 1.0], vec![]),
            (vec![2.0, 3.0], vec![2.0, 3.0], vec![]),
        ]);
        let e = estimate_pooled_ols(&c, &BasisSpec::linear(1)).unwrap();
        let b = e.coefficients().unwrap();
        assert!(b[0].abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12);
    }
}
