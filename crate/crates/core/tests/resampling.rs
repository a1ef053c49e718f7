use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use lscm::datacube::{CubeParts, VariableNames};
use lscm::estimators::quantile_bins;
use lscm::gp_sim::{GridSampling, LscmSimulator, LscmSpec, StructuralForm, TreatmentKind};
use lscm::resampling::{run_test, FnStatistic, Resamples};
use lscm::seeds::{derive_seed, stream_rng};
use lscm::{DataCube, EstimatorConfig, Location, PermutationScheme};

/// Lattice cube whose response value encodes its cell index.
fn indexed_cube(nx: usize, ny: usize, m: usize, w: impl Fn(usize) -> Option<f64>) -> DataCube {
    let locations: Vec<Location> = (0..nx)
        .flat_map(|i| (0..ny).map(move |j| Location::new(format!("c{i:02}{j:02}"), i as f64, j as f64)))
        .collect();
    let cells = nx * ny * m;
    DataCube::from_parts(CubeParts {
        locations,
        m,
        time_origin: 1,
        names: VariableNames::default_for(1, 1),
        response: (0..cells).map(|c| Some(c as f64)).collect(),
        treatments: (0..cells).map(|c| Some((c % 2) as f64)).collect(),
        covariates: (0..cells).map(w).collect(),
    })
    .unwrap()
}

fn sources(permuted: &DataCube) -> Vec<usize> {
    permuted.response().iter().map(|v| v.unwrap() as usize).collect()
}

fn draw(cube: &DataCube, scheme: &PermutationScheme, seed: u64) -> Vec<usize> {
    let prepared = scheme.prepare(cube).unwrap();
    sources(&prepared.draw(&mut stream_rng(seed, 0)).apply(cube).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn time_schemes_share_one_sigma(nx in 1usize..5, ny in 1usize..5, m in 1usize..10, len in 1usize..5, seed in any::<u64>()) {
        let cube = indexed_cube(nx, ny, m, |_| Some(0.0));
        let n = nx * ny;
        for scheme in [PermutationScheme::TimeFull, PermutationScheme::TimeBlock { block_length: len.min(m) }] {
            let src = draw(&cube, &scheme, seed);
            let sigma: Vec<usize> = src[..m].to_vec();
            for s in 0..n {
                for t in 0..m {
                    prop_assert_eq!(src[s * m + t], s * m + sigma[t]);
                }
            }
            if let PermutationScheme::TimeBlock { block_length } = scheme {
                // Within-block order is kept: consecutive entries inside a block are consecutive times.
                let mut t = 0;
                while t < m {
                    let start = sigma[t];
                    prop_assert_eq!(start % block_length, 0);
                    let end = (start + block_length).min(m);
                    for k in start..end {
                        prop_assert_eq!(sigma[t + k - start], k);
                    }
                    t += end - start;
                }
            }
        }
    }

    #[test]
    fn spatial_blocks_move_as_units(nx in 1usize..8, ny in 1usize..8, m in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let cube = indexed_cube(nx, ny, m, |_| Some(0.0));
        let src = draw(&cube, &PermutationScheme::SpatialBlock { block_cells: k }, seed);
        let full = |i: usize, j: usize| (i / k + 1) * k <= nx && (j / k + 1) * k <= ny;
        for i in 0..nx {
            for j in 0..ny {
                for t in 0..m {
                    let target = (i * ny + j) * m + t;
                    let origin = src[target];
                    prop_assert_eq!(origin % m, t);
                    let (si, sj) = ((origin / m) / ny, (origin / m) % ny);
                    prop_assert_eq!(full(i, j), full(si, sj));
                    if full(i, j) {
                        prop_assert_eq!((si % k, sj % k), (i % k, j % k));
                        // The block's anchor cell determines where every member comes from.
                        let anchor = ((i / k * k) * ny + j / k * k) * m + t;
                        let a = src[anchor] / m;
                        prop_assert_eq!((a / ny + i % k, a % ny + j % k), (si, sj));
                    }
                }
            }
        }
    }

    #[test]
    fn stratified_permutation_stays_in_bins(nx in 1usize..4, ny in 1usize..4, m in 2usize..8, bins in 1usize..5, seed in any::<u64>()) {
        let w = |c: usize| if c % 5 == 4 { None } else { Some(((c * 7) % 6) as f64) };
        let cube = indexed_cube(nx, ny, m, w);
        let src = draw(&cube, &PermutationScheme::StratifiedByQuantile { n_bins: bins, covariate: 0 }, seed);
        let observed: Vec<usize> = (0..src.len()).filter(|&c| w(c).is_some()).collect();
        let values: Vec<f64> = observed.iter().map(|&c| w(c).unwrap()).collect();
        let mut bin = vec![usize::MAX; src.len()];
        for (&c, b) in observed.iter().zip(quantile_bins(&values, bins)) {
            bin[c] = b;
        }
        for (target, &origin) in src.iter().enumerate() {
            prop_assert_eq!(bin[target], bin[origin]);
        }
    }

    #[test]
    fn every_scheme_draws_a_bijection(nx in 2usize..5, ny in 2usize..5, m in 3usize..8, seed in any::<u64>()) {
        let cube = indexed_cube(nx, ny, m, |c| Some((c % 3) as f64));
        for scheme in [
            PermutationScheme::TimeFull,
            PermutationScheme::TimeBlock { block_length: 2 },
            PermutationScheme::SpatialBlock { block_cells: 2 },
            PermutationScheme::StratifiedByQuantile { n_bins: 2, covariate: 0 },
            PermutationScheme::FullyRandom,
        ] {
            let mut src = draw(&cube, &scheme, seed);
            src.sort_unstable();
            prop_assert_eq!(src, (0..nx * ny * m).collect::<Vec<_>>());
        }
    }

    #[test]
    fn p_values_lie_on_the_grid(seed in any::<u64>(), b in 1usize..60) {
        let cube = indexed_cube(2, 2, 5, |_| Some(0.0));
        let stat = FnStatistic::new("y0", |c: &DataCube| Ok(c.y(0, 0).unwrap()));
        let r = run_test(&cube, &stat, &PermutationScheme::FullyRandom, Resamples::Random(b), seed).unwrap();
        let k = r.p_one_sided * (b + 1) as f64;
        prop_assert!((k - k.round()).abs() < 1e-9);
        prop_assert!(r.p_one_sided >= 1.0 / (b + 1) as f64 && r.p_one_sided <= 1.0);
        prop_assert!(r.p_two_sided >= r.p_one_sided.min(1.0 - r.p_one_sided) && r.p_two_sided <= 1.0);
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let spec = LscmSpec::example(GridSampling::square(6), 25, 3);
    let cube = LscmSimulator::for_spec(&spec).unwrap().simulate(&spec).unwrap().cube;
    let stat = EstimatorConfig::LscmBasis { degree: 1, lag: 0 };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_test(&cube, &stat, &PermutationScheme::TimeFull, Resamples::Random(199), 42).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn statistic_errors_name_the_resample() {
    let cube = indexed_cube(2, 2, 4, |_| Some(0.0));
    let stat = FnStatistic::new("fragile", |c: &DataCube| {
        if c.y(0, 0) == Some(0.0) {
            Ok(0.0)
        } else {
            Err(lscm::Error::Estimation("boom".into()))
        }
    });
    let err = run_test(&cube, &stat, &PermutationScheme::FullyRandom, Resamples::Random(50), 1).unwrap_err();
    assert!(matches!(err, lscm::Error::Resample { .. }), "{err}");
}

#[test]
fn exhaustive_mode_is_restricted() {
    let cube = indexed_cube(2, 2, 8, |_| Some(0.0));
    let stat = EstimatorConfig::LscmBasis { degree: 1, lag: 0 };
    assert!(run_test(&cube, &stat, &PermutationScheme::TimeFull, Resamples::Exhaustive, 0).is_err());
    let cube = indexed_cube(2, 2, 4, |_| Some(0.0));
    assert!(run_test(&cube, &stat, &PermutationScheme::FullyRandom, Resamples::Exhaustive, 0).is_err());
    let r = run_test(&cube, &stat, &PermutationScheme::TimeFull, Resamples::Exhaustive, 0).unwrap();
    assert_eq!(r.b, 23);
}

/// Under the null the rank of the observed statistic among `B + 1` values is
/// uniform, so the one-sided p-values of independent null datasets spread
/// evenly over `{1, ..., B+1} / (B+1)`.
#[test]
fn null_p_values_are_uniform() {
    let base = LscmSpec {
        grid: GridSampling::square(5),
        m: 12,
        form: StructuralForm::Null,
        treatment: TreatmentKind::Continuous,
        covariance: Default::default(),
        seed: 0,
    };
    let simulator = LscmSimulator::for_spec(&base).unwrap();
    let stat = EstimatorConfig::LscmBasis { degree: 1, lag: 0 };
    let b = 19;
    let reps = 400;
    let mut counts = vec![0usize; b + 1];
    for r in 0..reps {
        let mut spec = base.clone();
        spec.seed = derive_seed(99, &[r]);
        let cube = simulator.simulate(&spec).unwrap().cube;
        let t = run_test(&cube, &stat, &PermutationScheme::TimeFull, Resamples::Random(b), derive_seed(100, &[r])).unwrap();
        counts[(t.p_one_sided * (b + 1) as f64).round() as usize - 1] += 1;
    }
    let expected = reps as f64 / (b + 1) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(b as f64).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi-square {chi2} (p = {p}), counts {counts:?}");
}
