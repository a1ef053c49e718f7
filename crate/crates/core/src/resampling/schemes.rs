use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datacube::{DataCube, GridLayout};
use crate::error::{Error, Result};
use crate::estimators::quantile_bins;

/// A null-preserving resampling law for the response array.
///
/// Every scheme only moves response values between cells; treatments and
/// covariates stay in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PermutationScheme {
    /// One uniform permutation of the time axis, shared by all locations.
    TimeFull,
    /// Contiguous blocks of `block_length` time steps (the last one possibly
    /// shorter) are shuffled as units; order within a block is kept.
    TimeBlock { block_length: usize },
    /// In every time slice, complete `block_cells x block_cells` squares of
    /// the location lattice (anchored at the minimum coordinates) exchange
    /// their contents as units; cells outside complete squares are shuffled
    /// among themselves.
    SpatialBlock { block_cells: usize },
    /// Cells are shuffled within equal-frequency bins of one covariate
    /// (cells with a missing covariate form their own stratum).
    StratifiedByQuantile { n_bins: usize, covariate: usize },
    /// All cells are shuffled globally.
    FullyRandom,
}

impl PermutationScheme {
    pub const DEFAULT_BLOCK_LENGTH: usize = 3;

    pub fn name(&self) -> &'static str {
        match self {
            PermutationScheme::TimeFull => "time_full",
            PermutationScheme::TimeBlock { .. } => "time_block",
            PermutationScheme::SpatialBlock { .. } => "spatial_block",
            PermutationScheme::StratifiedByQuantile { .. } => "stratified_by_quantile",
            PermutationScheme::FullyRandom => "fully_random",
        }
    }

    /// Precomputes everything a draw needs for cubes shaped like `cube`.
    pub fn prepare(&self, cube: &DataCube) -> Result<PreparedScheme> {
        let (n, m) = (cube.n(), cube.m());
        let law = match *self {
            PermutationScheme::TimeFull => Law::Time {
                blocks: (0..m).map(|t| (t, t + 1)).collect(),
            },
            PermutationScheme::TimeBlock { block_length } => {
                if block_length == 0 || block_length > m {
                    return Err(Error::Config(format!(
                        "time block length {block_length} must lie in 1..={m}"
                    )));
                }
                Law::Time {
                    blocks: (0..m).step_by(block_length).map(|a| (a, (a + block_length).min(m))).collect(),
                }
            }
            PermutationScheme::SpatialBlock { block_cells } => {
                if block_cells == 0 {
                    return Err(Error::Config("spatial block size must be at least one cell".into()));
                }
                spatial_law(cube, block_cells)?
            }
            PermutationScheme::StratifiedByQuantile { n_bins, covariate } => {
                if n_bins == 0 {
                    return Err(Error::Config("number of bins must be positive".into()));
                }
                if covariate >= cube.p() {
                    return Err(Error::Config(format!(
                        "stratified permutation needs covariate #{covariate}, cube has {}",
                        cube.p()
                    )));
                }
                let observed: Vec<usize> = (0..n * m).filter(|&c| cube.w(c / m, c % m, covariate).is_some()).collect();
                let values: Vec<f64> = observed.iter().map(|&c| cube.w(c / m, c % m, covariate).unwrap()).collect();
                let mut strata: Vec<Vec<usize>> = vec![Vec::new(); n_bins + 1];
                for (&c, b) in observed.iter().zip(quantile_bins(&values, n_bins)) {
                    strata[b].push(c);
                }
                strata[n_bins] = (0..n * m).filter(|&c| cube.w(c / m, c % m, covariate).is_none()).collect();
                strata.retain(|s| s.len() > 1);
                Law::Strata { strata }
            }
            PermutationScheme::FullyRandom => Law::Strata {
                strata: vec![(0..n * m).collect()],
            },
        };
        Ok(PreparedScheme { n, m, law })
    }
}

#[derive(Debug, Clone)]
enum Law {
    /// Half-open time blocks `[a, b)` shuffled as units.
    Time { blocks: Vec<(usize, usize)> },
    /// Per time slice: complete blocks (location indices in canonical
    /// within-block order) and the remaining locations.
    Spatial { blocks: Vec<Vec<usize>>, loose: Vec<usize> },
    /// Cell index groups shuffled independently.
    Strata { strata: Vec<Vec<usize>> },
}

fn spatial_law(cube: &DataCube, k: usize) -> Result<Law> {
    let grid = GridLayout::detect(cube.locations()).map_err(|e| match e {
        Error::UnsupportedLayout(msg) => Error::Config(format!("spatial blocks need lattice locations: {msg}")),
        other => other,
    })?;
    let mut groups: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
    for (s, &(i, j)) in grid.index.iter().enumerate() {
        groups.entry((i / k, j / k)).or_default().push(((i % k) * k + j % k, s));
    }
    let mut keys: Vec<(usize, usize)> = groups.keys().copied().collect();
    keys.sort();
    let mut blocks = Vec::new();
    let mut loose = Vec::new();
    for key in keys {
        let mut members = groups.remove(&key).unwrap_or_default();
        members.sort();
        if members.len() == k * k {
            blocks.push(members.into_iter().map(|(_, s)| s).collect());
        } else {
            loose.extend(members.into_iter().map(|(_, s)| s));
        }
    }
    loose.sort();
    Ok(Law::Spatial { blocks, loose })
}

/// Source cell of every target cell: the permuted response at cell `c` is
/// the original response at cell `map[c]` (cells indexed `s*m + t`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellPermutation(pub Vec<usize>);

impl CellPermutation {
    pub fn identity(cells: usize) -> Self {
        Self((0..cells).collect())
    }

    /// The time permutation `sigma` applied at every location.
    pub fn from_time_permutation(n: usize, sigma: &[usize]) -> Self {
        let m = sigma.len();
        Self((0..n).flat_map(|s| sigma.iter().map(move |&t| s * m + t)).collect())
    }

    pub fn apply(&self, cube: &DataCube) -> Result<DataCube> {
        if self.0.len() != cube.n() * cube.m() {
            return Err(Error::Config(format!(
                "permutation covers {} cells, cube has {}",
                self.0.len(),
                cube.n() * cube.m()
            )));
        }
        let y = cube.response();
        cube.with_response(self.0.iter().map(|&c| y[c]).collect())
    }
}

/// A scheme bound to one cube shape.
#[derive(Debug, Clone)]
pub struct PreparedScheme {
    n: usize,
    m: usize,
    law: Law,
}

impl PreparedScheme {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CellPermutation {
        let (n, m) = (self.n, self.m);
        match &self.law {
            Law::Time { blocks } => {
                let mut order: Vec<usize> = (0..blocks.len()).collect();
                order.shuffle(rng);
                let sigma: Vec<usize> = order.iter().flat_map(|&b| blocks[b].0..blocks[b].1).collect();
                CellPermutation::from_time_permutation(n, &sigma)
            }
            Law::Spatial { blocks, loose } => {
                let mut map = CellPermutation::identity(n * m).0;
                let mut order: Vec<usize> = (0..blocks.len()).collect();
                let mut shuffled = loose.clone();
                for t in 0..m {
                    order.shuffle(rng);
                    for (target, &source) in blocks.iter().zip(&order) {
                        for (&a, &b) in target.iter().zip(&blocks[source]) {
                            map[a * m + t] = b * m + t;
                        }
                    }
                    shuffled.copy_from_slice(loose);
                    shuffled.shuffle(rng);
                    for (&a, &b) in loose.iter().zip(&shuffled) {
                        map[a * m + t] = b * m + t;
                    }
                }
                CellPermutation(map)
            }
            Law::Strata { strata } => {
                let mut map = CellPermutation::identity(n * m).0;
                for stratum in strata {
                    let mut sources = stratum.clone();
                    sources.shuffle(rng);
                    for (&a, &b) in stratum.iter().zip(&sources) {
                        map[a] = b;
                    }
                }
                CellPermutation(map)
            }
        }
    }
}
