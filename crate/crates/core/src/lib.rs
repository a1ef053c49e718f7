//! Causal effect estimation and permutation testing for spatio-temporal data
//! whose latent confounders are constant over time.
//!
//! The crate is organised around a [`DataCube`](datacube::DataCube) of
//! per-location time series:
//!
//! - [`datacube`]: the data model, CSV ingestion and result documents.
//! - [`gp_sim`]: stationary Gaussian random fields and simulated datasets.
//! - [`estimators`]: per-location regression aggregated over space, the
//!   binary-treatment estimator and pooled / stratified baselines.
//! - [`resampling`]: null-preserving permutation schemes and p-values.
//! - [`experiments`]: seeded Monte Carlo studies built from the above.

pub mod datacube;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod gp_sim;
pub mod resampling;
pub mod seeds;

pub use datacube::{CubeSchema, DataCube, Location};
pub use error::{Error, Result};
pub use estimators::{BasisSpec, EffectEstimate, EstimatorConfig, LocationFit};
pub use resampling::{PermutationScheme, Resamples, TestResult};
