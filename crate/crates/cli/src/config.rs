use std::path::{Path, PathBuf};

use serde::Deserialize;

use lscm::Error;

/// Settings file (TOML). Every key is optional and mirrors the flag of the
/// same name with dashes replaced by underscores; flags take precedence
/// over the file, which takes precedence over built-in defaults.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,

    pub input: Option<PathBuf>,
    pub delimiter: Option<char>,
    pub id_column: Option<String>,
    pub s1_column: Option<String>,
    pub s2_column: Option<String>,
    pub t_column: Option<String>,
    pub y_column: Option<String>,
    pub x_columns: Option<Vec<String>>,
    pub w_columns: Option<Vec<String>>,
    pub transpose: Option<bool>,

    pub estimator: Option<String>,
    pub degree: Option<usize>,
    pub lag: Option<usize>,
    pub bins: Option<usize>,
    pub covariate: Option<String>,

    pub scheme: Option<String>,
    #[serde(alias = "B")]
    pub resamples: Option<usize>,
    pub block_length: Option<usize>,
    pub block_cells: Option<usize>,
    pub exhaustive: Option<bool>,

    pub side: Option<usize>,
    pub m: Option<usize>,
    pub form: Option<String>,
    pub treatment: Option<String>,
    pub threshold: Option<f64>,

    pub alpha: Option<f64>,
    pub replicates: Option<usize>,
    pub sides: Option<Vec<usize>>,
    pub m_values: Option<Vec<usize>>,
    pub delta: Option<f64>,
    pub x: Option<Vec<f64>>,
    pub draws: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config file {}: {e}", path.display())))
    }
}
