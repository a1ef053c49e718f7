use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EffectEstimate;
use crate::resampling::{PermutationScheme, TestResult};

pub const SCHEMA_VERSION: &str = "lscm-result/1";

/// Where a result came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub scheme: Option<PermutationScheme>,
    /// Hash of the resolved run configuration.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "result", rename_all = "snake_case")]
pub enum ResultBody {
    EffectEstimate(EffectEstimate),
    TestResult(TestResult),
}

/// Versioned result document. Field order in the serialized form follows
/// the declaration order below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: String,
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: ResultBody,
}

impl ResultDocument {
    pub fn new(body: ResultBody, provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            provenance,
            body,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn write_results(doc: &ResultDocument, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer_pretty(&mut w, doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<ResultDocument> {
    let doc: ResultDocument = serde_json::from_reader(BufReader::new(File::open(path.as_ref())?))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported schema_version '{}', expected '{SCHEMA_VERSION}'",
            doc.schema_version
        )));
    }
    Ok(doc)
}
