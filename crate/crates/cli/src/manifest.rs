use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::commands::CliError;

/// Written next to every set of outputs; `replay` re-runs the command from
/// it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Every setting, defaults included.
    pub config: BTreeMap<String, String>,
    pub master_seed: u64,
    pub version: String,
    /// Output file names relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub duration_secs: f64,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(path, format!("not a manifest: {e}")))
    }
}
