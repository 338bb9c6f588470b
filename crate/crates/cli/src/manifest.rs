use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sentwhite::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub hidden_states: PathBuf,
    pub pairs: PathBuf,
}

/// Everything needed to re-run a command and get the same output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<PipelineConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_spec: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_spec_text: Option<String>,
    pub datasets: BTreeMap<String, DatasetFiles>,
    pub eigen_floor: f64,
    /// `transductive`, `per-dataset`, `pooled`, or the path of an external corpus.
    pub fit_corpus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "sentwhite".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: None,
            grid_spec: None,
            grid_spec_text: None,
            datasets: BTreeMap::new(),
            eigen_floor: sentwhite::DEFAULT_EIGEN_FLOOR,
            fit_corpus: "transductive".into(),
            threshold: None,
            threads: None,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        std::fs::write(path, json).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
