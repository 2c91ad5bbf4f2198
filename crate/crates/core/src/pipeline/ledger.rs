use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};

/// Where the artifacts of one run ended up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentLedger {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub metrics_path: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    /// Other outputs such as tables and traces.
    pub outputs: Vec<PathBuf>,
}

impl ExperimentLedger {
    /// The run id is derived from the command, seed, and config hash, so
    /// reruns of the same experiment share it.
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let config_hash = cfg.hash();
        Self {
            run_id: format!("{command}-s{}-{}", cfg.seed, &config_hash[..12]),
            command: command.to_string(),
            config_hash,
            metrics_path: None,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}
