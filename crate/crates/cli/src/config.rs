use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textclust_core::{BackendConfig, RunConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub model: Option<String>,
    pub mock_script: Option<PathBuf>,
    #[serde(flatten)]
    pub http: BackendConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

/// Contents of the `--config` TOML file: `[backend]`, `[run]` and `[paths]`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub backend: BackendSection,
    pub run: RunConfig,
    pub paths: Paths,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let config: CliConfig =
            toml::from_str(&raw).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if let Some(model) = &config.backend.model {
            if model.trim().is_empty() {
                return Err(CliError::Usage("backend.model is empty".into()));
            }
        }
        Ok(config)
    }
}
