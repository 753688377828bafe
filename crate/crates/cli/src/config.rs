//! TOML run configuration: `[fit]` mirrors the estimation controls and
//! `[bootstrap]` the bootstrap controls. Missing keys take the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smsn_nlme::bootstrap::BootstrapConfig;
use smsn_nlme::estimation::FitConfig;

use crate::error::CliError;
use crate::manifest::ManifestBuilder;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub bootstrap: BootstrapConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config file: {e}")))?;
        cfg.fit.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` when given (recording its checksum), else the defaults.
    pub fn load(path: Option<&Path>, manifest: &mut ManifestBuilder) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = manifest.read_input(p)?;
                let text = String::from_utf8(bytes).map_err(|_| CliError::Io(format!("{} is not UTF-8", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}
