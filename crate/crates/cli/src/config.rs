//! One JSON document collecting every tunable section. Each command writes the
//! fully resolved version next to its outputs so runs can be reproduced.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use instanseg_core::{ArchitectureConfig, PipelineConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Defaults, or the parsed file when one is given. Unknown keys are errors.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Writes the resolved config as `<output stem>.config.json`.
    pub fn write_beside(&self, output: &Path) -> Result<()> {
        self.write_to(&output.with_extension("config.json"))
    }

    /// Writes the resolved config as `run_config.json` inside a directory.
    pub fn write_in(&self, dir: &Path) -> Result<()> {
        self.write_to(&dir.join("run_config.json"))
    }

    fn write_to(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).context("encoding config")?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing config {}", path.display()))
    }
}
