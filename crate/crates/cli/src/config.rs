//! Run configuration: one TOML document with a typed section per subsystem.
//!
//! Every field has a default, so an empty file, a missing section, or a
//! partial section is valid; unknown section names are rejected to catch
//! typos. The effective configuration is echoed into each run's output
//! directory, making results reproducible from the artifacts alone.

use serde::{Deserialize, Serialize};
use std::path::Path;
use voltgraph::bench::BenchConfig;
use voltgraph::dpc::TrainConfig;
use voltgraph::gnn::GnnConfig;
use voltgraph::ocp::OcpConfig;
use voltgraph::plant::Conventions;

/// Merged configuration for a run. TOML sections: `[gnn]`, `[train]`,
/// `[plant]`, `[ocp]`, `[bench]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gnn: GnnConfig,
    pub train: TrainConfig,
    pub plant: Conventions,
    pub ocp: OcpConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Validates every section, naming the offending one.
    pub fn validate(&self) -> Result<(), String> {
        self.gnn.validate().map_err(|e| format!("[gnn] {e}"))?;
        self.train.validate().map_err(|e| format!("[train] {e}"))?;
        self.plant.validate().map_err(|e| format!("[plant] {e}"))?;
        self.ocp.validate().map_err(|e| format!("[ocp] {e}"))?;
        self.bench.validate().map_err(|e| format!("[bench] {e}"))?;
        Ok(())
    }

    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config '{}': {e}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| format!("invalid config '{}': {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    /// Renders the effective configuration as a TOML document.
    pub fn to_toml(self) -> String {
        toml::to_string_pretty(&self).expect("config serializes to TOML")
    }
}
