//! Experiment configuration file.
//!
//! ```toml
//! [pack]
//! aging_rate = 3.5e-4
//!
//! [ducm]
//! tau_mah = 1.0
//!
//! [protocol]
//! n_cells = 100
//! rounds = 10
//!
//! [adversary]
//! mode = "tamper"
//! bit = 5
//! ```
//!
//! Every section and key is optional. Unknown keys are an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery_sim::{PackConfig, MAX_PACK_CELLS, MIN_PACK_CELLS};
use crate::crseq::TransformVariant;
use crate::ducm::DucmConfig;
use crate::fuel_gauge::GaugeConfig;
use crate::net::adversary::AdversaryMode;
use crate::net::sweep::SweepConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config [{section}]: {message}")]
    Invalid { section: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// In-process queues with a deterministic scheduler.
    #[default]
    Memory,
    /// Loopback TCP with the adversary as a proxy.
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    #[default]
    WholeWord,
    PerByte,
}

impl From<VariantName> for TransformVariant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::WholeWord => TransformVariant::WholeWord,
            VariantName::PerByte => TransformVariant::PerByte,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_cells: usize,
    pub rounds: u64,
    pub transform: VariantName,
    /// Opaque control command carried by an accept verdict.
    pub command: String,
    pub transport: TransportKind,
    /// Read timeout for the TCP transport.
    pub timeout_ms: u64,
    /// ENROLL_CRT frames lost by the transport before delivery resumes.
    pub enroll_drops: u32,
    pub max_enroll_attempts: u32,
    /// Re-enroll on its own after the outstation reports a desync.
    pub auto_reenroll: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_cells: 100,
            rounds: 10,
            transform: VariantName::WholeWord,
            command: "dispatch".into(),
            transport: TransportKind::Memory,
            timeout_ms: 500,
            enroll_drops: 0,
            max_enroll_attempts: 3,
            auto_reenroll: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_records: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_records: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pack: PackConfig,
    pub gauge: GaugeConfig,
    pub ducm: DucmConfig,
    pub protocol: ProtocolConfig,
    pub adversary: AdversaryMode,
    pub sweep: SweepConfig,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section, message: String| ConfigError::Invalid { section, message };
        self.pack.validate().map_err(|e| invalid("pack", e.to_string()))?;
        self.gauge.validate().map_err(|e| invalid("gauge", e.to_string()))?;
        self.ducm.validate().map_err(|e| invalid("ducm", e.to_string()))?;
        self.sweep.validate().map_err(|e| invalid("sweep", e.to_string()))?;
        self.adversary.validate().map_err(|e| invalid("adversary", e))?;
        let n = self.protocol.n_cells;
        if !(MIN_PACK_CELLS..=MAX_PACK_CELLS).contains(&n) {
            return Err(invalid(
                "protocol",
                format!("n_cells = {n} outside {MIN_PACK_CELLS}..={MAX_PACK_CELLS}"),
            ));
        }
        if self.protocol.command.len() > u16::MAX as usize - 5 {
            return Err(invalid("protocol", "command does not fit in one frame".into()));
        }
        if self.protocol.max_enroll_attempts == 0 {
            return Err(invalid("protocol", "max_enroll_attempts must be at least 1".into()));
        }
        if self.dataset.n_records == 0 {
            return Err(invalid("dataset", "n_records must be at least 1".into()));
        }
        Ok(())
    }
}
