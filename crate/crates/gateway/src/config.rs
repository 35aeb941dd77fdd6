//! Server configuration, read from TOML. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use crag_core::crypto::PublicKey;
use crag_core::enclave::Measurement;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "CRAG_CONFIG";
pub const GENERATOR_ID: &str = "extractive-v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {detail}")]
    Read { path: PathBuf, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_k() -> usize {
    crag_core::rag::DEFAULT_K
}

fn default_dim() -> usize {
    crag_core::embedder::DEFAULT_DIM
}

fn default_true() -> bool {
    true
}

fn default_artifact() -> String {
    "crag-enclave".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    pub store_path: PathBuf,
    pub audit_path: PathBuf,
    pub registry_path: PathBuf,
    /// Tab-separated rule pack; the built-in pack is used when absent.
    #[serde(default)]
    pub rules_path: Option<PathBuf>,
    pub governance_policy: PathBuf,
    /// JSON array of client registrations.
    pub clients_path: PathBuf,
    /// Hex-encoded 32-byte device secret; generated on first start.
    pub device_secret_path: PathBuf,
    /// Key file of the emulated platform root that signs attestation reports.
    pub root_key_path: PathBuf,
    #[serde(default)]
    pub root_public: Option<PublicKey>,
    pub code_identity: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_true")]
    pub provenance: bool,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_artifact")]
    pub artifact_name: String,
    #[serde(default)]
    pub artifact_version: Option<String>,
}

impl ServerConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServerConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), detail: e.to_string() })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.store_path,
            &mut self.audit_path,
            &mut self.registry_path,
            &mut self.governance_policy,
            &mut self.clients_path,
            &mut self.device_secret_path,
            &mut self.root_key_path,
        ] {
            fix(p);
        }
        if let Some(p) = self.rules_path.as_mut() {
            fix(p);
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(ConfigError::Invalid("dim must be at least 1".into()));
        }
        if self.code_identity.trim().is_empty() {
            return Err(ConfigError::Invalid("code_identity must be set".into()));
        }
        Ok(())
    }

    /// Configuration bytes covered by the enclave measurement.
    pub fn enclave_config(&self) -> String {
        format!("dim={};k={};provenance={};generator={}", self.dim, self.k, self.provenance, GENERATOR_ID)
    }

    pub fn measurement(&self) -> Measurement {
        Measurement::compute(self.code_identity.as_bytes(), self.enclave_config().as_bytes())
    }
}

/// `--config` if given, else `$CRAG_CONFIG`, else `./crag.toml`.
pub fn config_path(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("crag.toml"))
}
