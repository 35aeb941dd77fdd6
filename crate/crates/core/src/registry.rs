//! Approved artifact measurements and the deployment drift check.
//!
//! On disk the registry is pretty-printed JSON followed by one footer line,
//! `sha256:<hex>`, the digest of every byte before the footer.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{Actor, AuditError, AuditLog, EventKind};
use crate::crypto::{digest, digest_parts, Digest, PublicKey};
use crate::enclave::{verify_root_signature, AttestationReport, Measurement};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{name} {version} is already registered")]
    Duplicate { name: String, version: String },
    #[error("{name} {version} is registered with a different measurement")]
    MeasurementChange { name: String, version: String },
    #[error("artifact name and version must be non-empty")]
    EmptyField,
    #[error("registry file integrity check failed")]
    Integrity,
    #[error("registry file: {0}")]
    Format(String),
    #[error("registry io: {0}")]
    Io(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub version: String,
    pub measurement: Measurement,
    pub eval_attestation_digest: Option<Digest>,
    pub registered_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftStatus {
    Match,
    Drift,
    UnknownArtifact,
}

impl fmt::Display for DriftStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftStatus::Match => "match",
            DriftStatus::Drift => "drift",
            DriftStatus::UnknownArtifact => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftVerdict {
    pub status: DriftStatus,
    pub expected: Option<Measurement>,
    pub observed: Measurement,
}

/// Drift verdict plus the report's root-signature validity, which is
/// reported separately and does not affect `verdict`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentCheck {
    pub verdict: DriftVerdict,
    pub signature_valid: bool,
}

impl DeploymentCheck {
    pub fn is_healthy(&self) -> bool {
        self.signature_valid && self.verdict.status == DriftStatus::Match
    }
}

pub fn drift_verdict(expected: Option<Measurement>, observed: Measurement) -> DriftVerdict {
    let status = match expected {
        None => DriftStatus::UnknownArtifact,
        Some(e) if e == observed => DriftStatus::Match,
        Some(_) => DriftStatus::Drift,
    };
    DriftVerdict { status, expected, observed }
}

pub fn check_report(registered: Option<&ArtifactRecord>, report: &AttestationReport, root_public: &PublicKey) -> DeploymentCheck {
    DeploymentCheck {
        verdict: drift_verdict(registered.map(|r| r.measurement), report.measurement),
        signature_valid: verify_root_signature(root_public, report),
    }
}

#[derive(Serialize, Deserialize, Default)]
struct RegistryFile {
    artifacts: Vec<ArtifactRecord>,
}

fn artifact_key(name: &str, version: &str) -> Digest {
    digest_parts(&[&(name.len() as u32).to_be_bytes(), name.as_bytes(), version.as_bytes()])
}

pub fn encode_file(records: &[ArtifactRecord]) -> String {
    let mut body = serde_json::to_string_pretty(&RegistryFile { artifacts: records.to_vec() }).expect("registry serializes");
    body.push('\n');
    let footer = format!("sha256:{}\n", digest(body.as_bytes()).to_hex());
    body + &footer
}

pub fn decode_file(text: &str) -> Result<Vec<ArtifactRecord>, RegistryError> {
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let split = trimmed.rfind('\n').ok_or(RegistryError::Integrity)?;
    let (body, footer) = (&text[..split + 1], &trimmed[split + 1..]);
    let hex = footer.strip_prefix("sha256:").ok_or(RegistryError::Integrity)?;
    if Digest::from_hex(hex).ok() != Some(digest(body.as_bytes())) {
        return Err(RegistryError::Integrity);
    }
    let file: RegistryFile = serde_json::from_str(body).map_err(|e| RegistryError::Format(e.to_string()))?;
    Ok(file.artifacts)
}

pub struct ArtifactRegistry {
    path: Option<PathBuf>,
    records: RwLock<Vec<ArtifactRecord>>,
    /// Absent for offline operator tooling.
    audit: Option<Arc<AuditLog>>,
}

impl ArtifactRegistry {
    pub fn in_memory(audit: Option<Arc<AuditLog>>) -> Self {
        ArtifactRegistry { path: None, records: RwLock::new(Vec::new()), audit }
    }

    /// Load `path` if present; it is created on first registration.
    pub fn open(path: &Path, audit: Option<Arc<AuditLog>>) -> Result<Self, RegistryError> {
        let records = match std::fs::read_to_string(path) {
            Ok(text) => decode_file(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(RegistryError::Io(e.to_string())),
        };
        Ok(ArtifactRegistry { path: Some(path.to_path_buf()), records: RwLock::new(records), audit })
    }

    /// Re-read the backing file, picking up registrations made by other processes.
    pub fn reload(&self) -> Result<(), RegistryError> {
        if let Some(path) = &self.path {
            match std::fs::read_to_string(path) {
                Ok(text) => *self.records.write() = decode_file(&text)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(RegistryError::Io(e.to_string())),
            }
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<ArtifactRecord> {
        self.records.read().clone()
    }

    pub fn lookup(&self, name: &str, version: &str) -> Option<ArtifactRecord> {
        self.records.read().iter().find(|r| r.name == name && r.version == version).cloned()
    }

    /// Most recently registered version of `name`.
    pub fn latest(&self, name: &str) -> Option<ArtifactRecord> {
        self.records.read().iter().filter(|r| r.name == name).max_by_key(|r| r.registered_seq).cloned()
    }

    pub fn register(
        &self,
        name: &str,
        version: &str,
        measurement: Measurement,
        eval_digest: Option<Digest>,
        actor: &Actor,
    ) -> Result<ArtifactRecord, RegistryError> {
        if name.trim().is_empty() || version.trim().is_empty() {
            return Err(RegistryError::EmptyField);
        }
        let mut records = self.records.write();
        if let Some(existing) = records.iter().find(|r| r.name == name && r.version == version) {
            return Err(if existing.measurement == measurement {
                RegistryError::Duplicate { name: name.into(), version: version.into() }
            } else {
                RegistryError::MeasurementChange { name: name.into(), version: version.into() }
            });
        }
        let record = ArtifactRecord {
            name: name.to_string(),
            version: version.to_string(),
            measurement,
            eval_attestation_digest: eval_digest,
            registered_seq: records.iter().map(|r| r.registered_seq + 1).max().unwrap_or(0),
        };
        let mut next = records.clone();
        next.push(record.clone());
        if let Some(path) = &self.path {
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, encode_file(&next)).map_err(|e| RegistryError::Io(e.to_string()))?;
            std::fs::rename(&tmp, path).map_err(|e| RegistryError::Io(e.to_string()))?;
        }
        *records = next;
        drop(records);
        if let Some(audit) = &self.audit {
            audit.append_event(EventKind::Registration, actor, vec![artifact_key(name, version), measurement.0])?;
        }
        Ok(record)
    }

    /// Compare an attested deployment with the registered measurement.
    /// Every call appends one drift-check audit event.
    pub fn check_deployment(
        &self,
        name: &str,
        version: &str,
        report: &AttestationReport,
        root_public: &PublicKey,
    ) -> Result<DeploymentCheck, RegistryError> {
        let check = check_report(self.lookup(name, version).as_ref(), report, root_public);
        if let Some(audit) = &self.audit {
            let mut subjects = vec![artifact_key(name, version), report.measurement.0];
            subjects.extend(check.verdict.expected.map(|m| m.0));
            audit.append_event(EventKind::DriftCheck, &Actor::enclave(), subjects)?;
        }
        Ok(check)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::AuditFilter;
    use crate::crypto::{generate_keypair, KeyKind};
    use crate::enclave::Enclave;

    fn setup() -> (ArtifactRegistry, Arc<AuditLog>) {
        let e = Arc::new(Enclave::boot(b"registry", b"cfg", &[2; 32]).unwrap());
        let audit = Arc::new(AuditLog::in_memory(e));
        (ArtifactRegistry::in_memory(Some(audit.clone())), audit)
    }

    fn ops() -> Actor {
        Actor::new("ops").unwrap()
    }

    #[test]
    fn register_lookup_and_immutability() {
        let (reg, _) = setup();
        let m1 = Measurement::compute(b"engine", b"v1");
        let eval = digest(b"eval proof");
        let r = reg.register("engine", "1.0", m1, Some(eval), &ops()).unwrap();
        assert_eq!(reg.lookup("engine", "1.0").unwrap(), r);
        assert_eq!(r.eval_attestation_digest, Some(eval));
        assert!(matches!(reg.register("engine", "1.0", m1, None, &ops()), Err(RegistryError::Duplicate { .. })));
        assert!(matches!(
            reg.register("engine", "1.0", Measurement::compute(b"x", b"y"), None, &ops()),
            Err(RegistryError::MeasurementChange { .. })
        ));
        reg.register("engine", "2.0", Measurement::compute(b"engine", b"v2"), None, &ops()).unwrap();
        assert_eq!(reg.latest("engine").unwrap().version, "2.0");
    }

    #[test]
    fn verdict_grid() {
        let (reg, audit) = setup();
        let root = generate_keypair(KeyKind::Signing, Some(&[4; 32])).unwrap();
        let forger = generate_keypair(KeyKind::Signing, Some(&[5; 32])).unwrap();
        let running = Enclave::boot(b"engine", b"v1", &[6; 32]).unwrap();
        reg.register("engine", "1.0", running.measurement(), None, &ops()).unwrap();
        reg.register("engine", "2.0", Measurement::compute(b"engine", b"v2"), None, &ops()).unwrap();
        let cases = [("1.0", DriftStatus::Match), ("2.0", DriftStatus::Drift), ("9.9", DriftStatus::UnknownArtifact)];
        for (version, status) in cases {
            for (signer, valid) in [(&root, true), (&forger, false)] {
                let report = running.attest(Digest::ZERO, signer).unwrap();
                let before = audit.len();
                let check = reg.check_deployment("engine", version, &report, &root.public()).unwrap();
                assert_eq!(check.verdict.status, status, "{version} {valid}");
                assert_eq!(check.signature_valid, valid);
                assert_eq!(check.is_healthy(), valid && status == DriftStatus::Match);
                assert_eq!(check.verdict.status == DriftStatus::Match, check.verdict.expected == Some(check.verdict.observed));
                assert_eq!(audit.len(), before + 1);
            }
        }
        assert_eq!(audit.query(&AuditFilter { kind: Some(EventKind::DriftCheck), ..Default::default() }).len(), 6);
    }

    #[test]
    fn file_round_trip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let (_, audit) = setup();
        let reg = ArtifactRegistry::open(&path, Some(audit.clone())).unwrap();
        reg.register("engine", "1.0", Measurement::compute(b"a", b"b"), None, &ops()).unwrap();
        let again = ArtifactRegistry::open(&path, Some(audit.clone())).unwrap();
        assert_eq!(again.records(), reg.records());

        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"1.0\"", "\"1.1\"", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(ArtifactRegistry::open(&path, Some(audit)), Err(RegistryError::Integrity)));
    }
}
