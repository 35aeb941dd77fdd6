//! In-process enclave emulation.
//!
//! An [`Enclave`] owns the device secret and the key pairs derived from it and
//! from the code measurement. Anything that handles private plaintext runs
//! inside [`Enclave::exec`], which scans the value it hands back against the
//! installed [`CanaryMonitor`] before it crosses the boundary.

use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::canary::CanaryMonitor;
use crate::crypto::{
    self, aead_open, aead_seal, digest, hkdf32, random_nonce, CryptoError, Digest,
    EnvelopeCiphertext, KeyKind, KeyPair, PublicKey, Signature, NONCE_LEN, TAG_LEN,
};

const AGREEMENT_INFO: &[u8] = b"crag/enclave/agreement/v1";
const SIGNING_INFO: &[u8] = b"crag/enclave/signing/v1";
const SEAL_INFO: &[u8] = b"crag/seal/v1";

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("code identity must not be empty")]
    EmptyCodeIdentity,
    #[error("configuration must not be empty")]
    EmptyConfig,
    #[error("sealed blob was produced by a different enclave identity")]
    SealIdentityMismatch,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed attestation report: {0}")]
    MalformedReport(String),
}

/// Digest over `code identity ‖ configuration`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Measurement(pub Digest);

impl Measurement {
    pub fn compute(code_identity: &[u8], config: &[u8]) -> Self {
        let mut buf = Vec::with_capacity(code_identity.len() + config.len());
        buf.extend_from_slice(code_identity);
        buf.extend_from_slice(config);
        Measurement(digest(&buf))
    }

    pub fn to_hex(&self) -> String {
        self.0.to_hex()
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Digest::from_hex(s).map(Measurement)
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", self.0.to_hex())
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_hex())
    }
}

/// A booted enclave. Immutable after boot; share it behind an `Arc`.
pub struct Enclave {
    measurement: Measurement,
    device_secret: Zeroizing<[u8; 32]>,
    agreement: KeyPair,
    signing: KeyPair,
    monitor: RwLock<Option<Arc<CanaryMonitor>>>,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("measurement", &self.measurement)
            .field("pk_tee", &self.agreement.public())
            .field("signing_public", &self.signing.public())
            .finish_non_exhaustive()
    }
}

pub fn boot_enclave(
    code_identity: &[u8],
    config: &[u8],
    device_secret: &[u8; 32],
) -> Result<Enclave, EnclaveError> {
    Enclave::boot(code_identity, config, device_secret)
}

impl Enclave {
    pub fn boot(
        code_identity: &[u8],
        config: &[u8],
        device_secret: &[u8; 32],
    ) -> Result<Self, EnclaveError> {
        if code_identity.is_empty() {
            return Err(EnclaveError::EmptyCodeIdentity);
        }
        if config.is_empty() {
            return Err(EnclaveError::EmptyConfig);
        }
        let measurement = Measurement::compute(code_identity, config);
        let salt = measurement.0 .0;
        let agreement =
            KeyPair::from_secret(KeyKind::Agreement, *hkdf32(device_secret, &salt, AGREEMENT_INFO));
        let signing =
            KeyPair::from_secret(KeyKind::Signing, *hkdf32(device_secret, &salt, SIGNING_INFO));
        Ok(Enclave {
            measurement,
            device_secret: Zeroizing::new(*device_secret),
            agreement,
            signing,
            monitor: RwLock::new(None),
        })
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    /// pk_TEE: the agreement key clients encrypt to.
    pub fn public_key(&self) -> PublicKey {
        self.agreement.public()
    }

    pub fn signing_public(&self) -> PublicKey {
        self.signing.public()
    }

    pub fn attest(&self, report_data: Digest, root: &KeyPair) -> Result<AttestationReport, EnclaveError> {
        let mut report = AttestationReport {
            measurement: self.measurement,
            report_data,
            enclave_signing_public: self.signing.public(),
            root_signature: Signature([0u8; 64]),
        };
        report.root_signature = root.sign(&report.signed_bytes())?;
        Ok(report)
    }

    fn seal_key(&self) -> Zeroizing<[u8; 32]> {
        hkdf32(self.device_secret.as_ref(), &self.measurement.0 .0, SEAL_INFO)
    }

    pub fn seal(&self, plaintext: &[u8]) -> SealedBlob {
        let nonce = random_nonce();
        let (ciphertext, tag) = aead_seal(&self.seal_key(), &nonce, plaintext, &self.measurement.0 .0);
        SealedBlob { nonce, ciphertext, tag, sealed_by: self.measurement }
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Zeroizing<Vec<u8>>, EnclaveError> {
        if blob.sealed_by != self.measurement {
            return Err(EnclaveError::SealIdentityMismatch);
        }
        Ok(aead_open(&self.seal_key(), &blob.nonce, &blob.ciphertext, &blob.tag, &self.measurement.0 .0)?)
    }

    /// Install (or clear) the canary monitor consulted on every `exec` return.
    pub fn set_monitor(&self, monitor: Option<Arc<CanaryMonitor>>) {
        *self.monitor.write() = monitor;
    }

    /// Run `op` inside the enclave boundary.
    ///
    /// The returned value (and the error, if any) is scanned by the installed
    /// monitor; a canary hit turns the result into [`ExecError::BoundaryViolation`].
    pub fn exec<T, E, F>(&self, operation: &'static str, op: F) -> Result<T, ExecError<E>>
    where
        T: BoundaryValue,
        E: fmt::Display,
        F: FnOnce(&InEnclave<'_>) -> Result<T, E>,
    {
        let ctx = InEnclave { enclave: self };
        let result = op(&ctx);
        let monitor = self.monitor.read().clone();
        if let Some(monitor) = monitor {
            let mut exported = Vec::new();
            match &result {
                Ok(v) => v.export_bytes(&mut exported),
                Err(e) => exported.extend_from_slice(e.to_string().as_bytes()),
            }
            if let Some(hit) = monitor.first_hit(&exported) {
                monitor.record_violation(operation);
                log::error!("boundary violation in enclave operation {operation} (canary #{hit})");
                return Err(ExecError::BoundaryViolation { operation, canary_index: hit });
            }
        }
        result.map_err(ExecError::Inner)
    }
}

#[derive(Debug, Error)]
pub enum ExecError<E> {
    #[error("plaintext canary #{canary_index} escaped enclave operation {operation}")]
    BoundaryViolation { operation: &'static str, canary_index: usize },
    #[error("{0}")]
    Inner(E),
}

impl<E> ExecError<E> {
    pub fn into_inner(self) -> Option<E> {
        match self {
            ExecError::Inner(e) => Some(e),
            ExecError::BoundaryViolation { .. } => None,
        }
    }
}

/// Capability handed to code running inside [`Enclave::exec`].
pub struct InEnclave<'a> {
    enclave: &'a Enclave,
}

impl<'a> InEnclave<'a> {
    pub fn enclave(&self) -> &'a Enclave {
        self.enclave
    }

    /// D_{sk_TEE}: open an envelope addressed to this enclave.
    pub fn open_envelope(
        &self,
        envelope: &EnvelopeCiphertext,
        aad: &[u8],
    ) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
        crypto::hybrid_decrypt(&self.enclave.agreement, envelope, aad)
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Zeroizing<Vec<u8>>, EnclaveError> {
        self.enclave.unseal(blob)
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        self.enclave.signing.sign(message).expect("enclave signing key has signing kind")
    }
}

impl Enclave {
    /// Sign with the enclave signing key. Used for audit entries, which carry
    /// only digests.
    pub fn sign_digest(&self, d: &Digest) -> Signature {
        self.signing.sign(&d.0).expect("enclave signing key has signing kind")
    }
}

/// Root-signed statement binding a measurement and caller data to an enclave key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationReport {
    pub measurement: Measurement,
    pub report_data: Digest,
    pub enclave_signing_public: PublicKey,
    pub root_signature: Signature,
}

impl AttestationReport {
    pub const WIRE_LEN: usize = 32 + 32 + 32 + 64;

    fn signed_bytes(&self) -> [u8; 96] {
        let mut m = [0u8; 96];
        m[..32].copy_from_slice(&self.measurement.0 .0);
        m[32..64].copy_from_slice(&self.report_data.0);
        m[64..].copy_from_slice(&self.enclave_signing_public.0);
        m
    }

    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[..96].copy_from_slice(&self.signed_bytes());
        out[96..].copy_from_slice(&self.root_signature.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveError> {
        if bytes.len() != Self::WIRE_LEN {
            return Err(EnclaveError::MalformedReport(format!(
                "expected {} bytes, got {}",
                Self::WIRE_LEN,
                bytes.len()
            )));
        }
        Ok(AttestationReport {
            measurement: Measurement(Digest(bytes[..32].try_into().unwrap())),
            report_data: Digest(bytes[32..64].try_into().unwrap()),
            enclave_signing_public: PublicKey(bytes[64..96].try_into().unwrap()),
            root_signature: Signature(bytes[96..].try_into().unwrap()),
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, EnclaveError> {
        let bytes = hex::decode(s.trim()).map_err(|e| EnclaveError::MalformedReport(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    BadRootSignature,
    MeasurementMismatch,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::BadRootSignature => "bad-root-signature",
            RejectReason::MeasurementMismatch => "measurement-mismatch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportVerdict {
    Accept,
    Reject(RejectReason),
}

impl ReportVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, ReportVerdict::Accept)
    }
}

pub fn verify_root_signature(root_public: &PublicKey, report: &AttestationReport) -> bool {
    crypto::verify(root_public, &report.signed_bytes(), &report.root_signature)
}

/// Accepts iff the root signature is valid and the measurement is the expected one.
/// The signature is checked first.
pub fn verify_report(
    root_public: &PublicKey,
    report: &AttestationReport,
    expected: &Measurement,
) -> ReportVerdict {
    if !verify_root_signature(root_public, report) {
        ReportVerdict::Reject(RejectReason::BadRootSignature)
    } else if report.measurement != *expected {
        ReportVerdict::Reject(RejectReason::MeasurementMismatch)
    } else {
        ReportVerdict::Accept
    }
}

/// State encrypted under a key derived from `(device_secret, measurement)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
    pub sealed_by: Measurement,
}

impl SealedBlob {
    /// `sealed_by ‖ nonce ‖ u32be(len) ‖ ciphertext ‖ tag`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + NONCE_LEN + 4 + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.sealed_by.0 .0);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Parses a blob from the front of `bytes`, returning it and the bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize), CryptoError> {
        let bad = |d: &str| CryptoError::Malformed { what: "sealed blob", detail: d.to_string() };
        const FIXED: usize = 32 + NONCE_LEN + 4;
        if bytes.len() < FIXED {
            return Err(bad("truncated header"));
        }
        let len = u32::from_be_bytes(bytes[FIXED - 4..FIXED].try_into().unwrap()) as usize;
        let total = FIXED + len + TAG_LEN;
        if bytes.len() < total {
            return Err(bad("truncated body"));
        }
        Ok((
            SealedBlob {
                sealed_by: Measurement(Digest(bytes[..32].try_into().unwrap())),
                nonce: bytes[32..32 + NONCE_LEN].try_into().unwrap(),
                ciphertext: bytes[FIXED..FIXED + len].to_vec(),
                tag: bytes[FIXED + len..total].try_into().unwrap(),
            },
            total,
        ))
    }
}

/// Values allowed to leave [`Enclave::exec`]. `export_bytes` writes the bytes
/// an observer outside the boundary would see; the canary monitor scans them.
pub trait BoundaryValue {
    fn export_bytes(&self, out: &mut Vec<u8>);
}

macro_rules! boundary_display {
    ($($t:ty),*) => {$(
        impl BoundaryValue for $t {
            fn export_bytes(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(self.to_string().as_bytes());
            }
        }
    )*};
}

boundary_display!(bool, u16, u32, u64, usize, i32, i64, f32, f64, String, Digest, Measurement);

impl BoundaryValue for () {
    fn export_bytes(&self, _: &mut Vec<u8>) {}
}

impl BoundaryValue for &str {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.as_bytes());
    }
}

impl BoundaryValue for PublicKey {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl BoundaryValue for Signature {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl BoundaryValue for EnvelopeCiphertext {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bytes());
    }
}

impl BoundaryValue for AttestationReport {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bytes());
    }
}

impl BoundaryValue for Vec<u8> {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self);
    }
}

impl<T: BoundaryValue> BoundaryValue for Vec<T> {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        for v in self {
            v.export_bytes(out);
            out.push(0);
        }
    }
}

impl<T: BoundaryValue> BoundaryValue for Option<T> {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        if let Some(v) = self {
            v.export_bytes(out);
        }
    }
}

impl<A: BoundaryValue, B: BoundaryValue> BoundaryValue for (A, B) {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        self.0.export_bytes(out);
        out.push(0);
        self.1.export_bytes(out);
    }
}

impl<A: BoundaryValue, B: BoundaryValue, C: BoundaryValue> BoundaryValue for (A, B, C) {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        self.0.export_bytes(out);
        out.push(0);
        self.1.export_bytes(out);
        out.push(0);
        self.2.export_bytes(out);
    }
}
