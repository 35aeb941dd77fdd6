//! Fixed cryptographic suite shared by every subsystem.
//!
//! SHA-256 for digests, Ed25519 for signatures, and an ECIES-style envelope
//! (X25519 + HKDF-SHA256 + AES-256-GCM) for data addressed to an enclave or a
//! client. Data keys are wrapped with plain AES-256-GCM under a master key.

use std::fmt;
use std::path::Path;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};
use zeroize::Zeroizing;

/// HKDF info label for envelope key derivation.
pub const HYBRID_INFO: &[u8] = b"crag/hybrid/v1";
const WRAP_AAD: &[u8] = b"crag/wrap/v1";

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const KEY_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("seed must be exactly 32 bytes, got {0}")]
    SeedLength(usize),
    #[error("invalid recipient public key")]
    InvalidRecipient,
    #[error("aad digest does not match envelope")]
    AadMismatch,
    #[error("authentication failed")]
    Authentication,
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("expected a {expected} key")]
    WrongKeyKind { expected: KeyKind },
    #[error("key file: {0}")]
    KeyFile(String),
}

fn malformed(what: &'static str, detail: impl Into<String>) -> CryptoError {
    CryptoError::Malformed { what, detail: detail.into() }
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Ok(Digest(decode_hex_array(s, "digest")?))
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        bytes
            .try_into()
            .map(Digest)
            .map_err(|_| malformed("digest", format!("length {}", bytes.len())))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn decode_hex_array<const N: usize>(
    s: &str,
    what: &'static str,
) -> Result<[u8; N], CryptoError> {
    let bytes = hex::decode(s.trim()).map_err(|e| malformed(what, e.to_string()))?;
    bytes
        .as_slice()
        .try_into()
        .map_err(|_| malformed(what, format!("expected {N} bytes, got {}", bytes.len())))
}

pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Digest over several parts, each length-prefixed so part boundaries are unambiguous.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    Signing,
    Agreement,
}

impl fmt::Display for KeyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyKind::Signing => "signing",
            KeyKind::Agreement => "agreement",
        })
    }
}

/// A 32-byte public key, tagged only by how the caller uses it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Ok(PublicKey(decode_hex_array(s, "public key")?))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.to_hex())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PublicKey::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Signing (Ed25519) or agreement (X25519) key pair.
///
/// The secret half is never handed out as bytes. It is used in place
/// (`sign`, `agree`) or written straight to a key file.
pub struct KeyPair {
    kind: KeyKind,
    public: PublicKey,
    secret: Zeroizing<[u8; 32]>,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("kind", &self.kind)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl Clone for KeyPair {
    fn clone(&self) -> Self {
        KeyPair { kind: self.kind, public: self.public, secret: self.secret.clone() }
    }
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    kind: KeyKind,
    public: String,
    secret: String,
}

impl KeyPair {
    pub fn generate(kind: KeyKind, seed: Option<&[u8]>) -> Result<Self, CryptoError> {
        let secret: [u8; 32] = match seed {
            Some(s) => s.try_into().map_err(|_| CryptoError::SeedLength(s.len()))?,
            None => {
                let mut b = [0u8; 32];
                OsRng.fill_bytes(&mut b);
                b
            }
        };
        Ok(Self::from_secret(kind, secret))
    }

    pub(crate) fn from_secret(kind: KeyKind, secret: [u8; 32]) -> Self {
        let public = match kind {
            KeyKind::Signing => SigningKey::from_bytes(&secret).verifying_key().to_bytes(),
            KeyKind::Agreement => XPublicKey::from(&StaticSecret::from(secret)).to_bytes(),
        };
        KeyPair { kind, public: PublicKey(public), secret: Zeroizing::new(secret) }
    }

    pub fn kind(&self) -> KeyKind {
        self.kind
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: &[u8]) -> Result<Signature, CryptoError> {
        if self.kind != KeyKind::Signing {
            return Err(CryptoError::WrongKeyKind { expected: KeyKind::Signing });
        }
        Ok(sign(&SigningKey::from_bytes(&self.secret), message))
    }

    fn agreement_secret(&self) -> Result<StaticSecret, CryptoError> {
        if self.kind != KeyKind::Agreement {
            return Err(CryptoError::WrongKeyKind { expected: KeyKind::Agreement });
        }
        Ok(StaticSecret::from(*self.secret))
    }

    /// Persist the pair as a JSON key file. The only route by which secret
    /// material leaves this type.
    pub fn write_key_file(&self, path: &Path) -> Result<(), CryptoError> {
        let file = KeyFile {
            kind: self.kind,
            public: self.public.to_hex(),
            secret: hex::encode(*self.secret),
        };
        let body = serde_json::to_string_pretty(&file).map_err(|e| CryptoError::KeyFile(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| CryptoError::KeyFile(format!("{}: {e}", path.display())))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let _ = std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600));
        }
        Ok(())
    }

    pub fn read_key_file(path: &Path) -> Result<Self, CryptoError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CryptoError::KeyFile(format!("{}: {e}", path.display())))?;
        let file: KeyFile =
            serde_json::from_str(&body).map_err(|e| CryptoError::KeyFile(e.to_string()))?;
        let secret = Zeroizing::new(decode_hex_array::<32>(&file.secret, "secret key")?);
        let pair = Self::from_secret(file.kind, *secret);
        if pair.public.to_hex() != file.public.trim() {
            return Err(CryptoError::KeyFile("public key does not match secret".into()));
        }
        Ok(pair)
    }

    #[cfg(any(test, feature = "test-support"))]
    pub fn secret_bytes_for_test(&self) -> [u8; 32] {
        *self.secret
    }
}

pub fn generate_keypair(kind: KeyKind, seed: Option<&[u8]>) -> Result<KeyPair, CryptoError> {
    KeyPair::generate(kind, seed)
}

/// Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        bytes
            .try_into()
            .map(Signature)
            .map_err(|_| malformed("signature", format!("length {}", bytes.len())))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Ok(Signature(decode_hex_array(s, "signature")?))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", &self.to_hex()[..16])
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Signature::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

fn sign(key: &SigningKey, message: &[u8]) -> Signature {
    Signature(key.sign(message).to_bytes())
}

/// Ed25519 verification. Malformed public keys simply fail to verify.
pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    vk.verify(message, &sig).is_ok()
}

/// Verification over raw signature bytes, rejecting anything not 64 bytes long.
pub fn verify_bytes(public: &PublicKey, message: &[u8], signature: &[u8]) -> Result<bool, CryptoError> {
    Ok(verify(public, message, &Signature::from_slice(signature)?))
}

/// Hybrid-encrypted message addressed to an X25519 public key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvelopeCiphertext {
    pub ephemeral_public: [u8; 32],
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
    pub aad_digest: Digest,
}

impl EnvelopeCiphertext {
    /// `ephemeral_public ‖ nonce ‖ aad_digest ‖ u32be(len) ‖ ciphertext ‖ tag`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + NONCE_LEN + 32 + 4 + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.ephemeral_public);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.aad_digest.0);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        const FIXED: usize = 32 + NONCE_LEN + 32 + 4;
        if bytes.len() < FIXED + TAG_LEN {
            return Err(malformed("envelope", format!("length {}", bytes.len())));
        }
        let len = u32::from_be_bytes(bytes[FIXED - 4..FIXED].try_into().unwrap()) as usize;
        if bytes.len() != FIXED + len + TAG_LEN {
            return Err(malformed(
                "envelope",
                format!("declared ciphertext length {len} does not fit {} bytes", bytes.len()),
            ));
        }
        Ok(EnvelopeCiphertext {
            ephemeral_public: bytes[..32].try_into().unwrap(),
            nonce: bytes[32..32 + NONCE_LEN].try_into().unwrap(),
            aad_digest: Digest(bytes[32 + NONCE_LEN..FIXED - 4].try_into().unwrap()),
            ciphertext: bytes[FIXED..FIXED + len].to_vec(),
            tag: bytes[FIXED + len..].try_into().unwrap(),
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|e| malformed("envelope", e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

fn envelope_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> Zeroizing<[u8; 32]> {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = Zeroizing::new([0u8; 32]);
    hk.expand(HYBRID_INFO, okm.as_mut()).expect("32 bytes is a valid HKDF length");
    okm
}

pub fn random_nonce() -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut n);
    n
}

pub fn random_key() -> Zeroizing<[u8; KEY_LEN]> {
    let mut k = Zeroizing::new([0u8; KEY_LEN]);
    OsRng.fill_bytes(k.as_mut());
    k
}

/// AES-256-GCM seal returning `(ciphertext, tag)`.
pub(crate) fn aead_seal(
    key: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    plaintext: &[u8],
    aad: &[u8],
) -> (Vec<u8>, [u8; TAG_LEN]) {
    let cipher = Aes256Gcm::new(key.into());
    let mut ct = cipher
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption of in-memory buffers cannot fail");
    let tag: [u8; TAG_LEN] = ct[ct.len() - TAG_LEN..].try_into().unwrap();
    ct.truncate(ct.len() - TAG_LEN);
    (ct, tag)
}

pub(crate) fn aead_open(
    key: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
    tag: &[u8; TAG_LEN],
    aad: &[u8],
) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
    let cipher = Aes256Gcm::new(key.into());
    let mut joined = Vec::with_capacity(ciphertext.len() + TAG_LEN);
    joined.extend_from_slice(ciphertext);
    joined.extend_from_slice(tag);
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: &joined, aad })
        .map(Zeroizing::new)
        .map_err(|_| CryptoError::Authentication)
}

pub fn hybrid_encrypt(
    recipient: &PublicKey,
    plaintext: &[u8],
    aad: &[u8],
) -> Result<EnvelopeCiphertext, CryptoError> {
    let ephemeral = StaticSecret::random_from_rng(OsRng);
    let ephemeral_public = XPublicKey::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&XPublicKey::from(recipient.0));
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidRecipient);
    }
    let key = envelope_key(shared.as_bytes(), &ephemeral_public, &recipient.0);
    let nonce = random_nonce();
    let (ciphertext, tag) = aead_seal(&key, &nonce, plaintext, aad);
    Ok(EnvelopeCiphertext { ephemeral_public, nonce, ciphertext, tag, aad_digest: digest(aad) })
}

/// Inverse of [`hybrid_encrypt`]. Either the full plaintext or an error; the
/// aad digest is checked before any AEAD work happens.
pub fn hybrid_decrypt(
    recipient: &KeyPair,
    envelope: &EnvelopeCiphertext,
    aad: &[u8],
) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
    let secret = recipient.agreement_secret()?;
    if digest(aad) != envelope.aad_digest {
        return Err(CryptoError::AadMismatch);
    }
    let shared = secret.diffie_hellman(&XPublicKey::from(envelope.ephemeral_public));
    if !shared.was_contributory() {
        return Err(CryptoError::Authentication);
    }
    let key = envelope_key(shared.as_bytes(), &envelope.ephemeral_public, &recipient.public().0);
    aead_open(&key, &envelope.nonce, &envelope.ciphertext, &envelope.tag, aad)
}

/// A 32-byte data key encrypted under a master key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WrappedKey {
    pub nonce: [u8; NONCE_LEN],
    pub wrapped: [u8; KEY_LEN + TAG_LEN],
}

impl WrappedKey {
    pub const LEN: usize = NONCE_LEN + KEY_LEN + TAG_LEN;

    pub fn to_bytes(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..NONCE_LEN].copy_from_slice(&self.nonce);
        out[NONCE_LEN..].copy_from_slice(&self.wrapped);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != Self::LEN {
            return Err(malformed("wrapped key", format!("length {}", bytes.len())));
        }
        Ok(WrappedKey {
            nonce: bytes[..NONCE_LEN].try_into().unwrap(),
            wrapped: bytes[NONCE_LEN..].try_into().unwrap(),
        })
    }
}

pub fn wrap_data_key(master: &[u8; KEY_LEN], data_key: &[u8; KEY_LEN]) -> WrappedKey {
    let nonce = random_nonce();
    let (ct, tag) = aead_seal(master, &nonce, data_key, WRAP_AAD);
    let mut wrapped = [0u8; KEY_LEN + TAG_LEN];
    wrapped[..KEY_LEN].copy_from_slice(&ct);
    wrapped[KEY_LEN..].copy_from_slice(&tag);
    WrappedKey { nonce, wrapped }
}

pub fn unwrap_data_key(
    master: &[u8; KEY_LEN],
    wrapped: &WrappedKey,
) -> Result<Zeroizing<[u8; KEY_LEN]>, CryptoError> {
    let tag: [u8; TAG_LEN] = wrapped.wrapped[KEY_LEN..].try_into().unwrap();
    let pt = aead_open(master, &wrapped.nonce, &wrapped.wrapped[..KEY_LEN], &tag, WRAP_AAD)?;
    let mut key = Zeroizing::new([0u8; KEY_LEN]);
    key.copy_from_slice(&pt);
    Ok(key)
}

/// HKDF-SHA256 expand of 32 bytes.
pub(crate) fn hkdf32(ikm: &[u8], salt: &[u8], info: &[u8]) -> Zeroizing<[u8; 32]> {
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    let mut okm = Zeroizing::new([0u8; 32]);
    hk.expand(info, okm.as_mut()).expect("32 bytes is a valid HKDF length");
    okm
}
