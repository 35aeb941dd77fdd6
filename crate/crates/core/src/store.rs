//! Envelope-encrypted vector store.
//!
//! Every record version carries its own data key, wrapped under the store
//! master key. The master key itself only exists on disk as a blob sealed to
//! the enclave identity and is unsealed per operation inside `exec`.
//!
//! File layout: `"CRAGVST1" ‖ u32 version ‖ u32 dim ‖ sealed master key`,
//! then records as `u32 length ‖ record bytes`. Updates and deletes patch the
//! tombstone byte (and, for deletes, zero the ciphertext regions) in place;
//! new versions are appended.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::audit::{Actor, AuditError, AuditLog, EventKind};
use crate::crypto::{
    self, aead_open, aead_seal, digest, random_key, random_nonce, CryptoError, Digest,
    EnvelopeCiphertext, PublicKey, WrappedKey, NONCE_LEN, TAG_LEN,
};
use crate::embedder::{self, EmbedError, Embedding};
use crate::enclave::{BoundaryValue, Enclave, EnclaveError, ExecError, InEnclave, SealedBlob};
use crate::governance::{canonical_params, ExecutedProposal, Operation};
use crate::privacy::{redact_record, Redactor};

pub const STORE_MAGIC: &[u8; 8] = b"CRAGVST1";
pub const STORE_VERSION: u32 = 1;
pub const ID_WIDTH: usize = 64;
const EXTRACT_AAD: &[u8] = b"crag/extract/v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {0} already exists")]
    DuplicateId(RecordId),
    #[error("unknown record {0}")]
    UnknownId(RecordId),
    #[error("record text is empty")]
    EmptyText,
    #[error("invalid identifier {0:?}")]
    BadIdentifier(String),
    #[error("caller is not authorized to modify record {0}")]
    Unauthorized(RecordId),
    #[error("governance token rejected: {0}")]
    BadToken(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("store dimension {found} does not match configured dimension {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("not a store file (bad magic)")]
    BadMagic,
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("store io: {0}")]
    Io(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("boundary violation in {0}")]
    Boundary(&'static str),
}

impl From<ExecError<StoreError>> for StoreError {
    fn from(e: ExecError<StoreError>) -> Self {
        match e {
            ExecError::Inner(e) => e,
            ExecError::BoundaryViolation { operation, .. } => StoreError::Boundary(operation),
        }
    }
}

fn io_err(e: std::io::Error) -> StoreError {
    StoreError::Io(e.to_string())
}

fn valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= ID_WIDTH
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "_.:@-".contains(c))
}

macro_rules! identifier {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(s: &str) -> Result<Self, StoreError> {
                if valid_identifier(s) {
                    Ok($name(s.to_string()))
                } else {
                    Err(StoreError::BadIdentifier(s.chars().take(16).collect()))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }

            pub fn digest(&self) -> Digest {
                digest(self.0.as_bytes())
            }

            fn to_fixed(&self) -> [u8; ID_WIDTH] {
                let mut out = [0u8; ID_WIDTH];
                out[..self.0.len()].copy_from_slice(self.0.as_bytes());
                out
            }

            fn from_fixed(b: &[u8]) -> Result<Self, StoreError> {
                let end = b.iter().position(|x| *x == 0).unwrap_or(b.len());
                let s = std::str::from_utf8(&b[..end])
                    .map_err(|_| StoreError::Corrupt("identifier is not utf-8".into()))?;
                Self::new(s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl TryFrom<String> for $name {
            type Error = StoreError;
            fn try_from(s: String) -> Result<Self, StoreError> {
                $name::new(&s)
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.0
            }
        }

        impl BoundaryValue for $name {
            fn export_bytes(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(self.0.as_bytes());
            }
        }
    };
}

identifier!(
    /// Record identifier, at most 64 bytes of `[A-Za-z0-9_.:@-]`.
    RecordId
);
identifier!(
    /// Registered client (contributor or querier).
    ClientId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Private,
    Open,
}

impl Visibility {
    fn code(self) -> u8 {
        match self {
            Visibility::Private => 0,
            Visibility::Open => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Open,
    Private,
    Both,
}

impl Scope {
    fn admits(self, v: Visibility) -> bool {
        matches!(
            (self, v),
            (Scope::Both, _) | (Scope::Open, Visibility::Open) | (Scope::Private, Visibility::Private)
        )
    }
}

/// A contribution as submitted, before redaction or encryption.
#[derive(Clone, PartialEq, Eq)]
pub struct CommunityRecord {
    pub record_id: RecordId,
    pub text: String,
    pub visibility: Visibility,
    pub contributor: ClientId,
}

impl fmt::Debug for CommunityRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CommunityRecord")
            .field("record_id", &self.record_id)
            .field("text", &format_args!("<{} bytes>", self.text.len()))
            .field("visibility", &self.visibility)
            .field("contributor", &self.contributor)
            .finish()
    }
}

impl CommunityRecord {
    pub fn new(id: &str, text: &str, visibility: Visibility, contributor: &str) -> Result<Self, StoreError> {
        if text.trim().is_empty() {
            return Err(StoreError::EmptyText);
        }
        Ok(CommunityRecord {
            record_id: RecordId::new(id)?,
            text: text.to_string(),
            visibility,
            contributor: ClientId::new(contributor)?,
        })
    }
}

/// AES-256-GCM ciphertext with its nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AeadBlob {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl AeadBlob {
    fn seal(key: &[u8; 32], plaintext: &[u8], aad: &[u8]) -> Self {
        let nonce = random_nonce();
        let (ciphertext, tag) = aead_seal(key, &nonce, plaintext, aad);
        AeadBlob { nonce, ciphertext, tag }
    }

    fn open(&self, key: &[u8; 32], aad: &[u8]) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
        aead_open(key, &self.nonce, &self.ciphertext, &self.tag, aad)
    }

    fn encoded_len(&self) -> usize {
        4 + NONCE_LEN + self.ciphertext.len() + TAG_LEN
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&((NONCE_LEN + self.ciphertext.len() + TAG_LEN) as u32).to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
    }

    fn zero(&mut self) {
        self.nonce = [0; NONCE_LEN];
        self.ciphertext.iter_mut().for_each(|b| *b = 0);
        self.tag = [0; TAG_LEN];
    }
}

/// One persisted record version. Contains no plaintext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedVectorRecord {
    pub record_id: RecordId,
    pub contributor: ClientId,
    pub wrapped_key: WrappedKey,
    pub embedding_ct: AeadBlob,
    pub payload_ct: AeadBlob,
    pub visibility: Visibility,
    pub tombstone: bool,
    pub created_seq: u64,
    /// Digest of the submitted text, linking this version to its source.
    pub source_digest: Digest,
}

impl EncryptedVectorRecord {
    fn aad(&self, part: &[u8]) -> Vec<u8> {
        record_aad(&self.record_id, self.created_seq, part)
    }

    /// Record bytes, fields in declaration order, ids fixed-width, integers big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            2 * ID_WIDTH + WrappedKey::LEN + self.embedding_ct.encoded_len() + self.payload_ct.encoded_len() + 42,
        );
        out.extend_from_slice(&self.record_id.to_fixed());
        out.extend_from_slice(&self.contributor.to_fixed());
        out.extend_from_slice(&self.wrapped_key.to_bytes());
        self.embedding_ct.write(&mut out);
        self.payload_ct.write(&mut out);
        out.push(self.visibility.code());
        out.push(self.tombstone as u8);
        out.extend_from_slice(&self.created_seq.to_be_bytes());
        out.extend_from_slice(&self.source_digest.0);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, StoreError> {
        let mut c = Cursor { b, pos: 0 };
        let record_id = RecordId::from_fixed(c.take(ID_WIDTH)?)?;
        let contributor = ClientId::from_fixed(c.take(ID_WIDTH)?)?;
        let wrapped_key = WrappedKey::from_bytes(c.take(WrappedKey::LEN)?)?;
        let embedding_ct = c.blob()?;
        let payload_ct = c.blob()?;
        let visibility = match c.take(1)?[0] {
            0 => Visibility::Private,
            1 => Visibility::Open,
            _ => return Err(corrupt("bad visibility")),
        };
        let tombstone = match c.take(1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(corrupt("bad tombstone flag")),
        };
        let created_seq = u64::from_be_bytes(c.take(8)?.try_into().unwrap());
        let source_digest = Digest(c.take(32)?.try_into().unwrap());
        if c.pos != b.len() {
            return Err(corrupt("trailing bytes in record"));
        }
        Ok(EncryptedVectorRecord {
            record_id,
            contributor,
            wrapped_key,
            embedding_ct,
            payload_ct,
            visibility,
            tombstone,
            created_seq,
            source_digest,
        })
    }

    /// Byte offsets (relative to the record start) of the tombstone flag and
    /// of the regions zeroed on delete.
    fn layout(&self) -> RecordLayout {
        let wrapped = 2 * ID_WIDTH;
        let emb = wrapped + WrappedKey::LEN;
        let payload = emb + self.embedding_ct.encoded_len();
        let vis = payload + self.payload_ct.encoded_len();
        RecordLayout {
            wrapped: wrapped..emb,
            embedding: emb + 4..payload,
            payload: payload + 4..vis,
            tombstone: vis + 1,
        }
    }
}

impl BoundaryValue for EncryptedVectorRecord {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bytes());
    }
}

fn corrupt(m: &str) -> StoreError {
    StoreError::Corrupt(m.to_string())
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let s = self.b.get(self.pos..self.pos + n).ok_or_else(|| corrupt("truncated record"))?;
        self.pos += n;
        Ok(s)
    }

    fn blob(&mut self) -> Result<AeadBlob, StoreError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as usize;
        if len < NONCE_LEN + TAG_LEN {
            return Err(corrupt("ciphertext too short"));
        }
        let body = self.take(len)?;
        Ok(AeadBlob {
            nonce: body[..NONCE_LEN].try_into().unwrap(),
            ciphertext: body[NONCE_LEN..len - TAG_LEN].to_vec(),
            tag: body[len - TAG_LEN..].try_into().unwrap(),
        })
    }
}

struct RecordLayout {
    wrapped: std::ops::Range<usize>,
    embedding: std::ops::Range<usize>,
    payload: std::ops::Range<usize>,
    tombstone: usize,
}

fn record_aad(id: &RecordId, seq: u64, part: &[u8]) -> Vec<u8> {
    let mut aad = b"crag/record/v1".to_vec();
    aad.extend_from_slice(&id.to_fixed());
    aad.extend_from_slice(&seq.to_be_bytes());
    aad.extend_from_slice(part);
    aad
}

/// A retrieved chunk with its text. Only exists inside an enclave extent;
/// deliberately not a [`BoundaryValue`].
pub struct RetrievedChunk {
    pub record_id: RecordId,
    pub score: f32,
    pub text: Zeroizing<String>,
}

impl fmt::Debug for RetrievedChunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RetrievedChunk")
            .field("record_id", &self.record_id)
            .field("score", &self.score)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub record_id: RecordId,
    pub score: f32,
}

impl BoundaryValue for ScoredId {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        self.record_id.export_bytes(out);
        out.push(0);
        self.score.export_bytes(out);
    }
}

/// Ordering used for every ranked list: score descending, then id ascending.
pub fn rank_order(a_score: f32, a_id: &RecordId, b_score: f32, b_id: &RecordId) -> std::cmp::Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub record_id: RecordId,
    pub created_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteConfirmation {
    pub record_id: RecordId,
    pub versions_zeroed: usize,
    pub proposal_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub dim: usize,
    pub live: usize,
    pub tombstoned: usize,
}

struct Version {
    record: EncryptedVectorRecord,
    /// Offset of the record bytes (after the length prefix) in the file.
    offset: Option<u64>,
}

struct State {
    versions: Vec<Version>,
    live: HashMap<RecordId, usize>,
    known: HashSet<RecordId>,
    next_seq: u64,
    file: Option<File>,
}

pub struct VectorStore {
    enclave: Arc<Enclave>,
    audit: Arc<AuditLog>,
    dim: usize,
    sealed_master: SealedBlob,
    path: Option<PathBuf>,
    state: RwLock<State>,
}

impl fmt::Debug for VectorStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorStore").field("dim", &self.dim).field("path", &self.path).finish_non_exhaustive()
    }
}

fn header_bytes(dim: usize, sealed: &SealedBlob) -> Vec<u8> {
    let mut out = STORE_MAGIC.to_vec();
    out.extend_from_slice(&STORE_VERSION.to_be_bytes());
    out.extend_from_slice(&(dim as u32).to_be_bytes());
    out.extend_from_slice(&sealed.to_bytes());
    out
}

impl VectorStore {
    pub fn in_memory(enclave: Arc<Enclave>, audit: Arc<AuditLog>, dim: usize) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDimension.into());
        }
        let sealed_master = enclave.seal(random_key().as_ref());
        Ok(VectorStore {
            enclave,
            audit,
            dim,
            sealed_master,
            path: None,
            state: RwLock::new(State {
                versions: Vec::new(),
                live: HashMap::new(),
                known: HashSet::new(),
                next_seq: 0,
                file: None,
            }),
        })
    }

    /// Open the store file at `path`, creating it if missing. An existing file
    /// must have dimension `dim` and a master key sealed to this enclave.
    pub fn open_or_create(
        path: &Path,
        enclave: Arc<Enclave>,
        audit: Arc<AuditLog>,
        dim: usize,
    ) -> Result<Self, StoreError> {
        if path.exists() {
            return Self::open(path, enclave, audit, dim);
        }
        let mut store = Self::in_memory(enclave, audit, dim)?;
        let mut file = OpenOptions::new().create_new(true).read(true).write(true).open(path).map_err(io_err)?;
        file.write_all(&header_bytes(dim, &store.sealed_master)).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
        store.path = Some(path.to_path_buf());
        store.state.get_mut().file = Some(file);
        Ok(store)
    }

    pub fn open(path: &Path, enclave: Arc<Enclave>, audit: Arc<AuditLog>, dim: usize) -> Result<Self, StoreError> {
        let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(io_err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err)?;
        if bytes.len() < 16 || &bytes[..8] != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = u32::from_be_bytes(bytes[8..12].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let found = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if found != dim {
            return Err(StoreError::DimensionMismatch { found, expected: dim });
        }
        let (sealed_master, used) = SealedBlob::read_from(&bytes[16..])?;
        enclave.unseal(&sealed_master)?;
        let mut pos = 16 + used;
        let mut state = State {
            versions: Vec::new(),
            live: HashMap::new(),
            known: HashSet::new(),
            next_seq: 0,
            file: None,
        };
        while pos < bytes.len() {
            let len_bytes = bytes.get(pos..pos + 4).ok_or_else(|| StoreError::Corrupt("truncated length".into()))?;
            let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
            let body = bytes
                .get(pos + 4..pos + 4 + len)
                .ok_or_else(|| StoreError::Corrupt("truncated record".into()))?;
            let record = EncryptedVectorRecord::from_bytes(body)?;
            state.next_seq = state.next_seq.max(record.created_seq + 1);
            state.known.insert(record.record_id.clone());
            if !record.tombstone {
                state.live.insert(record.record_id.clone(), state.versions.len());
            }
            state.versions.push(Version { record, offset: Some((pos + 4) as u64) });
            pos += 4 + len;
        }
        state.file = Some(file);
        Ok(VectorStore { enclave, audit, dim, sealed_master, path: Some(path.to_path_buf()), state: RwLock::new(state) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn enclave(&self) -> &Arc<Enclave> {
        &self.enclave
    }

    pub fn stats(&self) -> StoreStats {
        let s = self.state.read();
        StoreStats { dim: self.dim, live: s.live.len(), tombstoned: s.versions.len() - s.live.len() }
    }

    /// Snapshot of every stored version, including tombstones.
    pub fn records(&self) -> Vec<EncryptedVectorRecord> {
        self.state.read().versions.iter().map(|v| v.record.clone()).collect()
    }

    pub fn live_record(&self, id: &RecordId) -> Option<EncryptedVectorRecord> {
        let s = self.state.read();
        s.live.get(id).map(|&i| s.versions[i].record.clone())
    }

    fn master<'a>(&self, cx: &InEnclave<'a>) -> Result<Zeroizing<[u8; 32]>, StoreError> {
        let bytes = cx.unseal(&self.sealed_master)?;
        let key: [u8; 32] =
            bytes.as_slice().try_into().map_err(|_| StoreError::Corrupt("master key length".into()))?;
        Ok(Zeroizing::new(key))
    }

    /// Redact (private only), embed, and encrypt one version. Runs in-enclave.
    fn seal_version(
        &self,
        cx: &InEnclave<'_>,
        record: &CommunityRecord,
        redactor: &Redactor,
        created_seq: u64,
    ) -> Result<EncryptedVectorRecord, StoreError> {
        let safe = redact_record(redactor, record);
        let retrieval_text = Zeroizing::new(safe.redacted_text);
        let embedding = embedder::embed(&retrieval_text, self.dim)?;
        let data_key = random_key();
        let master = self.master(cx)?;
        let aad = |part: &[u8]| record_aad(&record.record_id, created_seq, part);
        Ok(EncryptedVectorRecord {
            record_id: record.record_id.clone(),
            contributor: record.contributor.clone(),
            wrapped_key: crypto::wrap_data_key(&master, &data_key),
            embedding_ct: AeadBlob::seal(&data_key, &embedding.to_bytes(), &aad(b"embedding")),
            payload_ct: AeadBlob::seal(&data_key, retrieval_text.as_bytes(), &aad(b"payload")),
            visibility: record.visibility,
            tombstone: false,
            created_seq,
            source_digest: safe.source_digest,
        })
    }

    fn append_version(&self, state: &mut State, record: EncryptedVectorRecord) -> Result<(), StoreError> {
        let mut offset = None;
        if let Some(file) = state.file.as_mut() {
            let bytes = record.to_bytes();
            let end = file.seek(SeekFrom::End(0)).map_err(io_err)?;
            let mut framed = Vec::with_capacity(bytes.len() + 4);
            framed.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            framed.extend_from_slice(&bytes);
            file.write_all(&framed).map_err(io_err)?;
            file.sync_data().map_err(io_err)?;
            offset = Some(end + 4);
        }
        state.known.insert(record.record_id.clone());
        state.live.insert(record.record_id.clone(), state.versions.len());
        state.next_seq = state.next_seq.max(record.created_seq + 1);
        state.versions.push(Version { record, offset });
        Ok(())
    }

    /// Mark version `idx` dead. With `zero`, also wipe its key and ciphertexts.
    fn tombstone_version(state: &mut State, idx: usize, zero: bool) -> Result<(), StoreError> {
        let v = &mut state.versions[idx];
        let layout = v.record.layout();
        v.record.tombstone = true;
        if zero {
            v.record.wrapped_key = WrappedKey { nonce: [0; NONCE_LEN], wrapped: [0; 48] };
            v.record.embedding_ct.zero();
            v.record.payload_ct.zero();
        }
        if let (Some(file), Some(off)) = (state.file.as_mut(), v.offset) {
            if zero {
                for region in [layout.wrapped, layout.embedding, layout.payload] {
                    file.seek(SeekFrom::Start(off + region.start as u64)).map_err(io_err)?;
                    file.write_all(&vec![0u8; region.len()]).map_err(io_err)?;
                }
            }
            file.seek(SeekFrom::Start(off + layout.tombstone as u64)).map_err(io_err)?;
            file.write_all(&[1]).map_err(io_err)?;
            file.sync_data().map_err(io_err)?;
        }
        state.live.retain(|_, i| *i != idx);
        Ok(())
    }

    pub fn ingest(&self, record: &CommunityRecord, redactor: &Redactor) -> Result<IngestReceipt, StoreError> {
        let mut state = self.state.write();
        if state.known.contains(&record.record_id) {
            return Err(StoreError::DuplicateId(record.record_id.clone()));
        }
        let seq = state.next_seq;
        let sealed = self.enclave.exec("ingest", |cx| self.seal_version(cx, record, redactor, seq))?;
        let source = sealed.source_digest;
        self.append_version(&mut state, sealed)?;
        drop(state);
        self.audit.append_event(
            EventKind::Ingest,
            &Actor::new(record.contributor.as_str())?,
            vec![record.record_id.digest(), source],
        )?;
        Ok(IngestReceipt { record_id: record.record_id.clone(), created_seq: seq })
    }

    /// Replace a record's content. Only the original contributor may do this.
    pub fn update_record(
        &self,
        record_id: &RecordId,
        new_text: &str,
        redactor: &Redactor,
        caller: &ClientId,
    ) -> Result<u64, StoreError> {
        if new_text.trim().is_empty() {
            return Err(StoreError::EmptyText);
        }
        let mut state = self.state.write();
        let idx = *state.live.get(record_id).ok_or_else(|| StoreError::UnknownId(record_id.clone()))?;
        let old = state.versions[idx].record.clone();
        if &old.contributor != caller {
            return Err(StoreError::Unauthorized(record_id.clone()));
        }
        let seq = state.next_seq;
        let next = CommunityRecord {
            record_id: record_id.clone(),
            text: new_text.to_string(),
            visibility: old.visibility,
            contributor: old.contributor.clone(),
        };
        let sealed = self.enclave.exec("update", |cx| self.seal_version(cx, &next, redactor, seq))?;
        let new_digest = sealed.source_digest;
        Self::tombstone_version(&mut state, idx, false)?;
        self.append_version(&mut state, sealed)?;
        drop(state);
        self.audit.append_event(
            EventKind::Update,
            &Actor::new(caller.as_str())?,
            vec![record_id.digest(), old.source_digest, new_digest],
        )?;
        Ok(seq)
    }

    fn check_token(token: &ExecutedProposal, op: Operation, record_id: &RecordId) -> Result<(), StoreError> {
        if token.operation() != op {
            return Err(StoreError::BadToken(format!("token authorizes {}, not {}", token.operation(), op)));
        }
        let expected = canonical_params(op, &[("record_id", record_id.as_str().as_bytes())]);
        if token.payload_digest() != digest(&expected) {
            return Err(StoreError::BadToken("token parameters name a different record".into()));
        }
        Ok(())
    }

    /// Tombstone every version of the record and zero its key material and
    /// ciphertexts, in memory and on disk. Consumes the governance token.
    pub fn delete_record(&self, record_id: &RecordId, token: ExecutedProposal) -> Result<DeleteConfirmation, StoreError> {
        Self::check_token(&token, Operation::DeleteRecord, record_id)?;
        let mut state = self.state.write();
        if !state.live.contains_key(record_id) {
            return Err(StoreError::UnknownId(record_id.clone()));
        }
        let idxs: Vec<usize> = state
            .versions
            .iter()
            .enumerate()
            .filter(|(_, v)| &v.record.record_id == record_id)
            .map(|(i, _)| i)
            .collect();
        for &i in &idxs {
            Self::tombstone_version(&mut state, i, true)?;
        }
        drop(state);
        self.audit.append_event(
            EventKind::Delete,
            &Actor::enclave(),
            vec![record_id.digest(), token.proposal_digest()],
        )?;
        Ok(DeleteConfirmation {
            record_id: record_id.clone(),
            versions_zeroed: idxs.len(),
            proposal_id: token.proposal_id().to_string(),
        })
    }

    /// Re-encrypt a live record's retrieval text to `recipient`.
    pub fn extract_record(
        &self,
        record_id: &RecordId,
        recipient: &PublicKey,
        token: ExecutedProposal,
    ) -> Result<EnvelopeCiphertext, StoreError> {
        let expected = canonical_params(
            Operation::ExtractRecord,
            &[("record_id", record_id.as_str().as_bytes()), ("recipient", &recipient.0)],
        );
        if token.operation() != Operation::ExtractRecord || token.payload_digest() != digest(&expected) {
            return Err(StoreError::BadToken("token does not authorize this extraction".into()));
        }
        let state = self.state.read();
        let idx = *state.live.get(record_id).ok_or_else(|| StoreError::UnknownId(record_id.clone()))?;
        let record = &state.versions[idx].record;
        let env = self.enclave.exec("extract", |cx| {
            let text = self.open_payload(cx, record)?;
            Ok::<_, StoreError>(crypto::hybrid_encrypt(recipient, text.as_bytes(), EXTRACT_AAD)?)
        })?;
        drop(state);
        self.audit.append_event(
            EventKind::Execution,
            &Actor::enclave(),
            vec![record_id.digest(), token.proposal_digest(), digest(&env.to_bytes())],
        )?;
        Ok(env)
    }

    pub const EXTRACT_AAD: &'static [u8] = EXTRACT_AAD;

    fn open_embedding(&self, master: &[u8; 32], r: &EncryptedVectorRecord) -> Result<Embedding, StoreError> {
        let key = crypto::unwrap_data_key(master, &r.wrapped_key)?;
        let bytes = r.embedding_ct.open(&key, &r.aad(b"embedding"))?;
        let e = Embedding::from_bytes(&bytes)?;
        if e.dim() != self.dim {
            return Err(StoreError::Corrupt(format!("record {} has dimension {}", r.record_id, e.dim())));
        }
        Ok(e)
    }

    fn open_payload(&self, cx: &InEnclave<'_>, r: &EncryptedVectorRecord) -> Result<Zeroizing<String>, StoreError> {
        let master = self.master(cx)?;
        let key = crypto::unwrap_data_key(&master, &r.wrapped_key)?;
        let bytes = r.payload_ct.open(&key, &r.aad(b"payload"))?;
        String::from_utf8(bytes.to_vec())
            .map(Zeroizing::new)
            .map_err(|_| StoreError::Corrupt("payload is not utf-8".into()))
    }

    fn rank(&self, cx: &InEnclave<'_>, state: &State, query: &Embedding, k: usize, scope: Scope) -> Result<Vec<(usize, f32)>, StoreError> {
        let master = self.master(cx)?;
        let mut scored = Vec::with_capacity(state.live.len());
        for &idx in state.live.values() {
            let r = &state.versions[idx].record;
            if r.tombstone || !scope.admits(r.visibility) {
                continue;
            }
            let e = self.open_embedding(&master, r)?;
            scored.push((idx, embedder::similarity(query, &e)?));
        }
        scored.sort_by(|a, b| {
            rank_order(a.1, &state.versions[a.0].record.record_id, b.1, &state.versions[b.0].record.record_id)
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Exact top-k over live, in-scope records. Ids and scores only.
    pub fn search_topk(&self, query_text: &str, k: usize, scope: Scope) -> Result<Vec<ScoredId>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        let state = self.state.read();
        let out = self.enclave.exec("search_topk", |cx| {
            let q = embedder::embed(query_text, self.dim)?;
            let ranked = self.rank(cx, &state, &q, k, scope)?;
            Ok::<_, StoreError>(
                ranked
                    .into_iter()
                    .map(|(i, score)| ScoredId { record_id: state.versions[i].record.record_id.clone(), score })
                    .collect::<Vec<_>>(),
            )
        })?;
        Ok(out)
    }

    /// Top-k with chunk texts, for use inside an enclave extent. Ranking and
    /// text fetch happen under one read snapshot.
    pub fn retrieve_in(
        &self,
        cx: &InEnclave<'_>,
        query_text: &str,
        k: usize,
        scope: Scope,
    ) -> Result<Vec<RetrievedChunk>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        let state = self.state.read();
        let q = embedder::embed(query_text, self.dim)?;
        self.rank(cx, &state, &q, k, scope)?
            .into_iter()
            .map(|(i, score)| {
                let r = &state.versions[i].record;
                Ok(RetrievedChunk { record_id: r.record_id.clone(), score, text: self.open_payload(cx, r)? })
            })
            .collect()
    }

    /// Rewrite the file keeping only live versions.
    pub fn compact(&self) -> Result<usize, StoreError> {
        let Some(path) = self.path.clone() else {
            let mut state = self.state.write();
            let dropped = state.versions.len() - state.live.len();
            let kept: Vec<Version> = std::mem::take(&mut state.versions).into_iter().filter(|v| !v.record.tombstone).collect();
            state.live = kept.iter().enumerate().map(|(i, v)| (v.record.record_id.clone(), i)).collect();
            state.versions = kept;
            return Ok(dropped);
        };
        let mut state = self.state.write();
        let tmp = path.with_extension("compact");
        let mut bytes = header_bytes(self.dim, &self.sealed_master);
        let mut kept = Vec::new();
        for v in state.versions.iter().filter(|v| !v.record.tombstone) {
            let rb = v.record.to_bytes();
            bytes.extend_from_slice(&(rb.len() as u32).to_be_bytes());
            let offset = bytes.len() as u64;
            bytes.extend_from_slice(&rb);
            kept.push(Version { record: v.record.clone(), offset: Some(offset) });
        }
        std::fs::write(&tmp, &bytes).map_err(io_err)?;
        std::fs::rename(&tmp, &path).map_err(io_err)?;
        let dropped = state.versions.len() - kept.len();
        state.live = kept.iter().enumerate().map(|(i, v)| (v.record.record_id.clone(), i)).collect();
        state.versions = kept;
        state.file = Some(OpenOptions::new().read(true).write(true).open(&path).map_err(io_err)?);
        Ok(dropped)
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        if let Some(f) = self.state.write().file.as_mut() {
            f.sync_all().map_err(io_err)?;
        }
        Ok(())
    }
}
