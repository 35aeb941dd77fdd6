//! Hash-chained, enclave-signed audit log.
//!
//! Entries carry only enumerated event kinds, identifier-shaped actors, and
//! digests. There is no field that can hold free text. Each entry commits to
//! its predecessor's digest and is signed by the enclave signing key.
//!
//! On disk the log is JSON Lines with hex-encoded binary fields.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, PublicKey, Signature};
use crate::enclave::Enclave;

const ENTRY_DOMAIN: &[u8] = b"crag/audit/v1";
pub const MAX_ACTOR_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("actor {0:?} is not an identifier")]
    BadActor(String),
    #[error("audit log io: {0}")]
    Io(String),
    #[error("audit log line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("existing audit log is broken at seq {seq}: {reason}")]
    Broken { seq: u64, reason: ChainFault },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Ingest,
    QueryReceived,
    Retrieval,
    Response,
    Update,
    Delete,
    Proposal,
    Approval,
    Execution,
    AuthFailure,
    DriftCheck,
    Registration,
    Boot,
}

impl EventKind {
    pub const ALL: [EventKind; 13] = [
        EventKind::Ingest,
        EventKind::QueryReceived,
        EventKind::Retrieval,
        EventKind::Response,
        EventKind::Update,
        EventKind::Delete,
        EventKind::Proposal,
        EventKind::Approval,
        EventKind::Execution,
        EventKind::AuthFailure,
        EventKind::DriftCheck,
        EventKind::Registration,
        EventKind::Boot,
    ];

    fn code(self) -> u8 {
        Self::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Ingest => "ingest",
            EventKind::QueryReceived => "query-received",
            EventKind::Retrieval => "retrieval",
            EventKind::Response => "response",
            EventKind::Update => "update",
            EventKind::Delete => "delete",
            EventKind::Proposal => "proposal",
            EventKind::Approval => "approval",
            EventKind::Execution => "execution",
            EventKind::AuthFailure => "auth-failure",
            EventKind::DriftCheck => "drift-check",
            EventKind::Registration => "registration",
            EventKind::Boot => "boot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifier of whoever caused an event: `[A-Za-z0-9_.:@-]{1,64}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Actor(String);

impl Actor {
    pub fn new(s: &str) -> Result<Self, AuditError> {
        let ok = !s.is_empty()
            && s.len() <= MAX_ACTOR_LEN
            && s.chars().all(|c| c.is_ascii_alphanumeric() || "_.:@-".contains(c));
        if ok {
            Ok(Actor(s.to_string()))
        } else {
            Err(AuditError::BadActor(s.chars().take(16).collect()))
        }
    }

    pub fn enclave() -> Self {
        Actor("enclave".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Actor {
    type Error = AuditError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Actor::new(&s)
    }
}

impl From<Actor> for String {
    fn from(a: Actor) -> String {
        a.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub prev_digest: Digest,
    pub event_kind: EventKind,
    pub actor: Actor,
    pub subject_digests: Vec<Digest>,
    pub timestamp_ms: u64,
    pub entry_digest: Digest,
    pub signature: Signature,
}

impl AuditEntry {
    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.actor.0.len() + 32 * self.subject_digests.len());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.prev_digest.0);
        out.push(self.event_kind.code());
        out.extend_from_slice(&(self.actor.0.len() as u16).to_be_bytes());
        out.extend_from_slice(self.actor.0.as_bytes());
        out.extend_from_slice(&(self.subject_digests.len() as u32).to_be_bytes());
        for d in &self.subject_digests {
            out.extend_from_slice(&d.0);
        }
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out
    }

    pub fn compute_digest(&self) -> Digest {
        let mut buf = ENTRY_DOMAIN.to_vec();
        buf.extend_from_slice(&self.body_bytes());
        crypto::digest(&buf)
    }

    /// Binary form: body ‖ entry_digest ‖ signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        out.extend_from_slice(&self.entry_digest.0);
        out.extend_from_slice(&self.signature.0);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        let mut r = Reader { b, pos: 0 };
        let seq = u64::from_be_bytes(r.take(8)?.try_into().ok()?);
        let prev_digest = Digest(r.take(32)?.try_into().ok()?);
        let event_kind = EventKind::from_code(r.take(1)?[0])?;
        let alen = u16::from_be_bytes(r.take(2)?.try_into().ok()?) as usize;
        let actor = Actor::new(std::str::from_utf8(r.take(alen)?).ok()?).ok()?;
        let n = u32::from_be_bytes(r.take(4)?.try_into().ok()?) as usize;
        if n > b.len() / 32 {
            return None;
        }
        let subject_digests =
            (0..n).map(|_| r.take(32).map(|s| Digest(s.try_into().unwrap()))).collect::<Option<_>>()?;
        let timestamp_ms = u64::from_be_bytes(r.take(8)?.try_into().ok()?);
        let entry_digest = Digest(r.take(32)?.try_into().ok()?);
        let signature = Signature(r.take(64)?.try_into().ok()?);
        if r.pos != b.len() {
            return None;
        }
        Some(AuditEntry {
            seq,
            prev_digest,
            event_kind,
            actor,
            subject_digests,
            timestamp_ms,
            entry_digest,
            signature,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("audit entries serialize")
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainFault {
    DigestMismatch,
    LinkMismatch,
    BadSignature,
    SeqGap,
    Malformed,
}

impl fmt::Display for ChainFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainFault::DigestMismatch => "digest-mismatch",
            ChainFault::LinkMismatch => "link-mismatch",
            ChainFault::BadSignature => "bad-signature",
            ChainFault::SeqGap => "seq-gap",
            ChainFault::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainVerdict {
    pub valid: bool,
    pub first_bad_seq: Option<u64>,
    pub reason: Option<ChainFault>,
}

impl ChainVerdict {
    pub const VALID: ChainVerdict = ChainVerdict { valid: true, first_bad_seq: None, reason: None };

    fn bad(at: usize, reason: ChainFault) -> Self {
        ChainVerdict { valid: false, first_bad_seq: Some(at as u64), reason: Some(reason) }
    }
}

/// Checks, per position `i`: seq == i, link to the predecessor, the
/// recomputed digest, then the signature. The first failure wins.
pub fn verify_chain(entries: &[AuditEntry], enclave_signing_public: &PublicKey) -> ChainVerdict {
    verify_inner(entries, Some(enclave_signing_public))
}

fn verify_inner(entries: &[AuditEntry], key: Option<&PublicKey>) -> ChainVerdict {
    let mut prev = Digest::ZERO;
    for (i, e) in entries.iter().enumerate() {
        if e.seq != i as u64 {
            return ChainVerdict::bad(i, ChainFault::SeqGap);
        }
        if e.prev_digest != prev {
            return ChainVerdict::bad(i, ChainFault::LinkMismatch);
        }
        if e.compute_digest() != e.entry_digest {
            return ChainVerdict::bad(i, ChainFault::DigestMismatch);
        }
        if let Some(pk) = key {
            if !crypto::verify(pk, &e.entry_digest.0, &e.signature) {
                return ChainVerdict::bad(i, ChainFault::BadSignature);
            }
        }
        prev = e.entry_digest;
    }
    ChainVerdict::VALID
}

/// [`verify_chain`] over binary-encoded entries; undecodable entries are
/// reported as `malformed` at their position.
pub fn verify_encoded_chain(encoded: &[Vec<u8>], enclave_signing_public: &PublicKey) -> ChainVerdict {
    let mut entries = Vec::with_capacity(encoded.len());
    for (i, b) in encoded.iter().enumerate() {
        match AuditEntry::from_bytes(b) {
            Some(e) => entries.push(e),
            None => {
                let prefix = verify_chain(&entries, enclave_signing_public);
                return if prefix.valid { ChainVerdict::bad(i, ChainFault::Malformed) } else { prefix };
            }
        }
    }
    verify_chain(&entries, enclave_signing_public)
}

/// [`verify_chain`] over JSON Lines text.
pub fn verify_jsonl(text: &str, enclave_signing_public: &PublicKey) -> ChainVerdict {
    let mut entries = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        match serde_json::from_str::<AuditEntry>(line) {
            Ok(e) => entries.push(e),
            Err(_) => {
                let prefix = verify_chain(&entries, enclave_signing_public);
                return if prefix.valid { ChainVerdict::bad(i, ChainFault::Malformed) } else { prefix };
            }
        }
    }
    verify_chain(&entries, enclave_signing_public)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<AuditEntry>, AuditError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AuditError::Parse { line: i + 1, detail: e.to_string() })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditFilter {
    pub kind: Option<EventKind>,
    pub actor: Option<String>,
    pub subject: Option<Digest>,
    pub seq_range: Option<Range<u64>>,
}

impl AuditFilter {
    pub fn matches(&self, e: &AuditEntry) -> bool {
        self.kind.is_none_or(|k| e.event_kind == k)
            && self.actor.as_deref().is_none_or(|a| e.actor.as_str() == a)
            && self.subject.is_none_or(|s| e.subject_digests.contains(&s))
            && self.seq_range.as_ref().is_none_or(|r| r.contains(&e.seq))
    }
}

pub fn query_events(entries: &[AuditEntry], filter: &AuditFilter) -> Vec<AuditEntry> {
    entries.iter().filter(|e| filter.matches(e)).cloned().collect()
}

struct Tail {
    entries: Vec<AuditEntry>,
    file: Option<BufWriter<File>>,
}

/// Append-only audit chain. Appends are totally ordered by the tail lock.
pub struct AuditLog {
    enclave: Arc<Enclave>,
    path: Option<PathBuf>,
    tail: Mutex<Tail>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl AuditLog {
    pub fn in_memory(enclave: Arc<Enclave>) -> Self {
        AuditLog { enclave, path: None, tail: Mutex::new(Tail { entries: Vec::new(), file: None }) }
    }

    /// Open or create a JSONL log at `path`. Existing content must form an
    /// intact chain (digests and links); appends continue from its tail.
    pub fn open(path: &Path, enclave: Arc<Enclave>) -> Result<Self, AuditError> {
        let entries = if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| AuditError::Io(format!("{}: {e}", path.display())))?;
            let entries = parse_jsonl(&text)?;
            let v = verify_inner(&entries, None);
            if let (false, Some(seq), Some(reason)) = (v.valid, v.first_bad_seq, v.reason) {
                return Err(AuditError::Broken { seq, reason });
            }
            entries
        } else {
            Vec::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AuditError::Io(format!("{}: {e}", path.display())))?;
        Ok(AuditLog {
            enclave,
            path: Some(path.to_path_buf()),
            tail: Mutex::new(Tail { entries, file: Some(BufWriter::new(file)) }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn signing_public(&self) -> PublicKey {
        self.enclave.signing_public()
    }

    pub fn append_event(
        &self,
        event_kind: EventKind,
        actor: &Actor,
        subject_digests: Vec<Digest>,
    ) -> Result<AuditEntry, AuditError> {
        let mut tail = self.tail.lock();
        let (seq, prev_digest) = match tail.entries.last() {
            Some(last) => (last.seq + 1, last.entry_digest),
            None => (0, Digest::ZERO),
        };
        let mut entry = AuditEntry {
            seq,
            prev_digest,
            event_kind,
            actor: actor.clone(),
            subject_digests,
            timestamp_ms: now_ms(),
            entry_digest: Digest::ZERO,
            signature: Signature([0u8; 64]),
        };
        entry.entry_digest = entry.compute_digest();
        entry.signature = self.enclave.sign_digest(&entry.entry_digest);
        if let Some(file) = tail.file.as_mut() {
            writeln!(file, "{}", entry.to_json_line())
                .and_then(|_| file.flush())
                .map_err(|e| AuditError::Io(e.to_string()))?;
        }
        tail.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.tail.lock().entries.clone()
    }

    pub fn len(&self) -> usize {
        self.tail.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditEntry> {
        let tail = self.tail.lock();
        tail.entries.iter().filter(|e| filter.matches(e)).cloned().collect()
    }

    pub fn verify(&self) -> ChainVerdict {
        verify_chain(&self.tail.lock().entries, &self.enclave.signing_public())
    }

    pub fn flush(&self) -> Result<(), AuditError> {
        if let Some(f) = self.tail.lock().file.as_mut() {
            f.flush().map_err(|e| AuditError::Io(e.to_string()))?;
            f.get_ref().sync_all().map_err(|e| AuditError::Io(e.to_string()))?;
        }
        Ok(())
    }
}
