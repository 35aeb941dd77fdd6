//! Query handling: envelope in, attested encrypted response out.
//!
//! The query plaintext is `u32be len ‖ body JSON ‖ signature`, where the
//! client signs `digest(body)`. Everything between opening the envelope and
//! sealing the response runs inside one `exec` extent; only ciphertext,
//! record ids and digests leave it.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::audit::{Actor, AuditError, AuditLog, EventKind};
use crate::crypto::{
    digest, digest_parts, hybrid_decrypt, hybrid_encrypt, verify, CryptoError, Digest, EnvelopeCiphertext,
    KeyPair, PublicKey, Signature,
};
use crate::enclave::{
    verify_report, AttestationReport, BoundaryValue, EnclaveError, ExecError, InEnclave, Measurement, RejectReason,
    ReportVerdict,
};
use crate::privacy::Redactor;
use crate::store::{ClientId, CommunityRecord, RecordId, RetrievedChunk, Scope, StoreError, Visibility, VectorStore};

pub const QUERY_AAD: &[u8] = b"crag/query";
pub const RESPONSE_AAD: &[u8] = b"crag/response";
pub const TEMPLATE_ID: &str = "crag-template-v1";
pub const DEFAULT_K: usize = 4;
pub const MAX_SENTENCES: usize = 3;
pub const NO_CONTEXT_NOTICE: &str = "No community records are available to answer this question.";
pub const NO_MATCH_NOTICE: &str = "The retrieved community records do not address this question.";

#[derive(Debug, Error)]
pub enum RagError {
    #[error("query envelope could not be opened")]
    Decrypt,
    #[error("malformed query: {0}")]
    Malformed(String),
    #[error("authentication failed for query {0}")]
    AuthFailure(Digest),
    #[error("client {0} is already registered")]
    DuplicateClient(ClientId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("boundary violation in {0}")]
    Boundary(&'static str),
}

impl From<ExecError<RagError>> for RagError {
    fn from(e: ExecError<RagError>) -> Self {
        match e {
            ExecError::Inner(e) => e,
            ExecError::BoundaryViolation { operation, .. } => RagError::Boundary(operation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientScope {
    Open,
    Private,
}

impl ClientScope {
    pub fn search_scope(self) -> Scope {
        match self {
            ClientScope::Open => Scope::Open,
            ClientScope::Private => Scope::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRegistration {
    pub client_id: ClientId,
    pub public: PublicKey,
    pub scope: ClientScope,
}

#[derive(Serialize, Deserialize)]
struct QueryBody {
    client_id: String,
    prompt: String,
    private_context: Option<String>,
    response_key: PublicKey,
    nonce: String,
}

/// Decoded query. Lives only inside the enclave extent.
pub struct UserQuery {
    pub client_id: ClientId,
    pub prompt: Zeroizing<String>,
    pub private_context: Option<Zeroizing<String>>,
    pub response_key: PublicKey,
    body_digest: Digest,
    signature: Signature,
}

impl UserQuery {
    fn decode(bytes: &[u8]) -> Result<Self, RagError> {
        let bad = |m: &str| RagError::Malformed(m.to_string());
        let (body, signature) = split_signed(bytes)?;
        let parsed: QueryBody = serde_json::from_slice(body).map_err(|_| bad("body"))?;
        if parsed.prompt.trim().is_empty() {
            return Err(bad("empty prompt"));
        }
        Ok(UserQuery {
            client_id: ClientId::new(&parsed.client_id).map_err(|_| bad("client id"))?,
            prompt: Zeroizing::new(parsed.prompt),
            private_context: parsed.private_context.map(Zeroizing::new),
            response_key: parsed.response_key,
            body_digest: digest(body),
            signature,
        })
    }

    fn retrieval_text(&self) -> Zeroizing<String> {
        let mut t = Zeroizing::new(self.prompt.to_string());
        if let Some(x) = &self.private_context {
            t.push('\n');
            t.push_str(x);
        }
        t
    }
}

/// `u32be len ‖ body ‖ signature over digest(body)`.
fn join_signed(body: &[u8], key: &KeyPair) -> Result<Zeroizing<Vec<u8>>, RagError> {
    let signature = key.sign(&digest(body).0)?;
    let mut plain = Zeroizing::new(Vec::with_capacity(body.len() + 68));
    plain.extend_from_slice(&(body.len() as u32).to_be_bytes());
    plain.extend_from_slice(body);
    plain.extend_from_slice(&signature.0);
    Ok(plain)
}

fn split_signed(bytes: &[u8]) -> Result<(&[u8], Signature), RagError> {
    let bad = |m: &str| RagError::Malformed(m.to_string());
    let len = u32::from_be_bytes(bytes.get(..4).ok_or_else(|| bad("short"))?.try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + len).ok_or_else(|| bad("truncated body"))?;
    let signature = Signature::from_slice(&bytes[4 + len..]).map_err(|_| bad("signature"))?;
    Ok((body, signature))
}

/// Client side: serialize and sign a query, then encrypt it to `pk_tee`.
/// Returns the envelope and its correlation digest.
pub fn seal_query(
    pk_tee: &PublicKey,
    client_id: &ClientId,
    signing_key: &KeyPair,
    prompt: &str,
    private_context: Option<&str>,
    response_key: &PublicKey,
) -> Result<(EnvelopeCiphertext, Digest), RagError> {
    let mut nonce = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut nonce);
    let body = Zeroizing::new(
        serde_json::to_vec(&QueryBody {
            client_id: client_id.as_str().to_string(),
            prompt: prompt.to_string(),
            private_context: private_context.map(str::to_string),
            response_key: *response_key,
            nonce: hex::encode(nonce),
        })
        .expect("query body serializes"),
    );
    let plain = join_signed(&body, signing_key)?;
    let env = hybrid_encrypt(pk_tee, &plain, QUERY_AAD)?;
    let qd = digest(&env.to_bytes());
    Ok((env, qd))
}

fn response_aad(query_digest: &Digest) -> Vec<u8> {
    let mut aad = RESPONSE_AAD.to_vec();
    aad.extend_from_slice(&query_digest.0);
    aad
}

/// report_data used when publishing pk_TEE.
pub fn pk_report_data(pk_tee: &PublicKey) -> Digest {
    digest_parts(&[b"crag/pk/v1", &pk_tee.0])
}

pub struct AugmentedPrompt {
    pub template_id: &'static str,
    pub prompt: String,
    pub context_blocks: Vec<(RecordId, String)>,
    pub assembled_text: String,
}

impl fmt::Debug for AugmentedPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AugmentedPrompt")
            .field("template_id", &self.template_id)
            .field("blocks", &self.context_blocks.len())
            .finish_non_exhaustive()
    }
}

impl Drop for AugmentedPrompt {
    fn drop(&mut self) {
        use zeroize::Zeroize;
        self.prompt.zeroize();
        self.assembled_text.zeroize();
        for (_, t) in &mut self.context_blocks {
            t.zeroize();
        }
    }
}

/// Fixed template: header, optional private-context block, numbered context
/// blocks in rank order, then the question.
pub fn augment_prompt(prompt: &str, private_context: Option<&str>, chunks: &[RetrievedChunk]) -> AugmentedPrompt {
    let mut s = format!("### {TEMPLATE_ID}\n");
    if let Some(x) = private_context {
        s.push_str("### private context\n");
        s.push_str(x);
        s.push('\n');
    }
    s.push_str("### context\n");
    for (i, c) in chunks.iter().enumerate() {
        s.push_str(&format!("[{}] <{}>\n{}\n[/{}]\n", i + 1, c.record_id, c.text.as_str(), i + 1));
    }
    s.push_str("### question\n");
    s.push_str(prompt);
    s.push('\n');
    AugmentedPrompt {
        template_id: TEMPLATE_ID,
        prompt: prompt.to_string(),
        context_blocks: chunks.iter().map(|c| (c.record_id.clone(), c.text.to_string())).collect(),
        assembled_text: s,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub text: String,
    pub provenance: Vec<RecordId>,
    pub generator_id: String,
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &AugmentedPrompt) -> GeneratedResponse;
}

/// Picks up to three context sentences by prompt-word overlap.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExtractiveGenerator;

pub fn words(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Split after `.`, `!` or `?` when followed by whitespace or end of text.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|(_, n)| n.is_whitespace()) {
            let end = pos + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

impl Generator for ExtractiveGenerator {
    fn id(&self) -> &str {
        "extractive-v1"
    }

    fn generate(&self, p: &AugmentedPrompt) -> GeneratedResponse {
        let respond = |text: &str, provenance| GeneratedResponse {
            text: text.to_string(),
            provenance,
            generator_id: self.id().to_string(),
        };
        if p.context_blocks.is_empty() {
            return respond(NO_CONTEXT_NOTICE, Vec::new());
        }
        let query = words(&p.prompt);
        let mut scored: Vec<(usize, usize, usize, &str)> = Vec::new();
        for (rank, (_, text)) in p.context_blocks.iter().enumerate() {
            for (idx, s) in sentences(text).into_iter().enumerate() {
                let score = words(s).intersection(&query).count();
                if score > 0 {
                    scored.push((score, rank, idx, s));
                }
            }
        }
        if scored.is_empty() {
            return respond(NO_MATCH_NOTICE, Vec::new());
        }
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        scored.truncate(MAX_SENTENCES);
        let ranks: BTreeSet<usize> = scored.iter().map(|s| s.1).collect();
        let text = scored.iter().map(|s| s.3).collect::<Vec<_>>().join(" ");
        respond(&text, ranks.into_iter().map(|r| p.context_blocks[r].0.clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseEnvelope {
    pub ciphertext: EnvelopeCiphertext,
    pub attestation: AttestationReport,
}

#[derive(Serialize, Deserialize)]
struct ResponseWire {
    ciphertext: String,
    attestation: String,
}

impl ResponseEnvelope {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ResponseWire { ciphertext: self.ciphertext.to_hex(), attestation: self.attestation.to_hex() })
            .expect("response serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, RagError> {
        let w: ResponseWire = serde_json::from_value(v.clone()).map_err(|e| RagError::Malformed(e.to_string()))?;
        Ok(ResponseEnvelope {
            ciphertext: EnvelopeCiphertext::from_hex(&w.ciphertext)?,
            attestation: AttestationReport::from_hex(&w.attestation)?,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResponseCheckError {
    #[error("attestation rejected: {0}")]
    Attestation(RejectReason),
    #[error("attestation does not cover this ciphertext")]
    Unbound,
    #[error("response does not decrypt under the client key")]
    Decrypt,
    #[error("response plaintext is malformed")]
    Malformed,
}

/// Client side: check the attestation, then decrypt.
pub fn open_response(
    response: &ResponseEnvelope,
    response_key: &KeyPair,
    query_digest: &Digest,
    root_public: &PublicKey,
    expected: &Measurement,
) -> Result<GeneratedResponse, ResponseCheckError> {
    if let ReportVerdict::Reject(r) = verify_report(root_public, &response.attestation, expected) {
        return Err(ResponseCheckError::Attestation(r));
    }
    if response.attestation.report_data != digest(&response.ciphertext.to_bytes()) {
        return Err(ResponseCheckError::Unbound);
    }
    let plain = hybrid_decrypt(response_key, &response.ciphertext, &response_aad(query_digest))
        .map_err(|_| ResponseCheckError::Decrypt)?;
    serde_json::from_slice(&plain).map_err(|_| ResponseCheckError::Malformed)
}

enum Outcome {
    Rejected,
    Answered { ciphertext: EnvelopeCiphertext, prompt_digest: Digest, client: ClientId, retrieved: Vec<RecordId> },
}

impl BoundaryValue for Outcome {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        if let Outcome::Answered { ciphertext, prompt_digest, client, retrieved } = self {
            ciphertext.export_bytes(out);
            prompt_digest.export_bytes(out);
            client.export_bytes(out);
            retrieved.export_bytes(out);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub k: usize,
    pub provenance: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { k: DEFAULT_K, provenance: true }
    }
}

pub struct RagPipeline {
    store: Arc<VectorStore>,
    audit: Arc<AuditLog>,
    root: KeyPair,
    clients: RwLock<HashMap<ClientId, ClientRegistration>>,
    generator: Box<dyn Generator>,
    config: PipelineConfig,
}

impl RagPipeline {
    /// `root` is the emulated platform key that signs attestation reports.
    pub fn new(store: Arc<VectorStore>, audit: Arc<AuditLog>, root: KeyPair, config: PipelineConfig) -> Self {
        RagPipeline {
            store,
            audit,
            root,
            clients: RwLock::new(HashMap::new()),
            generator: Box::new(ExtractiveGenerator),
            config,
        }
    }

    pub fn with_generator(mut self, generator: Box<dyn Generator>) -> Self {
        self.generator = generator;
        self
    }

    pub fn config(&self) -> PipelineConfig {
        self.config
    }

    pub fn register_client(&self, reg: ClientRegistration) -> Result<(), RagError> {
        let mut clients = self.clients.write();
        if clients.contains_key(&reg.client_id) {
            return Err(RagError::DuplicateClient(reg.client_id));
        }
        self.audit.append_event(
            EventKind::Registration,
            &Actor::new(reg.client_id.as_str())?,
            vec![reg.client_id.digest(), digest(&reg.public.0)],
        )?;
        clients.insert(reg.client_id.clone(), reg);
        Ok(())
    }

    pub fn client(&self, id: &ClientId) -> Option<ClientRegistration> {
        self.clients.read().get(id).cloned()
    }

    /// Attestation over pk_TEE, for clients to check before sending a query.
    pub fn attest_public_key(&self) -> Result<AttestationReport, RagError> {
        let pk = self.store.enclave().public_key();
        Ok(self.store.enclave().attest(pk_report_data(&pk), &self.root)?)
    }

    fn answer(&self, cx: &InEnclave<'_>, envelope: &EnvelopeCiphertext, qd: Digest) -> Result<Outcome, RagError> {
        let plain = match cx.open_envelope(envelope, QUERY_AAD) {
            Ok(p) => p,
            Err(_) => return Err(RagError::Decrypt),
        };
        let query = match UserQuery::decode(&plain) {
            Ok(q) => q,
            Err(_) => return Ok(Outcome::Rejected),
        };
        let Some(reg) = self.client(&query.client_id) else {
            return Ok(Outcome::Rejected);
        };
        if !verify(&reg.public, &query.body_digest.0, &query.signature) {
            return Ok(Outcome::Rejected);
        }
        let chunks =
            self.store.retrieve_in(cx, &query.retrieval_text(), self.config.k, reg.scope.search_scope())?;
        let retrieved: Vec<RecordId> = chunks.iter().map(|c| c.record_id.clone()).collect();
        let augmented = augment_prompt(&query.prompt, query.private_context.as_ref().map(|s| s.as_str()), &chunks);
        let mut generated = self.generator.generate(&augmented);
        generated.provenance.retain(|id| retrieved.contains(id));
        if !self.config.provenance {
            generated.provenance.clear();
        }
        let body = Zeroizing::new(serde_json::to_vec(&generated).expect("response serializes"));
        let ciphertext = hybrid_encrypt(&query.response_key, &body, &response_aad(&qd))?;
        Ok(Outcome::Answered { ciphertext, prompt_digest: digest(query.prompt.as_bytes()), client: reg.client_id, retrieved })
    }

    /// Steps 2 through 6 of the protocol for one envelope.
    pub fn handle_query(&self, envelope: &EnvelopeCiphertext) -> Result<ResponseEnvelope, RagError> {
        let qd = digest(&envelope.to_bytes());
        let enclave = self.store.enclave();
        match enclave.exec("handle_query", |cx| self.answer(cx, envelope, qd))? {
            Outcome::Rejected => {
                self.audit.append_event(EventKind::AuthFailure, &Actor::enclave(), vec![qd])?;
                Err(RagError::AuthFailure(qd))
            }
            Outcome::Answered { ciphertext, prompt_digest, client, retrieved } => {
                let actor = Actor::new(client.as_str())?;
                self.audit.append_event(EventKind::QueryReceived, &actor, vec![qd, prompt_digest])?;
                let mut ids = vec![qd];
                ids.extend(retrieved.iter().map(RecordId::digest));
                self.audit.append_event(EventKind::Retrieval, &Actor::enclave(), ids)?;
                let cd = digest(&ciphertext.to_bytes());
                self.audit.append_event(EventKind::Response, &Actor::enclave(), vec![qd, cd])?;
                let attestation = enclave.attest(cd, &self.root)?;
                Ok(ResponseEnvelope { ciphertext, attestation })
            }
        }
    }
}

pub const INGEST_AAD: &[u8] = b"crag/submit/ingest";
pub const UPDATE_AAD: &[u8] = b"crag/submit/update";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitAction {
    Ingest,
    Update,
}

impl SubmitAction {
    fn aad(self) -> &'static [u8] {
        match self {
            SubmitAction::Ingest => INGEST_AAD,
            SubmitAction::Update => UPDATE_AAD,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SubmissionBody {
    client_id: String,
    record_id: String,
    text: String,
    visibility: Visibility,
    nonce: String,
}

/// Client side: a signed record submission encrypted to `pk_tee`. For
/// updates `visibility` is ignored; the stored visibility is kept.
pub fn seal_submission(
    pk_tee: &PublicKey,
    client_id: &ClientId,
    signing_key: &KeyPair,
    action: SubmitAction,
    record_id: &RecordId,
    text: &str,
    visibility: Visibility,
) -> Result<EnvelopeCiphertext, RagError> {
    let mut nonce = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut nonce);
    let body = Zeroizing::new(
        serde_json::to_vec(&SubmissionBody {
            client_id: client_id.as_str().to_string(),
            record_id: record_id.as_str().to_string(),
            text: text.to_string(),
            visibility,
            nonce: hex::encode(nonce),
        })
        .expect("submission serializes"),
    );
    Ok(hybrid_encrypt(pk_tee, &join_signed(&body, signing_key)?, action.aad())?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionReceipt {
    pub record_id: RecordId,
    pub created_seq: u64,
}

enum SubmitOutcome {
    Rejected,
    Done(SubmissionReceipt),
}

impl BoundaryValue for SubmitOutcome {
    fn export_bytes(&self, out: &mut Vec<u8>) {
        if let SubmitOutcome::Done(r) = self {
            r.record_id.export_bytes(out);
            r.created_seq.export_bytes(out);
        }
    }
}

impl RagPipeline {
    pub fn store(&self) -> &Arc<VectorStore> {
        &self.store
    }

    fn submit(
        &self,
        cx: &InEnclave<'_>,
        envelope: &EnvelopeCiphertext,
        action: SubmitAction,
        path_id: Option<&RecordId>,
        redactor: &Redactor,
    ) -> Result<SubmitOutcome, RagError> {
        let plain = cx.open_envelope(envelope, action.aad()).map_err(|_| RagError::Decrypt)?;
        let Ok((body, signature)) = split_signed(&plain) else {
            return Ok(SubmitOutcome::Rejected);
        };
        let Ok(mut parsed) = serde_json::from_slice::<SubmissionBody>(body) else {
            return Ok(SubmitOutcome::Rejected);
        };
        let text = Zeroizing::new(std::mem::take(&mut parsed.text));
        let Ok(client) = ClientId::new(&parsed.client_id) else {
            return Ok(SubmitOutcome::Rejected);
        };
        let Some(reg) = self.client(&client) else {
            return Ok(SubmitOutcome::Rejected);
        };
        if !verify(&reg.public, &digest(body).0, &signature) {
            return Ok(SubmitOutcome::Rejected);
        }
        let record_id = RecordId::new(&parsed.record_id).map_err(|_| RagError::Malformed("record id".into()))?;
        if path_id.is_some_and(|p| p != &record_id) {
            return Err(RagError::Malformed("record id does not match the request path".into()));
        }
        let created_seq = match action {
            SubmitAction::Ingest => {
                let record = CommunityRecord::new(record_id.as_str(), &text, parsed.visibility, client.as_str())?;
                self.store.ingest(&record, redactor)?.created_seq
            }
            SubmitAction::Update => self.store.update_record(&record_id, &text, redactor, &client)?,
        };
        Ok(SubmitOutcome::Done(SubmissionReceipt { record_id, created_seq }))
    }

    /// Open, authenticate and apply a record submission.
    pub fn handle_submission(
        &self,
        envelope: &EnvelopeCiphertext,
        action: SubmitAction,
        path_id: Option<&RecordId>,
        redactor: &Redactor,
    ) -> Result<SubmissionReceipt, RagError> {
        let sd = digest(&envelope.to_bytes());
        match self.store.enclave().exec("submission", |cx| self.submit(cx, envelope, action, path_id, redactor))? {
            SubmitOutcome::Rejected => {
                self.audit.append_event(EventKind::AuthFailure, &Actor::enclave(), vec![sd])?;
                Err(RagError::AuthFailure(sd))
            }
            SubmitOutcome::Done(r) => Ok(r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::AuditFilter;
    use crate::canary::CanaryMonitor;
    use crate::crypto::{generate_keypair, KeyKind};
    use crate::enclave::Enclave;

    struct World {
        pipeline: RagPipeline,
        store: Arc<VectorStore>,
        audit: Arc<AuditLog>,
        enclave: Arc<Enclave>,
        root: KeyPair,
        client: ClientId,
        client_key: KeyPair,
        response_key: KeyPair,
    }

    fn world(scope: ClientScope) -> World {
        let enclave = Arc::new(Enclave::boot(b"rag-test", b"k=4", &[7; 32]).unwrap());
        let audit = Arc::new(AuditLog::in_memory(enclave.clone()));
        let store = Arc::new(VectorStore::in_memory(enclave.clone(), audit.clone(), 64).unwrap());
        let root = generate_keypair(KeyKind::Signing, Some(&[9; 32])).unwrap();
        let pipeline = RagPipeline::new(store.clone(), audit.clone(), root.clone(), PipelineConfig::default());
        let client = ClientId::new("clinic-1").unwrap();
        let client_key = generate_keypair(KeyKind::Signing, None).unwrap();
        pipeline
            .register_client(ClientRegistration { client_id: client.clone(), public: client_key.public(), scope })
            .unwrap();
        let response_key = generate_keypair(KeyKind::Agreement, None).unwrap();
        World { pipeline, store, audit, enclave, root, client, client_key, response_key }
    }

    impl World {
        fn ask(&self, prompt: &str, x: Option<&str>) -> Result<GeneratedResponse, RagError> {
            let (env, qd) = seal_query(
                &self.enclave.public_key(),
                &self.client,
                &self.client_key,
                prompt,
                x,
                &self.response_key.public(),
            )?;
            let resp = self.pipeline.handle_query(&env)?;
            Ok(open_response(&resp, &self.response_key, &qd, &self.root.public(), &self.enclave.measurement()).unwrap())
        }
    }

    fn chunk(id: &str, text: &str) -> RetrievedChunk {
        RetrievedChunk { record_id: RecordId::new(id).unwrap(), score: 0.5, text: Zeroizing::new(text.into()) }
    }

    #[test]
    fn sentence_split() {
        assert_eq!(sentences("One. Two! Three? v1.2 stays"), vec!["One.", "Two!", "Three?", "v1.2 stays"]);
        assert!(sentences("   ").is_empty());
    }

    #[test]
    fn template_numbers_blocks_and_is_deterministic() {
        let chunks = [chunk("a", "alpha text"), chunk("b", "beta text"), chunk("c", "gamma text")];
        let p = augment_prompt("question?", Some("mine"), &chunks);
        let expected = "### crag-template-v1\n### private context\nmine\n### context\n\
            [1] <a>\nalpha text\n[/1]\n[2] <b>\nbeta text\n[/2]\n[3] <c>\ngamma text\n[/3]\n\
            ### question\nquestion?\n";
        assert_eq!(p.assembled_text, expected);
        assert_eq!(augment_prompt("question?", Some("mine"), &chunks).assembled_text, expected);
        let empty = augment_prompt("q", None, &[]);
        assert_eq!(empty.assembled_text, "### crag-template-v1\n### context\n### question\nq\n");
    }

    #[test]
    fn extractive_generator_hand_scored() {
        let chunks = [
            chunk("r1", "Parking is free on Sundays. The lot closes at nine."),
            chunk("r2", "Flu shots are offered at the clinic. Bring your insurance card. Flu shots are free for seniors."),
            chunk("r3", "The library has new hours."),
        ];
        // prompt words: {when, are, flu, shots, offered}
        // r1: 0, 0. r2: s0 {flu,shots,are,offered}=4, s1 0, s2 {flu,shots,are}=3. r3: 0.
        let p = augment_prompt("When are flu shots offered", None, &chunks);
        let r = ExtractiveGenerator.generate(&p);
        assert_eq!(r.text, "Flu shots are offered at the clinic. Flu shots are free for seniors.");
        assert_eq!(r.provenance, vec![RecordId::new("r2").unwrap()]);
        assert_eq!(ExtractiveGenerator.generate(&p), r);

        let none = ExtractiveGenerator.generate(&augment_prompt("zebra", None, &chunks));
        assert_eq!((none.text.as_str(), none.provenance.len()), (NO_MATCH_NOTICE, 0));
        let empty = ExtractiveGenerator.generate(&augment_prompt("zebra", None, &[]));
        assert_eq!((empty.text.as_str(), empty.provenance.len()), (NO_CONTEXT_NOTICE, 0));
    }

    #[test]
    fn ties_prefer_earlier_rank_then_sentence_order() {
        let chunks = [chunk("a", "x one. x two."), chunk("b", "x three. x four.")];
        let r = ExtractiveGenerator.generate(&augment_prompt("x", None, &chunks));
        assert_eq!(r.text, "x one. x two. x three.");
        assert_eq!(r.provenance.len(), 2);
    }

    #[test]
    fn end_to_end_quotes_relevant_record() {
        let w = world(ClientScope::Private);
        let r = Redactor::default_pack();
        let c = |id, text| CommunityRecord::new(id, text, Visibility::Open, "org").unwrap();
        w.store.ingest(&c("pantry", "The food pantry opens Tuesday at noon. Volunteers sort donations."), &r).unwrap();
        w.store.ingest(&c("pool", "Swimming lessons resume in May."), &r).unwrap();
        let resp = w.ask("When does the food pantry open?", None).unwrap();
        assert_eq!(resp.text, "The food pantry opens Tuesday at noon.");
        assert_eq!(resp.provenance, vec![RecordId::new("pantry").unwrap()]);

        let kinds: Vec<EventKind> = w.audit.entries().iter().map(|e| e.event_kind).collect();
        assert_eq!(&kinds[kinds.len() - 3..], &[EventKind::QueryReceived, EventKind::Retrieval, EventKind::Response]);
        let retrieval = &w.audit.entries()[kinds.len() - 2];
        assert!(retrieval.subject_digests.contains(&RecordId::new("pantry").unwrap().digest()));
    }

    #[test]
    fn empty_store_returns_notice() {
        let w = world(ClientScope::Open);
        let resp = w.ask("anything at all", None).unwrap();
        assert_eq!(resp.text, NO_CONTEXT_NOTICE);
        assert!(resp.provenance.is_empty());
    }

    #[test]
    fn open_clients_do_not_see_private_records() {
        let w = world(ClientScope::Open);
        let r = Redactor::default_pack();
        w.store
            .ingest(&CommunityRecord::new("p", "Rent assistance applications close Friday.", Visibility::Private, "org").unwrap(), &r)
            .unwrap();
        let resp = w.ask("When do rent assistance applications close?", None).unwrap();
        assert_eq!(resp.text, NO_CONTEXT_NOTICE);
    }

    #[test]
    fn unauthenticated_query_is_rejected_before_retrieval() {
        let w = world(ClientScope::Private);
        let impostor = generate_keypair(KeyKind::Signing, None).unwrap();
        let (env, qd) = seal_query(
            &w.enclave.public_key(),
            &w.client,
            &impostor,
            "hello",
            None,
            &w.response_key.public(),
        )
        .unwrap();
        let before = w.audit.len();
        assert!(matches!(w.pipeline.handle_query(&env), Err(RagError::AuthFailure(d)) if d == qd));
        let after = w.audit.entries();
        assert_eq!(after.len(), before + 1);
        assert_eq!(after.last().unwrap().event_kind, EventKind::AuthFailure);
        assert!(w.audit.query(&AuditFilter { kind: Some(EventKind::Retrieval), ..Default::default() }).is_empty());

        let garbage = hybrid_encrypt(&w.enclave.public_key(), b"not a query", b"wrong aad").unwrap();
        assert!(matches!(w.pipeline.handle_query(&garbage), Err(RagError::Decrypt)));
    }

    #[test]
    fn attestation_binds_ciphertext() {
        let w = world(ClientScope::Open);
        let (env, qd) =
            seal_query(&w.enclave.public_key(), &w.client, &w.client_key, "hi", None, &w.response_key.public()).unwrap();
        let mut resp = w.pipeline.handle_query(&env).unwrap();
        let wire = ResponseEnvelope::from_json(&resp.to_json()).unwrap();
        assert_eq!(wire, resp);
        let other = Measurement::compute(b"other", b"cfg");
        assert_eq!(
            open_response(&resp, &w.response_key, &qd, &w.root.public(), &other),
            Err(ResponseCheckError::Attestation(RejectReason::MeasurementMismatch))
        );
        resp.ciphertext.ciphertext[0] ^= 1;
        assert_eq!(
            open_response(&resp, &w.response_key, &qd, &w.root.public(), &w.enclave.measurement()),
            Err(ResponseCheckError::Unbound)
        );
    }

    #[test]
    fn private_context_canary_stays_inside() {
        let w = world(ClientScope::Private);
        let canary = "zq-canary-7781@example.org";
        let monitor = Arc::new(CanaryMonitor::new([canary]));
        w.enclave.set_monitor(Some(monitor.clone()));
        w.store
            .ingest(&CommunityRecord::new("r", "Bus route 9 runs hourly.", Visibility::Open, "org").unwrap(), &Redactor::default_pack())
            .unwrap();
        w.ask("bus route schedule", Some(canary)).unwrap();
        w.ask(canary, None).unwrap();
        assert!(monitor.violations().is_empty());
        let log: String = w.audit.entries().iter().map(|e| e.to_json_line()).collect();
        assert_eq!(monitor.first_hit(log.as_bytes()), None);
    }

    #[test]
    fn submissions_authenticate_and_bind_path() {
        let w = world(ClientScope::Private);
        let r = Redactor::default_pack();
        let pk = w.enclave.public_key();
        let id = RecordId::new("notice").unwrap();
        let env = seal_submission(&pk, &w.client, &w.client_key, SubmitAction::Ingest, &id, "Shelter beds open at six.", Visibility::Open)
            .unwrap();
        let receipt = w.pipeline.handle_submission(&env, SubmitAction::Ingest, None, &r).unwrap();
        assert_eq!(receipt.record_id, id);

        let upd = seal_submission(&pk, &w.client, &w.client_key, SubmitAction::Update, &id, "Shelter beds open at seven.", Visibility::Open)
            .unwrap();
        let other = RecordId::new("other").unwrap();
        assert!(matches!(
            w.pipeline.handle_submission(&upd, SubmitAction::Update, Some(&other), &r),
            Err(RagError::Malformed(_))
        ));
        assert!(matches!(w.pipeline.handle_submission(&upd, SubmitAction::Ingest, None, &r), Err(RagError::Decrypt)));
        let seq = w.pipeline.handle_submission(&upd, SubmitAction::Update, Some(&id), &r).unwrap().created_seq;
        assert_eq!(seq, receipt.created_seq + 1);
        assert_eq!(w.ask("When do shelter beds open?", None).unwrap().text, "Shelter beds open at seven.");

        let impostor = generate_keypair(KeyKind::Signing, None).unwrap();
        let forged = seal_submission(&pk, &w.client, &impostor, SubmitAction::Ingest, &other, "spam", Visibility::Open)
            .unwrap();
        assert!(matches!(w.pipeline.handle_submission(&forged, SubmitAction::Ingest, None, &r), Err(RagError::AuthFailure(_))));
        assert_eq!(w.store.stats().live, 1);
    }
}
