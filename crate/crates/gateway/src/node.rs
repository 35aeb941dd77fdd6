//! Startup wiring and the synchronous operations behind each endpoint.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crag_core::audit::{Actor, AuditError, AuditFilter, AuditLog, EventKind};
use crag_core::crypto::{random_key, EnvelopeCiphertext, KeyKind, KeyPair};
use crag_core::enclave::Enclave;
use crag_core::governance::{Approval, Governance, GovernanceError, GovernancePolicy, Operation};
use crag_core::privacy::{compile_rules, load_rules_file, parse_rules, render_rules, Redactor};
use crag_core::rag::{
    pk_report_data, ClientRegistration, PipelineConfig, RagError, RagPipeline, ResponseEnvelope, SubmissionReceipt,
    SubmitAction,
};
use crag_core::registry::{ArtifactRegistry, RegistryError};
use crag_core::store::{RecordId, StoreError, VectorStore};
use parking_lot::RwLock;
use serde_json::json;

use crate::api::{
    op_params, params_digest, AttestationInfo, AuditResponse, ExecuteRequest, ExecuteResponse, ProposeRequest,
    RegistryCheckResponse,
};
use crate::config::ServerConfig;

/// Startup failure, naming the subsystem that failed.
#[derive(Debug)]
pub struct StartupError {
    pub subsystem: &'static str,
    pub detail: String,
}

impl fmt::Display for StartupError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "startup failed in {}: {}", self.subsystem, self.detail)
    }
}

impl std::error::Error for StartupError {}

fn fail(subsystem: &'static str) -> impl Fn(&dyn fmt::Display) -> StartupError {
    move |e| StartupError { subsystem, detail: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadRequest,
    Unauthorized,
    Refused,
    NotFound,
    Conflict,
    Internal,
}

#[derive(Debug)]
pub struct NodeError {
    pub kind: ErrorKind,
    pub message: String,
}

impl NodeError {
    pub fn new(kind: ErrorKind, message: impl fmt::Display) -> Self {
        NodeError { kind, message: message.to_string() }
    }

    pub fn bad(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::BadRequest, message)
    }
}

impl fmt::Display for NodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<StoreError> for NodeError {
    fn from(e: StoreError) -> Self {
        let kind = match &e {
            StoreError::DuplicateId(_) => ErrorKind::Conflict,
            StoreError::UnknownId(_) => ErrorKind::NotFound,
            StoreError::Unauthorized(_) | StoreError::BadToken(_) => ErrorKind::Refused,
            StoreError::EmptyText | StoreError::BadIdentifier(_) | StoreError::ZeroK => ErrorKind::BadRequest,
            _ => ErrorKind::Internal,
        };
        NodeError::new(kind, e)
    }
}

impl From<RagError> for NodeError {
    fn from(e: RagError) -> Self {
        match e {
            RagError::Store(s) => s.into(),
            RagError::AuthFailure(_) => NodeError::new(ErrorKind::Unauthorized, e),
            RagError::Decrypt | RagError::Malformed(_) | RagError::Crypto(_) => NodeError::bad(e),
            RagError::DuplicateClient(_) => NodeError::new(ErrorKind::Conflict, e),
            _ => NodeError::new(ErrorKind::Internal, e),
        }
    }
}

impl From<GovernanceError> for NodeError {
    fn from(e: GovernanceError) -> Self {
        let kind = match &e {
            GovernanceError::UnknownProposal(_) => ErrorKind::NotFound,
            GovernanceError::Malformed(_) | GovernanceError::BadPolicy(_) => ErrorKind::BadRequest,
            GovernanceError::Audit(_) => ErrorKind::Internal,
            _ => ErrorKind::Refused,
        };
        NodeError::new(kind, e)
    }
}

impl From<AuditError> for NodeError {
    fn from(e: AuditError) -> Self {
        NodeError::new(ErrorKind::Internal, e)
    }
}

impl From<RegistryError> for NodeError {
    fn from(e: RegistryError) -> Self {
        NodeError::new(ErrorKind::Internal, e)
    }
}

pub struct Node {
    config: ServerConfig,
    enclave: Arc<Enclave>,
    audit: Arc<AuditLog>,
    store: Arc<VectorStore>,
    registry: ArtifactRegistry,
    governance: Governance,
    pipeline: RagPipeline,
    redactor: RwLock<Arc<Redactor>>,
    root: KeyPair,
}

fn read_device_secret(path: &Path) -> Result<[u8; 32], StartupError> {
    let err = fail("device-secret");
    if !path.exists() {
        let secret = random_key();
        std::fs::write(path, hex::encode(secret.as_ref())).map_err(|e| err(&e))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600)).map_err(|e| err(&e))?;
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| err(&e))?;
    let bytes = hex::decode(text.trim()).map_err(|e| err(&e))?;
    bytes.try_into().map_err(|_| err(&"device secret must be 32 bytes"))
}

impl Node {
    pub fn start(config: ServerConfig) -> Result<Node, StartupError> {
        let device_secret = read_device_secret(&config.device_secret_path)?;
        let root = if config.root_key_path.exists() {
            KeyPair::read_key_file(&config.root_key_path).map_err(|e| fail("root-key")(&e))?
        } else {
            let k = KeyPair::generate(KeyKind::Signing, None).map_err(|e| fail("root-key")(&e))?;
            k.write_key_file(&config.root_key_path).map_err(|e| fail("root-key")(&e))?;
            k
        };
        if config.root_public.is_some_and(|p| p != root.public()) {
            return Err(fail("root-key")(&"root key file does not match configured root_public"));
        }
        let enclave = Arc::new(
            Enclave::boot(config.code_identity.as_bytes(), config.enclave_config().as_bytes(), &device_secret)
                .map_err(|e| fail("enclave")(&e))?,
        );
        let audit = Arc::new(AuditLog::open(&config.audit_path, enclave.clone()).map_err(|e| fail("audit")(&e))?);
        audit
            .append_event(EventKind::Boot, &Actor::enclave(), vec![enclave.measurement().0])
            .map_err(|e| fail("audit")(&e))?;
        let store = Arc::new(
            VectorStore::open_or_create(&config.store_path, enclave.clone(), audit.clone(), config.dim)
                .map_err(|e| fail("store")(&e))?,
        );
        let registry =
            ArtifactRegistry::open(&config.registry_path, Some(audit.clone())).map_err(|e| fail("registry")(&e))?;
        let policy = GovernancePolicy::load(&config.governance_policy).map_err(|e| fail("governance")(&e))?;
        let governance = Governance::new(policy, audit.clone());
        let redactor = match &config.rules_path {
            Some(p) => load_rules_file(p).and_then(|r| compile_rules(&r)).map_err(|e| fail("rules")(&e))?,
            None => Redactor::default_pack(),
        };
        let pipeline = RagPipeline::new(
            store.clone(),
            audit.clone(),
            root.clone(),
            PipelineConfig { k: config.k, provenance: config.provenance },
        );
        let clients_text = std::fs::read_to_string(&config.clients_path).map_err(|e| fail("clients")(&e))?;
        let clients: Vec<ClientRegistration> =
            serde_json::from_str(&clients_text).map_err(|e| fail("clients")(&e))?;
        for c in clients {
            pipeline.register_client(c).map_err(|e| fail("clients")(&e))?;
        }
        log::info!("enclave booted, measurement {}", enclave.measurement());
        Ok(Node {
            config,
            enclave,
            audit,
            store,
            registry,
            governance,
            pipeline,
            redactor: RwLock::new(Arc::new(redactor)),
            root,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn attestation(&self) -> Result<AttestationInfo, NodeError> {
        let pk_tee = self.enclave.public_key();
        let report = self.enclave.attest(pk_report_data(&pk_tee), &self.root).map_err(|e| NodeError::new(ErrorKind::Internal, e))?;
        Ok(AttestationInfo {
            measurement: self.enclave.measurement(),
            pk_tee,
            signing_public: self.enclave.signing_public(),
            root_public: self.root.public(),
            report: report.to_hex(),
        })
    }

    fn envelope(hex: &str) -> Result<EnvelopeCiphertext, NodeError> {
        EnvelopeCiphertext::from_hex(hex).map_err(NodeError::bad)
    }

    pub fn query(&self, envelope_hex: &str) -> Result<ResponseEnvelope, NodeError> {
        let env = Self::envelope(envelope_hex)?;
        Ok(self.pipeline.handle_query(&env)?)
    }

    pub fn submit(
        &self,
        envelope_hex: &str,
        action: SubmitAction,
        path_id: Option<&str>,
    ) -> Result<SubmissionReceipt, NodeError> {
        let env = Self::envelope(envelope_hex)?;
        let path_id = path_id.map(RecordId::new).transpose()?;
        let redactor = self.redactor.read().clone();
        Ok(self.pipeline.handle_submission(&env, action, path_id.as_ref(), &redactor)?)
    }

    pub fn propose(&self, req: &ProposeRequest) -> Result<crag_core::governance::AdminProposal, NodeError> {
        let actor = Actor::new(&req.actor).map_err(NodeError::bad)?;
        let params = req
            .params
            .iter()
            .map(|(k, v)| hex::decode(v).map(|b| (k.clone(), b)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(NodeError::bad)?;
        let borrowed: Vec<(&str, &[u8])> = params.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
        Ok(self.governance.propose(req.operation, &borrowed, &actor)?)
    }

    pub fn proposal(&self, id: &str) -> Result<crag_core::governance::AdminProposal, NodeError> {
        self.governance
            .proposal(id)
            .map(|(p, _)| p)
            .ok_or_else(|| NodeError::new(ErrorKind::NotFound, format!("unknown proposal {id}")))
    }

    pub fn approve(&self, approval: &Approval) -> Result<(), NodeError> {
        Ok(self.governance.submit_approval(approval)?)
    }

    /// Execute a proposal and apply its operation. Arguments are checked
    /// against the proposal before the proposal is spent.
    pub fn execute(&self, req: &ExecuteRequest) -> Result<ExecuteResponse, NodeError> {
        let (proposal, _) = self
            .governance
            .proposal(&req.proposal_id)
            .ok_or_else(|| NodeError::new(ErrorKind::NotFound, format!("unknown proposal {}", req.proposal_id)))?;
        let op = proposal.operation;
        let params = op_params(op, &req.args).map_err(NodeError::bad)?;
        if params_digest(op, &params) != proposal.payload_digest {
            return Err(NodeError::bad("arguments do not match the proposal"));
        }
        let new_redactor = match op {
            Operation::ChangeRules => {
                let rules = parse_rules(req.args.rules.as_deref().unwrap_or_default()).map_err(NodeError::bad)?;
                Some((compile_rules(&rules).map_err(NodeError::bad)?, rules))
            }
            _ => None,
        };
        let approvals = match &req.approvals {
            Some(a) => a.clone(),
            None => self.governance.collected_approvals(&req.proposal_id),
        };
        let token = self.governance.execute(&req.proposal_id, &approvals)?;
        let approvers = token.approvers().to_vec();
        let outcome = match op {
            Operation::DeleteRecord => {
                let id = RecordId::new(req.args.record_id.as_deref().unwrap_or_default())?;
                let conf = self.store.delete_record(&id, token)?;
                json!({ "record_id": conf.record_id, "versions_zeroed": conf.versions_zeroed })
            }
            Operation::ExtractRecord => {
                let id = RecordId::new(req.args.record_id.as_deref().unwrap_or_default())?;
                let recipient = req.args.recipient.expect("checked by op_params");
                let env = self.store.extract_record(&id, &recipient, token)?;
                json!({ "record_id": id, "envelope": env.to_hex() })
            }
            Operation::ChangeRules => {
                let (redactor, rules) = new_redactor.expect("compiled above");
                drop(token);
                let digest = redactor.rules_digest();
                if let Some(path) = &self.config.rules_path {
                    std::fs::write(path, render_rules(&rules)).map_err(|e| NodeError::new(ErrorKind::Internal, e))?;
                }
                *self.redactor.write() = Arc::new(redactor);
                json!({ "rules_digest": digest })
            }
            Operation::RotatePolicy => {
                let policy = req.args.policy.clone().expect("checked by op_params");
                self.governance.rotate_policy(policy.clone(), token)?;
                std::fs::write(&self.config.governance_policy, policy.to_json())
                    .map_err(|e| NodeError::new(ErrorKind::Internal, e))?;
                json!({ "policy_digest": policy.digest() })
            }
        };
        log::info!("executed proposal {} ({})", req.proposal_id, op);
        Ok(ExecuteResponse { proposal_id: req.proposal_id.clone(), operation: op, approvers, outcome })
    }

    pub fn audit(&self, filter: &AuditFilter) -> AuditResponse {
        AuditResponse { signing_public: self.audit.signing_public(), entries: self.audit.query(filter) }
    }

    /// Check this node's own attested measurement against the registry.
    pub fn registry_check(&self, name: Option<&str>, version: Option<&str>) -> Result<RegistryCheckResponse, NodeError> {
        self.registry.reload()?;
        let name = name.unwrap_or(&self.config.artifact_name).to_string();
        // With nothing registered under `name` the empty version looks up
        // nothing and the verdict is `unknown`.
        let version = version
            .map(str::to_string)
            .or_else(|| self.config.artifact_version.clone())
            .or_else(|| self.registry.latest(&name).map(|r| r.version))
            .unwrap_or_default();
        let report = self
            .enclave
            .attest(pk_report_data(&self.enclave.public_key()), &self.root)
            .map_err(|e| NodeError::new(ErrorKind::Internal, e))?;
        let check = self.registry.check_deployment(&name, &version, &report, &self.root.public())?;
        Ok(RegistryCheckResponse { name, version, check })
    }

    pub fn shutdown(&self) {
        if let Err(e) = self.store.flush() {
            log::error!("store flush failed: {e}");
        }
        if let Err(e) = self.audit.flush() {
            log::error!("audit flush failed: {e}");
        }
        log::info!("shutdown complete, audit length {}", self.audit.len());
    }
}
