//! Blocking HTTP client. The enclave key is only trusted after its
//! attestation report checks out against the expected measurement.

use crag_core::crypto::{Digest, EnvelopeCiphertext, KeyPair, PublicKey};
use crag_core::enclave::{verify_report, AttestationReport, Measurement, ReportVerdict};
use crag_core::governance::{AdminProposal, Approval};
use crag_core::rag::{
    open_response, pk_report_data, seal_query, seal_submission, GeneratedResponse, ResponseCheckError,
    ResponseEnvelope, SubmissionReceipt, SubmitAction,
};
use crag_core::store::{ClientId, RecordId, Visibility};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::{
    AttestationInfo, AuditResponse, EnvelopeRequest, ErrorBody, ExecuteRequest, ExecuteResponse, ProposeRequest,
    RegistryCheckResponse,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("server returned {status}: {message}")]
    Server { status: u16, message: String },
    #[error("attestation rejected: {0}")]
    Attestation(String),
    #[error("response check failed: {0}")]
    Response(#[from] ResponseCheckError),
    #[error("{0}")]
    Local(String),
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Transport(e.to_string())
    }
}

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

/// Enclave identity a client has verified.
#[derive(Debug, Clone)]
pub struct VerifiedEnclave {
    pub pk_tee: PublicKey,
    pub measurement: Measurement,
    pub root_public: PublicKey,
}

impl Client {
    pub fn new(base: &str) -> Self {
        Client { base: base.trim_end_matches('/').to_string(), http: reqwest::blocking::Client::new() }
    }

    fn decode<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if !status.is_success() {
            let message = resp.json::<ErrorBody>().map(|b| b.error).unwrap_or_else(|e| e.to_string());
            return Err(ClientError::Server { status: status.as_u16(), message });
        }
        Ok(resp.json()?)
    }

    fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, ClientError> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).query(query).send()?)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::decode(self.http.post(format!("{}{path}", self.base)).json(body).send()?)
    }

    pub fn attestation(&self) -> Result<AttestationInfo, ClientError> {
        self.get("/v1/attestation", &[])
    }

    /// Fetch pk_TEE and accept it only if the report is signed by
    /// `root_public`, carries `expected`, and binds the returned key.
    pub fn verified_enclave(&self, root_public: &PublicKey, expected: &Measurement) -> Result<VerifiedEnclave, ClientError> {
        let info = self.attestation()?;
        let report = AttestationReport::from_hex(&info.report).map_err(|e| ClientError::Attestation(e.to_string()))?;
        if let ReportVerdict::Reject(r) = verify_report(root_public, &report, expected) {
            return Err(ClientError::Attestation(format!("{r:?}")));
        }
        if report.report_data != pk_report_data(&info.pk_tee) {
            return Err(ClientError::Attestation("report does not bind the published key".into()));
        }
        Ok(VerifiedEnclave { pk_tee: info.pk_tee, measurement: *expected, root_public: *root_public })
    }

    /// Returns the opened response and the query digest it is bound to.
    pub fn query(
        &self,
        enclave: &VerifiedEnclave,
        client_id: &ClientId,
        signing_key: &KeyPair,
        prompt: &str,
        private_context: Option<&str>,
    ) -> Result<(GeneratedResponse, Digest), ClientError> {
        let response_key = KeyPair::generate(crag_core::crypto::KeyKind::Agreement, None)
            .map_err(|e| ClientError::Local(e.to_string()))?;
        let (env, qd) = seal_query(
            &enclave.pk_tee,
            client_id,
            signing_key,
            prompt,
            private_context,
            &response_key.public(),
        )
        .map_err(|e| ClientError::Local(e.to_string()))?;
        let body: serde_json::Value = self.post("/v1/query", &EnvelopeRequest { envelope: env.to_hex() })?;
        let resp = ResponseEnvelope::from_json(&body).map_err(|e| ClientError::Local(e.to_string()))?;
        Ok((open_response(&resp, &response_key, &qd, &enclave.root_public, &enclave.measurement)?, qd))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn submit(
        &self,
        enclave: &VerifiedEnclave,
        client_id: &ClientId,
        signing_key: &KeyPair,
        action: SubmitAction,
        record_id: &RecordId,
        text: &str,
        visibility: Visibility,
    ) -> Result<SubmissionReceipt, ClientError> {
        let env: EnvelopeCiphertext =
            seal_submission(&enclave.pk_tee, client_id, signing_key, action, record_id, text, visibility)
                .map_err(|e| ClientError::Local(e.to_string()))?;
        let req = EnvelopeRequest { envelope: env.to_hex() };
        match action {
            SubmitAction::Ingest => self.post("/v1/records", &req),
            SubmitAction::Update => self.post(&format!("/v1/records/{}/update", record_id.as_str()), &req),
        }
    }

    pub fn propose(&self, req: &ProposeRequest) -> Result<AdminProposal, ClientError> {
        self.post("/v1/admin/propose", req)
    }

    pub fn proposal(&self, id: &str) -> Result<AdminProposal, ClientError> {
        self.get(&format!("/v1/admin/proposals/{id}"), &[])
    }

    pub fn approve(&self, approval: &Approval) -> Result<(), ClientError> {
        let _: serde_json::Value = self.post("/v1/admin/approve", approval)?;
        Ok(())
    }

    pub fn execute(&self, req: &ExecuteRequest) -> Result<ExecuteResponse, ClientError> {
        self.post("/v1/admin/execute", req)
    }

    pub fn audit(&self, query: &[(&str, String)]) -> Result<AuditResponse, ClientError> {
        self.get("/v1/audit", query)
    }

    pub fn registry_check(&self, name: Option<&str>, version: Option<&str>) -> Result<RegistryCheckResponse, ClientError> {
        let mut q = Vec::new();
        if let Some(n) = name {
            q.push(("name", n.to_string()));
        }
        if let Some(v) = version {
            q.push(("version", v.to_string()));
        }
        self.get("/v1/registry/check", &q)
    }
}
