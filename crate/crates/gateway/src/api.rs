//! JSON shapes shared by the HTTP server and client. Binary fields are hex.

use std::collections::BTreeMap;

use crag_core::audit::AuditEntry;
use crag_core::crypto::{Digest, PublicKey};
use crag_core::enclave::Measurement;
use crag_core::governance::{Approval, GovernancePolicy, Operation};
use crag_core::privacy::{compile_rules, parse_rules};
use crag_core::registry::DeploymentCheck;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationInfo {
    pub measurement: Measurement,
    pub pk_tee: PublicKey,
    pub signing_public: PublicKey,
    pub root_public: PublicKey,
    /// Report over `pk_report_data(pk_tee)`.
    pub report: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeRequest {
    pub envelope: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposeRequest {
    pub operation: Operation,
    /// Parameter name to hex-encoded value bytes.
    pub params: BTreeMap<String, String>,
    pub actor: String,
}

/// Arguments naming what a governed operation acts on.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OpArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipient: Option<PublicKey>,
    /// Replacement rule pack in the tab-separated rules-file format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<GovernancePolicy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecuteRequest {
    pub proposal_id: String,
    /// When absent, approvals previously submitted to the server are used.
    #[serde(default)]
    pub approvals: Option<Vec<Approval>>,
    #[serde(flatten)]
    pub args: OpArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecuteResponse {
    pub proposal_id: String,
    pub operation: Operation,
    pub approvers: Vec<String>,
    pub outcome: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditResponse {
    pub signing_public: PublicKey,
    pub entries: Vec<AuditEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryCheckResponse {
    pub name: String,
    pub version: String,
    #[serde(flatten)]
    pub check: DeploymentCheck,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Canonical parameters of `op` derived from `args`.
pub fn op_params(op: Operation, args: &OpArgs) -> Result<Vec<(String, Vec<u8>)>, String> {
    let record_id = || args.record_id.clone().ok_or_else(|| format!("{op} needs a record id"));
    Ok(match op {
        Operation::DeleteRecord => vec![("record_id".into(), record_id()?.into_bytes())],
        Operation::ExtractRecord => {
            let recipient = args.recipient.ok_or("extract-record needs a recipient key")?;
            vec![("record_id".into(), record_id()?.into_bytes()), ("recipient".into(), recipient.0.to_vec())]
        }
        Operation::ChangeRules => {
            let text = args.rules.as_deref().ok_or("change-rules needs a rule pack")?;
            let rules = parse_rules(text).map_err(|e| e.to_string())?;
            let redactor = compile_rules(&rules).map_err(|e| e.to_string())?;
            vec![("rules_digest".into(), redactor.rules_digest().0.to_vec())]
        }
        Operation::RotatePolicy => {
            let policy = args.policy.as_ref().ok_or("rotate-policy needs a policy")?;
            vec![("policy".into(), policy.digest().0.to_vec())]
        }
    })
}

pub fn params_digest(op: Operation, params: &[(String, Vec<u8>)]) -> Digest {
    let borrowed: Vec<(&str, &[u8])> = params.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
    crag_core::crypto::digest(&crag_core::governance::canonical_params(op, &borrowed))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use crag_core::audit::{Actor, AuditLog};
    use crag_core::crypto::{generate_keypair, KeyKind};
    use crag_core::enclave::Enclave;
    use crag_core::governance::Governance;

    use super::*;

    #[test]
    fn params_digest_matches_proposal_payload() {
        let enclave = Arc::new(Enclave::boot(b"api", b"cfg", &[1; 32]).unwrap());
        let key = generate_keypair(KeyKind::Signing, None).unwrap();
        let policy = GovernancePolicy::new(vec![("rep0".into(), key.public())], 1).unwrap();
        let gov = Governance::new(policy.clone(), Arc::new(AuditLog::in_memory(enclave)));
        let recipient = generate_keypair(KeyKind::Agreement, None).unwrap().public();
        let cases = [
            (Operation::DeleteRecord, OpArgs { record_id: Some("r1".into()), ..Default::default() }),
            (Operation::ExtractRecord, OpArgs { record_id: Some("r1".into()), recipient: Some(recipient), ..Default::default() }),
            (Operation::ChangeRules, OpArgs { rules: Some("email\t[a-z]+@[a-z]+\t[EMAIL]\n".into()), ..Default::default() }),
            (Operation::RotatePolicy, OpArgs { policy: Some(policy), ..Default::default() }),
        ];
        for (op, args) in cases {
            let params = op_params(op, &args).unwrap();
            let borrowed: Vec<(&str, &[u8])> = params.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
            let p = gov.propose(op, &borrowed, &Actor::new("ops").unwrap()).unwrap();
            assert_eq!(params_digest(op, &params), p.payload_digest, "{op}");
        }
    }

    #[test]
    fn missing_arguments_are_reported() {
        assert!(op_params(Operation::DeleteRecord, &OpArgs::default()).is_err());
        let only_id = OpArgs { record_id: Some("r1".into()), ..Default::default() };
        assert!(op_params(Operation::ExtractRecord, &only_id).is_err());
        assert!(op_params(Operation::ChangeRules, &OpArgs { rules: Some("bad line".into()), ..Default::default() }).is_err());
    }

    #[test]
    fn execute_request_flattens_arguments() {
        let req: ExecuteRequest = serde_json::from_str(r#"{"proposal_id":"ab","record_id":"r9"}"#).unwrap();
        assert!(req.approvals.is_none());
        assert_eq!(req.args.record_id.as_deref(), Some("r9"));
    }
}
