//! t-of-n approval gate for destructive and policy-changing operations.
//!
//! Each representative signs `proposal_id ‖ payload_digest ‖ nonce` with an
//! independent Ed25519 key. Execution counts distinct registered signers with
//! valid signatures and, at or above the threshold, hands out a single-use
//! [`ExecutedProposal`] that the gated operation consumes by value.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{Actor, AuditError, AuditLog, EventKind};
use crate::crypto::{digest, verify, Digest, KeyPair, PublicKey, Signature};

#[derive(Debug, Error)]
pub enum GovernanceError {
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("unknown proposal {0}")]
    UnknownProposal(String),
    #[error("representative {0} is not registered")]
    UnknownRep(String),
    #[error("representative {0} already approved this proposal")]
    DuplicateApproval(String),
    #[error("approval signature from {0} does not verify")]
    BadSignature(String),
    #[error("insufficient approvals: {valid} valid of {threshold} required")]
    Insufficient { valid: usize, threshold: usize },
    #[error("proposal {0} was already executed")]
    AlreadyExecuted(String),
    #[error("malformed governance artifact: {0}")]
    Malformed(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operation {
    DeleteRecord,
    ExtractRecord,
    ChangeRules,
    RotatePolicy,
}

impl Operation {
    pub fn as_str(self) -> &'static str {
        match self {
            Operation::DeleteRecord => "delete-record",
            Operation::ExtractRecord => "extract-record",
            Operation::ChangeRules => "change-rules",
            Operation::RotatePolicy => "rotate-policy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Operation::DeleteRecord, Operation::ExtractRecord, Operation::ChangeRules, Operation::RotatePolicy]
            .into_iter()
            .find(|o| o.as_str() == s)
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `u32 len ‖ op ‖ u32 count ‖ (u32 len ‖ name ‖ u32 len ‖ value)*`, params sorted by name.
pub fn canonical_params(op: Operation, params: &[(&str, &[u8])]) -> Vec<u8> {
    let mut sorted: Vec<&(&str, &[u8])> = params.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = Vec::new();
    let mut put = |b: &[u8]| {
        out.extend_from_slice(&(b.len() as u32).to_be_bytes());
        out.extend_from_slice(b);
    };
    put(op.as_str().as_bytes());
    let mut body = (sorted.len() as u32).to_be_bytes().to_vec();
    for (name, value) in sorted {
        body.extend_from_slice(&(name.len() as u32).to_be_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(value.len() as u32).to_be_bytes());
        body.extend_from_slice(value);
    }
    out.extend_from_slice(&body);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representative {
    pub rep_id: String,
    pub public: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GovernancePolicy {
    pub representatives: Vec<Representative>,
    pub threshold: usize,
}

impl GovernancePolicy {
    pub fn new(reps: Vec<(String, PublicKey)>, threshold: usize) -> Result<Self, GovernanceError> {
        let policy = GovernancePolicy {
            representatives: reps.into_iter().map(|(rep_id, public)| Representative { rep_id, public }).collect(),
            threshold,
        };
        policy.validate()?;
        Ok(policy)
    }

    fn validate(&self) -> Result<(), GovernanceError> {
        let n = self.representatives.len();
        if self.threshold == 0 || self.threshold > n {
            return Err(GovernanceError::BadPolicy(format!("threshold {} with {} representatives", self.threshold, n)));
        }
        let mut ids = BTreeSet::new();
        for r in &self.representatives {
            Actor::new(&r.rep_id).map_err(|_| GovernanceError::BadPolicy(format!("bad rep id {:?}", r.rep_id)))?;
            if !ids.insert(r.rep_id.as_str()) {
                return Err(GovernanceError::BadPolicy(format!("duplicate rep id {}", r.rep_id)));
            }
        }
        Ok(())
    }

    pub fn key_of(&self, rep_id: &str) -> Option<&PublicKey> {
        self.representatives.iter().find(|r| r.rep_id == rep_id).map(|r| &r.public)
    }

    pub fn digest(&self) -> Digest {
        digest(&serde_json::to_vec(self).expect("policy serializes"))
    }

    pub fn load(path: &Path) -> Result<Self, GovernanceError> {
        let text = std::fs::read_to_string(path).map_err(|e| GovernanceError::BadPolicy(e.to_string()))?;
        let policy: GovernancePolicy =
            serde_json::from_str(&text).map_err(|e| GovernanceError::BadPolicy(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminProposal {
    /// 16 random bytes, hex.
    pub proposal_id: String,
    pub operation: Operation,
    pub payload_digest: Digest,
    #[serde(with = "hex16")]
    pub nonce: [u8; 16],
    pub created_seq: u64,
}

mod hex16 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("expected 16 bytes"))
    }
}

impl AdminProposal {
    /// The bytes every approval signs.
    pub fn signing_message(&self) -> Vec<u8> {
        let mut m = hex::decode(&self.proposal_id).unwrap_or_else(|_| self.proposal_id.as_bytes().to_vec());
        m.extend_from_slice(&self.payload_digest.0);
        m.extend_from_slice(&self.nonce);
        m
    }

    pub fn digest(&self) -> Digest {
        let mut m = self.operation.as_str().as_bytes().to_vec();
        m.extend_from_slice(&self.signing_message());
        m.extend_from_slice(&self.created_seq.to_be_bytes());
        digest(&m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approval {
    pub proposal_id: String,
    pub rep_id: String,
    pub signature: Signature,
}

impl Approval {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("approval serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GovernanceError> {
        serde_json::from_str(s).map_err(|e| GovernanceError::Malformed(e.to_string()))
    }
}

/// Sign an approval for `proposal`. Runs on the representative's side.
pub fn sign_approval(proposal: &AdminProposal, rep_id: &str, key: &KeyPair) -> Result<Approval, GovernanceError> {
    let signature = key.sign(&proposal.signing_message()).map_err(|e| GovernanceError::Malformed(e.to_string()))?;
    Ok(Approval { proposal_id: proposal.proposal_id.clone(), rep_id: rep_id.to_string(), signature })
}

/// Authorization for exactly one gated operation. Not `Clone`.
#[derive(Debug)]
pub struct ExecutedProposal {
    proposal: AdminProposal,
    approvers: Vec<String>,
}

impl ExecutedProposal {
    pub fn operation(&self) -> Operation {
        self.proposal.operation
    }

    pub fn payload_digest(&self) -> Digest {
        self.proposal.payload_digest
    }

    pub fn proposal_id(&self) -> &str {
        &self.proposal.proposal_id
    }

    pub fn proposal_digest(&self) -> Digest {
        self.proposal.digest()
    }

    pub fn approvers(&self) -> &[String] {
        &self.approvers
    }

    pub fn authorizes(&self, op: Operation, params: &[(&str, &[u8])]) -> bool {
        self.proposal.operation == op && self.proposal.payload_digest == digest(&canonical_params(op, params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalStatus {
    Open,
    Executed,
}

struct Entry {
    proposal: AdminProposal,
    status: ProposalStatus,
    approvals: Vec<Approval>,
}

pub struct Governance {
    policy: RwLock<GovernancePolicy>,
    audit: Arc<AuditLog>,
    proposals: Mutex<(HashMap<String, Entry>, u64)>,
}

impl Governance {
    pub fn new(policy: GovernancePolicy, audit: Arc<AuditLog>) -> Self {
        Governance { policy: RwLock::new(policy), audit, proposals: Mutex::new((HashMap::new(), 0)) }
    }

    pub fn policy(&self) -> GovernancePolicy {
        self.policy.read().clone()
    }

    pub fn propose(
        &self,
        operation: Operation,
        params: &[(&str, &[u8])],
        actor: &Actor,
    ) -> Result<AdminProposal, GovernanceError> {
        let mut id = [0u8; 16];
        let mut nonce = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut id);
        rand::thread_rng().fill_bytes(&mut nonce);
        let mut guard = self.proposals.lock();
        let created_seq = guard.1;
        let proposal = AdminProposal {
            proposal_id: hex::encode(id),
            operation,
            payload_digest: digest(&canonical_params(operation, params)),
            nonce,
            created_seq,
        };
        self.audit.append_event(EventKind::Proposal, actor, vec![proposal.digest(), proposal.payload_digest])?;
        guard.1 += 1;
        guard.0.insert(
            proposal.proposal_id.clone(),
            Entry { proposal: proposal.clone(), status: ProposalStatus::Open, approvals: Vec::new() },
        );
        Ok(proposal)
    }

    pub fn proposal(&self, id: &str) -> Option<(AdminProposal, ProposalStatus)> {
        self.proposals.lock().0.get(id).map(|e| (e.proposal.clone(), e.status))
    }

    /// Record a representative's signed approval.
    pub fn submit_approval(&self, approval: &Approval) -> Result<(), GovernanceError> {
        let policy = self.policy.read();
        let key = *policy.key_of(&approval.rep_id).ok_or_else(|| GovernanceError::UnknownRep(approval.rep_id.clone()))?;
        drop(policy);
        let mut guard = self.proposals.lock();
        let entry = guard
            .0
            .get_mut(&approval.proposal_id)
            .ok_or_else(|| GovernanceError::UnknownProposal(approval.proposal_id.clone()))?;
        if entry.status == ProposalStatus::Executed {
            return Err(GovernanceError::AlreadyExecuted(approval.proposal_id.clone()));
        }
        if entry.approvals.iter().any(|a| a.rep_id == approval.rep_id) {
            return Err(GovernanceError::DuplicateApproval(approval.rep_id.clone()));
        }
        if !verify(&key, &entry.proposal.signing_message(), &approval.signature) {
            return Err(GovernanceError::BadSignature(approval.rep_id.clone()));
        }
        self.audit.append_event(
            EventKind::Approval,
            &Actor::new(&approval.rep_id)?,
            vec![entry.proposal.digest()],
        )?;
        entry.approvals.push(approval.clone());
        Ok(())
    }

    /// Sign and submit in one step.
    pub fn approve(&self, proposal_id: &str, rep_id: &str, key: &KeyPair) -> Result<Approval, GovernanceError> {
        let (proposal, _) = self.proposal(proposal_id).ok_or_else(|| GovernanceError::UnknownProposal(proposal_id.into()))?;
        if self.policy.read().key_of(rep_id).is_none() {
            return Err(GovernanceError::UnknownRep(rep_id.into()));
        }
        let approval = sign_approval(&proposal, rep_id, key)?;
        self.submit_approval(&approval)?;
        Ok(approval)
    }

    /// Approvals recorded through [`Governance::submit_approval`].
    pub fn collected_approvals(&self, proposal_id: &str) -> Vec<Approval> {
        self.proposals.lock().0.get(proposal_id).map(|e| e.approvals.clone()).unwrap_or_default()
    }

    /// Count distinct registered signers whose signature verifies over this
    /// proposal; invalid approvals are ignored individually.
    pub fn execute(&self, proposal_id: &str, approvals: &[Approval]) -> Result<ExecutedProposal, GovernanceError> {
        let policy = self.policy.read().clone();
        let mut guard = self.proposals.lock();
        let entry = guard.0.get_mut(proposal_id).ok_or_else(|| GovernanceError::UnknownProposal(proposal_id.into()))?;
        if entry.status == ProposalStatus::Executed {
            return Err(GovernanceError::AlreadyExecuted(proposal_id.into()));
        }
        let message = entry.proposal.signing_message();
        let approvers: BTreeSet<String> = approvals
            .iter()
            .filter(|a| a.proposal_id == proposal_id)
            .filter(|a| policy.key_of(&a.rep_id).is_some_and(|k| verify(k, &message, &a.signature)))
            .map(|a| a.rep_id.clone())
            .collect();
        if approvers.len() < policy.threshold {
            return Err(GovernanceError::Insufficient { valid: approvers.len(), threshold: policy.threshold });
        }
        self.audit.append_event(
            EventKind::Execution,
            &Actor::enclave(),
            vec![entry.proposal.digest(), entry.proposal.payload_digest],
        )?;
        entry.status = ProposalStatus::Executed;
        Ok(ExecutedProposal { proposal: entry.proposal.clone(), approvers: approvers.into_iter().collect() })
    }

    /// Replace the policy. The token must authorize exactly `next`.
    pub fn rotate_policy(&self, next: GovernancePolicy, token: ExecutedProposal) -> Result<(), GovernanceError> {
        next.validate()?;
        let d = next.digest();
        if !token.authorizes(Operation::RotatePolicy, &[("policy", &d.0)]) {
            return Err(GovernanceError::Malformed("token does not authorize this policy".into()));
        }
        *self.policy.write() = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair, KeyKind};
    use crate::enclave::Enclave;

    fn setup(n: u8, t: usize) -> (Governance, Vec<KeyPair>, Arc<AuditLog>) {
        let e = Arc::new(Enclave::boot(b"gov", b"cfg", &[1; 32]).unwrap());
        let audit = Arc::new(AuditLog::in_memory(e));
        let keys: Vec<KeyPair> = (0..n).map(|i| generate_keypair(KeyKind::Signing, Some(&[i + 1; 32])).unwrap()).collect();
        let policy =
            GovernancePolicy::new(keys.iter().enumerate().map(|(i, k)| (format!("rep{i}"), k.public())).collect(), t)
                .unwrap();
        (Governance::new(policy, audit.clone()), keys, audit)
    }

    fn op() -> Actor {
        Actor::new("operator").unwrap()
    }

    #[test]
    fn canonical_params_are_order_independent() {
        let a = canonical_params(Operation::ExtractRecord, &[("record_id", b"r1"), ("recipient", b"k")]);
        let b = canonical_params(Operation::ExtractRecord, &[("recipient", b"k"), ("record_id", b"r1")]);
        assert_eq!(a, b);
        assert_ne!(a, canonical_params(Operation::DeleteRecord, &[("record_id", b"r1"), ("recipient", b"k")]));
    }

    #[test]
    fn proposals_are_distinct_and_bind_payload() {
        let (g, _, _) = setup(3, 2);
        let p1 = g.propose(Operation::DeleteRecord, &[("record_id", b"r")], &op()).unwrap();
        let p2 = g.propose(Operation::DeleteRecord, &[("record_id", b"r")], &op()).unwrap();
        assert_ne!(p1.proposal_id, p2.proposal_id);
        assert_ne!(p1.nonce, p2.nonce);
        assert_eq!(p1.payload_digest, digest(&canonical_params(Operation::DeleteRecord, &[("record_id", b"r")])));
        assert_eq!(p1.payload_digest, p2.payload_digest);
    }

    #[test]
    fn threshold_matches_brute_force_over_all_subsets() {
        for n in 1..=4u8 {
            for t in 1..=n as usize {
                let (g, keys, _) = setup(n, t);
                for mask in 0u32..(1 << n) {
                    let p = g.propose(Operation::DeleteRecord, &[("record_id", b"x")], &op()).unwrap();
                    let approvals: Vec<Approval> = (0..n as usize)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| sign_approval(&p, &format!("rep{i}"), &keys[i]).unwrap())
                        .collect();
                    let expected = mask.count_ones() as usize >= t;
                    assert_eq!(g.execute(&p.proposal_id, &approvals).is_ok(), expected, "n={n} t={t} mask={mask:b}");
                }
            }
        }
    }

    #[test]
    fn duplicate_signer_counts_once() {
        let (g, keys, _) = setup(3, 2);
        let p = g.propose(Operation::DeleteRecord, &[("record_id", b"x")], &op()).unwrap();
        let a = sign_approval(&p, "rep0", &keys[0]).unwrap();
        assert!(matches!(
            g.execute(&p.proposal_id, &[a.clone(), a]),
            Err(GovernanceError::Insufficient { valid: 1, threshold: 2 })
        ));
    }

    #[test]
    fn submit_rejects_duplicates_unknown_reps_and_foreign_keys() {
        let (g, keys, audit) = setup(3, 2);
        let p = g.propose(Operation::ChangeRules, &[("rules_digest", &[0; 32])], &op()).unwrap();
        g.approve(&p.proposal_id, "rep0", &keys[0]).unwrap();
        assert!(matches!(g.approve(&p.proposal_id, "rep0", &keys[0]), Err(GovernanceError::DuplicateApproval(_))));
        let outsider = generate_keypair(KeyKind::Signing, None).unwrap();
        assert!(matches!(g.approve(&p.proposal_id, "rep9", &outsider), Err(GovernanceError::UnknownRep(_))));
        assert!(matches!(g.approve(&p.proposal_id, "rep1", &outsider), Err(GovernanceError::BadSignature(_))));
        assert_eq!(audit.query(&crate::audit::AuditFilter { kind: Some(EventKind::Approval), ..Default::default() }).len(), 1);
    }

    #[test]
    fn approvals_do_not_transfer_between_proposals() {
        let (g, keys, _) = setup(3, 2);
        let p1 = g.propose(Operation::DeleteRecord, &[("record_id", b"a")], &op()).unwrap();
        let p2 = g.propose(Operation::DeleteRecord, &[("record_id", b"a")], &op()).unwrap();
        let mut moved: Vec<Approval> = (0..2).map(|i| sign_approval(&p1, &format!("rep{i}"), &keys[i]).unwrap()).collect();
        for a in &mut moved {
            a.proposal_id = p2.proposal_id.clone();
        }
        assert!(g.execute(&p2.proposal_id, &moved).is_err());
    }

    #[test]
    fn executed_proposal_is_single_shot() {
        let (g, keys, _) = setup(3, 2);
        let p = g.propose(Operation::DeleteRecord, &[("record_id", b"a")], &op()).unwrap();
        let approvals: Vec<Approval> = (1..3).map(|i| sign_approval(&p, &format!("rep{i}"), &keys[i]).unwrap()).collect();
        let token = g.execute(&p.proposal_id, &approvals).unwrap();
        assert_eq!(token.approvers(), ["rep1", "rep2"]);
        assert!(token.authorizes(Operation::DeleteRecord, &[("record_id", b"a")]));
        assert!(!token.authorizes(Operation::DeleteRecord, &[("record_id", b"b")]));
        assert!(matches!(g.execute(&p.proposal_id, &approvals), Err(GovernanceError::AlreadyExecuted(_))));
    }

    #[test]
    fn policy_validation_and_rotation() {
        let k = generate_keypair(KeyKind::Signing, None).unwrap();
        assert!(GovernancePolicy::new(vec![("a".into(), k.public())], 0).is_err());
        assert!(GovernancePolicy::new(vec![("a".into(), k.public())], 2).is_err());
        assert!(GovernancePolicy::new(vec![("a".into(), k.public()), ("a".into(), k.public())], 1).is_err());

        let (g, keys, _) = setup(3, 2);
        let next = GovernancePolicy::new(vec![("solo".into(), k.public())], 1).unwrap();
        let d = next.digest();
        let p = g.propose(Operation::RotatePolicy, &[("policy", &d.0)], &op()).unwrap();
        let approvals: Vec<Approval> = (0..2).map(|i| sign_approval(&p, &format!("rep{i}"), &keys[i]).unwrap()).collect();
        let token = g.execute(&p.proposal_id, &approvals).unwrap();
        g.rotate_policy(next.clone(), token).unwrap();
        assert_eq!(g.policy(), next);
    }

    #[test]
    fn artifacts_round_trip_as_json() {
        let (g, keys, _) = setup(3, 2);
        let p = g.propose(Operation::DeleteRecord, &[("record_id", b"a")], &op()).unwrap();
        let back: AdminProposal = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        let a = sign_approval(&p, "rep0", &keys[0]).unwrap();
        assert_eq!(Approval::from_json(&a.to_json()).unwrap(), a);
        let policy = g.policy();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("p.json"), policy.to_json()).unwrap();
        assert_eq!(GovernancePolicy::load(&dir.path().join("p.json")).unwrap(), policy);
    }
}
