//! HTTP front end. Every handler runs its node operation on the blocking pool.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crag_core::audit::{AuditFilter, EventKind};
use crag_core::crypto::Digest;
use crag_core::governance::Approval;
use crag_core::rag::SubmitAction;
use serde::Deserialize;

use crate::api::{EnvelopeRequest, ErrorBody, ExecuteRequest, ProposeRequest};
use crate::node::{ErrorKind, Node, NodeError};

impl IntoResponse for NodeError {
    fn into_response(self) -> Response {
        let status = match self.kind {
            ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
            ErrorKind::Unauthorized => StatusCode::UNAUTHORIZED,
            ErrorKind::Refused => StatusCode::FORBIDDEN,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type Reply = Result<Json<serde_json::Value>, NodeError>;

async fn blocking<T, F>(node: Arc<Node>, f: F) -> Reply
where
    T: serde::Serialize + Send + 'static,
    F: FnOnce(&Node) -> Result<T, NodeError> + Send + 'static,
{
    let out = tokio::task::spawn_blocking(move || f(&node))
        .await
        .map_err(|e| NodeError::new(ErrorKind::Internal, e))??;
    serde_json::to_value(out).map(Json).map_err(|e| NodeError::new(ErrorKind::Internal, e))
}

async fn attestation(State(node): State<Arc<Node>>) -> Reply {
    blocking(node, |n| n.attestation()).await
}

async fn query(State(node): State<Arc<Node>>, Json(req): Json<EnvelopeRequest>) -> Reply {
    blocking(node, move |n| n.query(&req.envelope).map(|r| r.to_json())).await
}

async fn ingest(State(node): State<Arc<Node>>, Json(req): Json<EnvelopeRequest>) -> Reply {
    blocking(node, move |n| n.submit(&req.envelope, SubmitAction::Ingest, None)).await
}

async fn update(State(node): State<Arc<Node>>, Path(id): Path<String>, Json(req): Json<EnvelopeRequest>) -> Reply {
    blocking(node, move |n| n.submit(&req.envelope, SubmitAction::Update, Some(&id))).await
}

async fn propose(State(node): State<Arc<Node>>, Json(req): Json<ProposeRequest>) -> Reply {
    blocking(node, move |n| n.propose(&req)).await
}

async fn proposal(State(node): State<Arc<Node>>, Path(id): Path<String>) -> Reply {
    blocking(node, move |n| n.proposal(&id)).await
}

async fn approve(State(node): State<Arc<Node>>, Json(req): Json<Approval>) -> Reply {
    blocking(node, move |n| n.approve(&req).map(|()| serde_json::json!({ "accepted": true }))).await
}

async fn execute(State(node): State<Arc<Node>>, Json(req): Json<ExecuteRequest>) -> Reply {
    blocking(node, move |n| n.execute(&req)).await
}

#[derive(Debug, Default, Deserialize)]
pub struct AuditParams {
    pub kind: Option<String>,
    pub actor: Option<String>,
    pub subject: Option<String>,
    pub from: Option<u64>,
    pub to: Option<u64>,
}

impl AuditParams {
    pub fn filter(&self) -> Result<AuditFilter, NodeError> {
        let kind = match &self.kind {
            Some(k) => Some(EventKind::parse(k).ok_or_else(|| NodeError::bad(format!("unknown event kind {k}")))?),
            None => None,
        };
        let subject = self.subject.as_deref().map(Digest::from_hex).transpose().map_err(NodeError::bad)?;
        let seq_range = match (self.from, self.to) {
            (None, None) => None,
            (from, to) => Some(from.unwrap_or(0)..to.unwrap_or(u64::MAX)),
        };
        Ok(AuditFilter { kind, actor: self.actor.clone(), subject, seq_range })
    }
}

async fn audit(State(node): State<Arc<Node>>, Query(params): Query<AuditParams>) -> Reply {
    blocking(node, move |n| Ok(n.audit(&params.filter()?))).await
}

#[derive(Debug, Default, Deserialize)]
struct RegistryParams {
    name: Option<String>,
    version: Option<String>,
}

async fn registry_check(State(node): State<Arc<Node>>, Query(p): Query<RegistryParams>) -> Reply {
    blocking(node, move |n| n.registry_check(p.name.as_deref(), p.version.as_deref())).await
}

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/v1/attestation", get(attestation))
        .route("/v1/pk", get(attestation))
        .route("/v1/query", post(query))
        .route("/v1/records", post(ingest))
        .route("/v1/records/:id/update", post(update))
        .route("/v1/admin/propose", post(propose))
        .route("/v1/admin/proposals/:id", get(proposal))
        .route("/v1/admin/approve", post(approve))
        .route("/v1/admin/execute", post(execute))
        .route("/v1/audit", get(audit))
        .route("/v1/registry/check", get(registry_check))
        .with_state(node)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutdown signal received");
}

/// Serve until SIGTERM or ctrl-c, then flush the node.
pub async fn serve(node: Arc<Node>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    println!("listening on http://{local}");
    log::info!("listening on {local}");
    axum::serve(listener, router(node.clone())).with_graceful_shutdown(shutdown_signal()).await?;
    tokio::task::spawn_blocking(move || node.shutdown()).await.map_err(std::io::Error::other)?;
    Ok(())
}
