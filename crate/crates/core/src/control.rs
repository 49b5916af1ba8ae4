//! Authentication and the management REST API.
//!
//! Every call runs the underlying registry or scheduler operation as the
//! authenticated caller; the API never acts under a service identity.
//!
//! ```text
//! GET    /api/whoami
//! GET    /api/forwards               POST /api/forwards {name}
//! PUT    /api/forwards/{name}        {node, port} | {disabled: true}
//! PUT    /api/forwards/{name}/mode   {mode: "750"}
//! DELETE /api/forwards/{name}
//! GET    /api/jobs                   POST /api/jobs {node, app_kind, port_count}
//! DELETE /api/jobs/{id}
//! ```

use std::collections::HashMap;
use std::sync::Arc;

use bytes::Bytes;
use http::{header, HeaderMap, Method, Request, Response, StatusCode};
use http_body_util::BodyExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::AppKind;
use crate::config::UserEntry;
use crate::http::{empty, json_response, Body};
use crate::principal::Principal;
use crate::registry::{ForwardRecord, RegistryError, RegistryStore};
use crate::route::Destination;
use crate::scheduler::{JobRecord, Scheduler, SchedulerError};

/// Cookie accepted as an alternative to the bearer header, so links opened
/// straight from a browser carry the caller's credential.
pub const TOKEN_COOKIE: &str = "portal_token";

const MAX_API_BODY: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("missing or unknown credential")]
    Unauthenticated,
}

/// Static bearer-token table.
#[derive(Debug, Clone)]
pub struct UserTable {
    by_token: HashMap<String, Principal>,
}

impl UserTable {
    pub fn new(entries: &[UserEntry]) -> Result<Self, String> {
        if entries.is_empty() {
            return Err("at least one user is required".into());
        }
        let mut by_token = HashMap::new();
        for e in entries {
            if e.token.is_empty() {
                return Err(format!("user {:?} has an empty token", e.name));
            }
            if by_token.insert(e.token.clone(), e.principal()).is_some() {
                return Err(format!("duplicate token for user {:?}", e.name));
            }
        }
        Ok(Self { by_token })
    }

    /// Resolves an `Authorization` header value of the form `Bearer <token>`.
    pub fn authenticate(&self, authorization: Option<&str>) -> Result<Principal, AuthError> {
        let token = authorization
            .and_then(bearer_token)
            .ok_or(AuthError::Unauthenticated)?;
        self.by_token
            .get(token)
            .cloned()
            .ok_or(AuthError::Unauthenticated)
    }

    /// Bearer header first, then the token cookie.
    pub fn authenticate_headers(&self, headers: &HeaderMap) -> Result<Principal, AuthError> {
        let auth = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok());
        if auth.is_some() {
            return self.authenticate(auth);
        }
        let token = cookie_value(headers, TOKEN_COOKIE).ok_or(AuthError::Unauthenticated)?;
        self.by_token
            .get(token.as_str())
            .cloned()
            .ok_or(AuthError::Unauthenticated)
    }
}

fn bearer_token(value: &str) -> Option<&str> {
    let (scheme, token) = value.trim().split_once(' ')?;
    let token = token.trim();
    (scheme.eq_ignore_ascii_case("bearer") && !token.is_empty()).then_some(token)
}

pub(crate) fn cookie_value(headers: &HeaderMap, name: &str) -> Option<String> {
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .find_map(|kv| {
            let (k, v) = kv.trim().split_once('=')?;
            (k == name).then(|| v.to_string())
        })
}

/// A failed API call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn into_response(self) -> Response<Body> {
        json_response(
            self.status,
            &serde_json::json!({ "error": self.message, "status": self.status.as_u16() }),
        )
    }
}

pub fn registry_status(e: &RegistryError) -> StatusCode {
    match e {
        RegistryError::NameTaken(_) => StatusCode::CONFLICT,
        RegistryError::NotFound(_) => StatusCode::NOT_FOUND,
        RegistryError::NotOwner(_) => StatusCode::FORBIDDEN,
        RegistryError::MalformedName(_)
        | RegistryError::MalformedTarget(_)
        | RegistryError::MalformedMode(_) => StatusCode::BAD_REQUEST,
        RegistryError::Corrupt { .. } | RegistryError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn scheduler_status(e: &SchedulerError) -> StatusCode {
    match e {
        SchedulerError::RangeExhausted { .. } | SchedulerError::SpawnFailure(_) => {
            StatusCode::SERVICE_UNAVAILABLE
        }
        SchedulerError::UnknownNode(_)
        | SchedulerError::InvalidPortCount
        | SchedulerError::InvalidRange { .. } => StatusCode::BAD_REQUEST,
        SchedulerError::NotFound(_) => StatusCode::NOT_FOUND,
        SchedulerError::NotOwner(_) => StatusCode::FORBIDDEN,
        SchedulerError::NotRunning(_) => StatusCode::CONFLICT,
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        ApiError::new(registry_status(&e), e.to_string())
    }
}

impl From<SchedulerError> for ApiError {
    fn from(e: SchedulerError) -> Self {
        ApiError::new(scheduler_status(&e), e.to_string())
    }
}

/// A forward as shown to one caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardView {
    #[serde(flatten)]
    pub record: ForwardRecord,
    pub enabled: bool,
    pub owned: bool,
    pub can_connect: bool,
}

impl ForwardView {
    fn new(record: ForwardRecord, caller: &Principal) -> Self {
        Self {
            enabled: record.is_enabled(),
            owned: record.owner_uid == caller.uid(),
            can_connect: record.permits_connect(caller),
            record,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobView {
    #[serde(flatten)]
    pub record: JobRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect_link: Option<String>,
}

impl From<JobRecord> for JobView {
    fn from(record: JobRecord) -> Self {
        Self {
            connect_link: record.connect_link().ok(),
            record,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClaimRequest {
    pub name: String,
}

/// Body of `PUT /api/forwards/{name}`.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct DestinationRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disabled: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModeRequest {
    pub mode: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LaunchRequest {
    pub node: String,
    pub app_kind: AppKind,
    #[serde(default = "one")]
    pub port_count: usize,
}

fn one() -> usize {
    1
}

/// The management API over the registry and the scheduler.
#[derive(Debug, Clone)]
pub struct ControlPlane {
    registry: Arc<RegistryStore>,
    scheduler: Arc<Scheduler>,
}

impl ControlPlane {
    pub fn new(registry: Arc<RegistryStore>, scheduler: Arc<Scheduler>) -> Self {
        Self {
            registry,
            scheduler,
        }
    }

    pub async fn handle(&self, caller: &Principal, req: Request<Body>) -> Response<Body> {
        match self.route(caller, req).await {
            Ok(resp) => resp,
            Err(e) => e.into_response(),
        }
    }

    async fn route(&self, caller: &Principal, req: Request<Body>) -> Result<Response<Body>, ApiError> {
        let method = req.method().clone();
        let path = req.uri().path().to_string();
        let segments: Vec<&str> = path
            .trim_start_matches("/api")
            .split('/')
            .filter(|s| !s.is_empty())
            .collect();
        let body = read_body(req).await?;

        match (&method, segments.as_slice()) {
            (&Method::GET, ["whoami"]) => Ok(json_response(StatusCode::OK, caller)),

            (&Method::GET, ["forwards"]) => {
                let visible: Vec<ForwardView> = self
                    .registry
                    .list()
                    .into_iter()
                    .filter(|r| r.owner_uid == caller.uid() || r.permits_connect(caller))
                    .map(|r| ForwardView::new(r, caller))
                    .collect();
                Ok(json_response(StatusCode::OK, &visible))
            }
            (&Method::POST, ["forwards"]) => {
                let claim: ClaimRequest = parse_json(&body)?;
                let record = self.registry.claim_name(&claim.name, caller)?;
                Ok(json_response(StatusCode::CREATED, &ForwardView::new(record, caller)))
            }
            (&Method::PUT, ["forwards", name]) => {
                let req: DestinationRequest = parse_json(&body)?;
                let destination = match (req.disabled, req.node, req.port) {
                    (true, None, None) => None,
                    (false, Some(node), Some(port)) => {
                        let port = u16::try_from(port).map_err(|_| {
                            ApiError::from(RegistryError::MalformedTarget(format!("{node}:{port}")))
                        })?;
                        Some(
                            Destination::new(node, port)
                                .map_err(|e| ApiError::from(RegistryError::from(e)))?,
                        )
                    }
                    _ => {
                        return Err(ApiError::new(
                            StatusCode::BAD_REQUEST,
                            "expected {node, port} or {disabled: true}",
                        ))
                    }
                };
                let record = self.registry.set_destination(name, caller, destination)?;
                Ok(json_response(StatusCode::OK, &ForwardView::new(record, caller)))
            }
            (&Method::PUT, ["forwards", name, "mode"]) => {
                let req: ModeRequest = parse_json(&body)?;
                let record = self.registry.set_access(name, caller, &req.mode)?;
                Ok(json_response(StatusCode::OK, &ForwardView::new(record, caller)))
            }
            (&Method::DELETE, ["forwards", name]) => {
                self.registry.release_name(name, caller)?;
                let mut resp = Response::new(empty());
                *resp.status_mut() = StatusCode::NO_CONTENT;
                Ok(resp)
            }

            (&Method::GET, ["jobs"]) => {
                let jobs: Vec<JobView> = self
                    .scheduler
                    .list_jobs(caller)
                    .into_iter()
                    .map(JobView::from)
                    .collect();
                Ok(json_response(StatusCode::OK, &jobs))
            }
            (&Method::POST, ["jobs"]) => {
                let req: LaunchRequest = parse_json(&body)?;
                let job = self
                    .scheduler
                    .launch(caller, &req.node, req.app_kind, req.port_count)?;
                Ok(json_response(StatusCode::CREATED, &JobView::from(job)))
            }
            (&Method::DELETE, ["jobs", id]) => {
                let id: u64 = id
                    .parse()
                    .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no such job {id}")))?;
                let job = self.scheduler.stop(id, caller)?;
                Ok(json_response(StatusCode::OK, &JobView::from(job)))
            }

            (_, ["whoami"] | ["forwards"] | ["forwards", _] | ["forwards", _, "mode"] | ["jobs"] | ["jobs", _]) => {
                Err(ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed"))
            }
            _ => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no endpoint {path}"))),
        }
    }
}

async fn read_body(req: Request<Body>) -> Result<Bytes, ApiError> {
    let mut body = req.into_body();
    let mut buf = Vec::new();
    while let Some(frame) = body.frame().await {
        let frame =
            frame.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("reading body: {e}")))?;
        if let Ok(data) = frame.into_data() {
            if buf.len() + data.len() > MAX_API_BODY {
                return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "request body too large"));
            }
            buf.extend_from_slice(&data);
        }
    }
    Ok(Bytes::from(buf))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")))
}
