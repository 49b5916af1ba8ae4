//! The HTTP front door.
//!
//! Every request is authenticated first (only `/` and `/ui/` are public),
//! then routed:
//!
//! * `/fw/<name>/...`: registry lookup, the forward's execute bits for the
//!   caller, enabled check, ident lookup of the destination, and the
//!   cross-connection rule, in that order.
//! * `/fw2/<node>:<port>/...`: ident lookup and the user-based firewall rule.
//! * anything else: the control API under `/api/`, static UI under `/ui/`.
//!
//! No backend connection is opened before authorization succeeds.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderName, HeaderValue};
use http::{Request, Response, StatusCode, Uri};
use http_body_util::BodyExt;
use hyper::body::Incoming;
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::{TokioExecutor, TokioIo};
use thiserror::Error;
use tracing::{debug, warn};

use crate::apps::is_websocket_upgrade;
use crate::body::{idle_timeout, rewrite_body};
use crate::control::{cookie_value, AuthError, ControlPlane, UserTable, TOKEN_COOKIE};
use crate::firewall::{authorize_direct, authorize_named, ListenerInfo, Reason};
use crate::http::{empty, full, path_and_query, status_response, Body, BoxError};
use crate::ident::{IdentError, IdentResolver};
use crate::principal::Principal;
use crate::registry::{ForwardRecord, RegistryError, RegistryStore};
use crate::rewrite::{is_ascii_compatible, rewrite_location, should_rewrite, RewriteContext};
use crate::route::{build_backend_url, parse_route, Destination, RouteError, RouteTarget};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
pub const IDLE_TIMEOUT: Duration = Duration::from_secs(60);

const X_FORWARDED_HOST: HeaderName = HeaderName::from_static("x-forwarded-host");
const X_FORWARDED_FOR: HeaderName = HeaderName::from_static("x-forwarded-for");

/// Why a request was not forwarded.
#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication required")]
    Unauthenticated,
    #[error(transparent)]
    BadRoute(#[from] RouteError),
    #[error("no such forward {0}")]
    NotFound(String),
    #[error("access denied ({0:?})")]
    AccessDenied(Reason),
    #[error("forward {0} is disabled")]
    Disabled(String),
    #[error("nothing listening on {0}")]
    NoListener(Destination),
    #[error("ident lookup failed: {0}")]
    LookupFailure(#[from] IdentError),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("websocket handshake failed: {0}")]
    HandshakeFailed(String),
    #[error("registry: {0}")]
    Registry(RegistryError),
}

impl GatewayError {
    pub fn status(&self) -> StatusCode {
        match self {
            GatewayError::Unauthenticated => StatusCode::UNAUTHORIZED,
            GatewayError::BadRoute(_) => StatusCode::BAD_REQUEST,
            GatewayError::NotFound(_) => StatusCode::NOT_FOUND,
            GatewayError::AccessDenied(_) => StatusCode::FORBIDDEN,
            GatewayError::Disabled(_) => StatusCode::SERVICE_UNAVAILABLE,
            GatewayError::NoListener(_)
            | GatewayError::LookupFailure(_)
            | GatewayError::BackendUnreachable(_)
            | GatewayError::HandshakeFailed(_) => StatusCode::BAD_GATEWAY,
            GatewayError::Registry(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn into_response(self) -> Response<Body> {
        let mut resp = status_response(self.status());
        if matches!(self, GatewayError::Unauthenticated) {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

impl From<AuthError> for GatewayError {
    fn from(_: AuthError) -> Self {
        GatewayError::Unauthenticated
    }
}

/// Response extension recording whether the body went through the rewriter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewriteApplied(pub bool);

/// A resolved and authorized backend.
struct Backend {
    dest: Destination,
    addr: SocketAddr,
    prefix: String,
    rest: String,
}

pub struct Gateway {
    users: UserTable,
    registry: Arc<RegistryStore>,
    resolver: Arc<IdentResolver>,
    control: ControlPlane,
    node_ips: HashMap<String, IpAddr>,
    ui_root: Option<PathBuf>,
    client: Client<HttpConnector, Body>,
}

impl Gateway {
    pub fn new(
        users: UserTable,
        registry: Arc<RegistryStore>,
        resolver: Arc<IdentResolver>,
        control: ControlPlane,
        node_ips: HashMap<String, IpAddr>,
        ui_root: Option<PathBuf>,
    ) -> Self {
        let mut connector = HttpConnector::new();
        connector.set_connect_timeout(Some(CONNECT_TIMEOUT));
        connector.set_nodelay(true);
        let client = Client::builder(TokioExecutor::new()).build(connector);
        Self {
            users,
            registry,
            resolver,
            control,
            node_ips,
            ui_root,
            client,
        }
    }

    pub fn resolver(&self) -> &IdentResolver {
        &self.resolver
    }

    pub async fn handle(&self, req: Request<Incoming>, peer: SocketAddr) -> Response<Body> {
        let body_req = req.map(|b| b.map_err(|e| Box::new(e) as BoxError).boxed());
        match self.dispatch(body_req, peer).await {
            Ok(resp) => resp,
            Err(e) => {
                debug!(error = %e, "request refused");
                e.into_response()
            }
        }
    }

    async fn dispatch(&self, req: Request<Body>, peer: SocketAddr) -> Result<Response<Body>, GatewayError> {
        let path = req.uri().path().to_string();
        if path == "/" {
            return Ok(redirect("/ui/"));
        }
        if path == "/ui" || path.starts_with("/ui/") {
            return Ok(self.serve_ui(&path).await);
        }

        let principal = self.users.authenticate_headers(req.headers())?;
        let route = parse_route(&path_and_query(&req))?;
        match route {
            RouteTarget::Passthrough { path } => {
                if path == "/api" || path.starts_with("/api/") {
                    Ok(self.control.handle(&principal, req).await)
                } else {
                    Ok(status_response(StatusCode::NOT_FOUND))
                }
            }
            route => {
                let backend = self.resolve(&principal, &route).await?;
                self.forward(req, backend, peer).await
            }
        }
    }

    /// Resolution and authorization; never touches the backend itself.
    async fn resolve(&self, principal: &Principal, route: &RouteTarget) -> Result<Backend, GatewayError> {
        let prefix = route.prefix().expect("forward routes have a prefix");
        let rest = route.rest().to_string();
        match route {
            RouteTarget::NamedForward { name, .. } => {
                let record = self.lookup_forward(name)?;
                if !record.permits_connect(principal) {
                    return Err(GatewayError::AccessDenied(Reason::NoMatch));
                }
                let dest = record
                    .destination
                    .clone()
                    .ok_or_else(|| GatewayError::Disabled(name.clone()))?;
                let listener = self.listener(&dest).await?;
                let decision = authorize_named(&record, &listener);
                if !decision.is_allowed() {
                    return Err(GatewayError::AccessDenied(decision.reason));
                }
                self.backend(dest, prefix, rest)
            }
            RouteTarget::DirectForward { node, port, .. } => {
                let dest = Destination {
                    node: node.clone(),
                    port: *port,
                };
                let listener = self.listener(&dest).await?;
                let decision = authorize_direct(principal, &listener);
                if !decision.is_allowed() {
                    return Err(GatewayError::AccessDenied(decision.reason));
                }
                self.backend(dest, prefix, rest)
            }
            RouteTarget::Passthrough { .. } => unreachable!("passthrough is served locally"),
        }
    }

    fn lookup_forward(&self, name: &str) -> Result<ForwardRecord, GatewayError> {
        self.registry.lookup(name).map_err(|e| match e {
            RegistryError::NotFound(n) => GatewayError::NotFound(n),
            other => GatewayError::Registry(other),
        })
    }

    async fn listener(&self, dest: &Destination) -> Result<ListenerInfo, GatewayError> {
        self.resolver
            .lookup(&dest.node, dest.port)
            .await?
            .ok_or_else(|| GatewayError::NoListener(dest.clone()))
    }

    fn backend(&self, dest: Destination, prefix: String, rest: String) -> Result<Backend, GatewayError> {
        let ip = self
            .node_ips
            .get(&dest.node)
            .ok_or_else(|| GatewayError::BackendUnreachable(format!("unknown node {}", dest.node)))?;
        Ok(Backend {
            addr: SocketAddr::new(*ip, dest.port),
            dest,
            prefix,
            rest,
        })
    }

    async fn forward(
        &self,
        mut req: Request<Body>,
        backend: Backend,
        peer: SocketAddr,
    ) -> Result<Response<Body>, GatewayError> {
        let upgrade = is_websocket_upgrade(&req);
        let client_upgrade = upgrade.then(|| hyper::upgrade::on(&mut req));

        let (parts, body) = req.into_parts();
        let uri: Uri = format!("http://{}{}", backend.addr, backend.rest)
            .parse()
            .map_err(|e| GatewayError::BackendUnreachable(format!("bad backend uri: {e}")))?;
        debug!(url = %build_backend_url(&backend.dest, &backend.rest), %uri, "forwarding");

        let mut headers = parts.headers;
        let original_host = headers.get(header::HOST).cloned();
        strip_hop_by_hop(&mut headers);
        strip_portal_credentials(&mut headers);
        let authority = backend.dest.to_string();
        headers.insert(
            header::HOST,
            HeaderValue::from_str(&authority).expect("validated authority"),
        );
        if let Some(host) = original_host {
            headers.insert(X_FORWARDED_HOST, host);
        }
        append_forwarded_for(&mut headers, peer.ip());
        if upgrade {
            headers.insert(header::CONNECTION, HeaderValue::from_static("upgrade"));
            headers.insert(header::UPGRADE, HeaderValue::from_static("websocket"));
        }

        let mut backend_req = Request::new(if upgrade {
            empty()
        } else {
            idle_timeout(body, IDLE_TIMEOUT)
        });
        *backend_req.method_mut() = parts.method;
        *backend_req.uri_mut() = uri;
        *backend_req.headers_mut() = headers;

        let resp = tokio::time::timeout(IDLE_TIMEOUT, self.client.request(backend_req))
            .await
            .map_err(|_| GatewayError::BackendUnreachable("response timed out".into()))?
            .map_err(|e| GatewayError::BackendUnreachable(e.to_string()))?;

        let ctx = RewriteContext::new(backend.prefix, Some(authority))
            .expect("forward prefixes are valid rewrite prefixes");

        match client_upgrade {
            Some(client_upgrade) => relay_upgrade(client_upgrade, resp),
            None => Ok(finish_response(resp, &ctx)),
        }
    }

    async fn serve_ui(&self, path: &str) -> Response<Body> {
        let Some(root) = &self.ui_root else {
            return builtin_ui(path);
        };
        let rel = path.trim_start_matches("/ui").trim_start_matches('/');
        let rel = if rel.is_empty() || rel.ends_with('/') {
            format!("{rel}index.html")
        } else {
            rel.to_string()
        };
        let rel = Path::new(&rel);
        if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return status_response(StatusCode::NOT_FOUND);
        }
        match tokio::fs::read(root.join(rel)).await {
            Ok(bytes) => {
                let mut resp = Response::new(full(bytes));
                resp.headers_mut().insert(
                    header::CONTENT_TYPE,
                    HeaderValue::from_static(content_type_for(rel)),
                );
                resp
            }
            Err(_) => status_response(StatusCode::NOT_FOUND),
        }
    }
}

/// Finishes the WebSocket handshake on both sides and relays bytes.
fn relay_upgrade(
    client_upgrade: hyper::upgrade::OnUpgrade,
    mut resp: Response<Incoming>,
) -> Result<Response<Body>, GatewayError> {
    if resp.status() != StatusCode::SWITCHING_PROTOCOLS {
        return Err(GatewayError::HandshakeFailed(format!(
            "backend answered {}",
            resp.status()
        )));
    }
    let backend_upgrade = hyper::upgrade::on(&mut resp);
    let mut out = Response::new(empty());
    *out.status_mut() = StatusCode::SWITCHING_PROTOCOLS;
    let mut headers = resp.headers().clone();
    strip_hop_by_hop(&mut headers);
    headers.insert(header::CONNECTION, HeaderValue::from_static("upgrade"));
    headers.insert(header::UPGRADE, HeaderValue::from_static("websocket"));
    *out.headers_mut() = headers;

    tokio::spawn(async move {
        let (client, backend) = match tokio::try_join!(client_upgrade, backend_upgrade) {
            Ok(pair) => pair,
            Err(e) => {
                debug!(error = %e, "upgrade failed");
                return;
            }
        };
        let mut client = TokioIo::new(client);
        let mut backend = TokioIo::new(backend);
        if let Err(e) = tokio::io::copy_bidirectional(&mut client, &mut backend).await {
            debug!(error = %e, "websocket relay ended");
        }
    });
    Ok(out)
}

fn finish_response(resp: Response<Incoming>, ctx: &RewriteContext) -> Response<Body> {
    let (mut parts, body) = resp.into_parts();
    strip_hop_by_hop(&mut parts.headers);

    if let Some(loc) = parts.headers.get(header::LOCATION).and_then(|v| v.to_str().ok()) {
        let rewritten = rewrite_location(loc, ctx);
        if let Ok(v) = HeaderValue::from_str(&rewritten) {
            parts.headers.insert(header::LOCATION, v);
        }
    }

    let body = idle_timeout(
        body.map_err(|e| Box::new(e) as BoxError).boxed(),
        IDLE_TIMEOUT,
    );
    let rewrite = wants_rewrite(&parts.headers);
    let body = if rewrite {
        parts.headers.remove(header::CONTENT_LENGTH);
        rewrite_body(body, ctx.clone())
    } else {
        body
    };
    parts.extensions.clear();
    parts.extensions.insert(RewriteApplied(rewrite));
    Response::from_parts(parts, body)
}

fn wants_rewrite(headers: &HeaderMap) -> bool {
    let Some(ct) = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()) else {
        return false;
    };
    if !should_rewrite(ct) || !is_ascii_compatible(ct) {
        return false;
    }
    match headers.get(header::CONTENT_ENCODING) {
        None => true,
        Some(enc) if enc.as_bytes().eq_ignore_ascii_case(b"identity") => true,
        Some(enc) => {
            warn!(encoding = ?enc, "not rewriting encoded HTML");
            false
        }
    }
}

const HOP_BY_HOP: [HeaderName; 6] = [
    header::CONNECTION,
    HeaderName::from_static("keep-alive"),
    header::TE,
    header::TRAILER,
    header::TRANSFER_ENCODING,
    header::UPGRADE,
];

/// Removes hop-by-hop headers, including any named by `Connection`.
pub fn strip_hop_by_hop(headers: &mut HeaderMap) {
    let named: Vec<HeaderName> = headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|t| HeaderName::from_bytes(t.trim().as_bytes()).ok())
        .collect();
    for name in named.iter().chain(HOP_BY_HOP.iter()) {
        headers.remove(name);
    }
    let proxy: Vec<HeaderName> = headers
        .keys()
        .filter(|k| k.as_str().starts_with("proxy-"))
        .cloned()
        .collect();
    for name in proxy {
        headers.remove(name);
    }
}

/// The backend must never see the caller's portal credential.
fn strip_portal_credentials(headers: &mut HeaderMap) {
    headers.remove(header::AUTHORIZATION);
    if cookie_value(headers, TOKEN_COOKIE).is_none() {
        return;
    }
    let kept: Vec<String> = headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .map(str::trim)
        .filter(|kv| !kv.is_empty() && kv.split('=').next() != Some(TOKEN_COOKIE))
        .map(str::to_string)
        .collect();
    headers.remove(header::COOKIE);
    if !kept.is_empty() {
        if let Ok(v) = HeaderValue::from_str(&kept.join("; ")) {
            headers.insert(header::COOKIE, v);
        }
    }
}

fn append_forwarded_for(headers: &mut HeaderMap, ip: IpAddr) {
    let value = match headers.get(&X_FORWARDED_FOR).and_then(|v| v.to_str().ok()) {
        Some(prev) => format!("{prev}, {ip}"),
        None => ip.to_string(),
    };
    if let Ok(v) = HeaderValue::from_str(&value) {
        headers.insert(X_FORWARDED_FOR, v);
    }
}

fn redirect(location: &'static str) -> Response<Body> {
    let mut resp = Response::new(empty());
    *resp.status_mut() = StatusCode::FOUND;
    resp.headers_mut()
        .insert(header::LOCATION, HeaderValue::from_static(location));
    resp
}

fn builtin_ui(path: &str) -> Response<Body> {
    if path != "/ui/" && path != "/ui" {
        return status_response(StatusCode::NOT_FOUND);
    }
    let mut resp = Response::new(full(Bytes::from_static(
        b"<!DOCTYPE html><html><head><title>Portal</title></head><body>\
          <p>The workspace UI is not installed. The API is served under /api/.</p>\
          </body></html>\n",
    )));
    resp.headers_mut().insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("text/html; charset=utf-8"),
    );
    resp
}

fn content_type_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        "woff" => "font/woff",
        _ => "application/octet-stream",
    }
}
