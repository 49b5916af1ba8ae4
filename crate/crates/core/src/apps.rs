//! Demo web applications launched as scheduler jobs.
//!
//! * `echo-http` answers every request with its method, target and a digest
//!   of the body, as `text/plain`.
//! * `echo-ws` echoes WebSocket messages; plain GETs get a short HTML page.
//! * `token-notebook` imitates a notebook server: an HTML workspace with
//!   root-relative links plus a table of static assets. Everything outside
//!   `/static/` needs the job's token, as a `?token=` query parameter or the
//!   cookie the server sets after the first authenticated request.
//! * `static-site` serves fixed HTML and binary fixtures.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use bytes::Bytes;
use futures_util::{SinkExt, StreamExt};
use http::{header, HeaderValue, Method, Request, Response, StatusCode};
use http_body_util::BodyExt;
use hyper::body::Incoming;
use hyper_util::rt::TokioIo;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::handshake::derive_accept_key;
use tokio_tungstenite::tungstenite::protocol::Role;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;
use tracing::debug;

use crate::http::{full, path_and_query, serve, status_response, Body};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AppKind {
    EchoHttp,
    EchoWs,
    TokenNotebook,
    StaticSite,
}

impl AppKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AppKind::EchoHttp => "echo-http",
            AppKind::EchoWs => "echo-ws",
            AppKind::TokenNotebook => "token-notebook",
            AppKind::StaticSite => "static-site",
        }
    }
}

impl fmt::Display for AppKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AppKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo-http" => Ok(AppKind::EchoHttp),
            "echo-ws" => Ok(AppKind::EchoWs),
            "token-notebook" => Ok(AppKind::TokenNotebook),
            "static-site" => Ok(AppKind::StaticSite),
            other => Err(format!("unknown app kind {other:?}")),
        }
    }
}

/// A static file served by the notebook demo.
#[derive(Debug, Clone, Copy)]
pub struct Asset {
    pub path: &'static str,
    pub content_type: &'static str,
    pub size: usize,
}

/// Static assets of the notebook demo. The shipped benchmark manifest
/// requests the workspace page plus each of these.
pub const NOTEBOOK_ASSETS: &[Asset] = &[
    Asset { path: "/static/style/style.min.css", content_type: "text/css", size: 120_000 },
    Asset { path: "/static/components/jquery-ui/themes/smoothness/jquery-ui.min.css", content_type: "text/css", size: 30_000 },
    Asset { path: "/static/components/jquery-typeahead/dist/jquery.typeahead.min.css", content_type: "text/css", size: 18_000 },
    Asset { path: "/static/custom/custom.css", content_type: "text/css", size: 300 },
    Asset { path: "/static/components/es6-promise/promise.min.js", content_type: "application/javascript", size: 6_500 },
    Asset { path: "/static/components/preact/index.js", content_type: "application/javascript", size: 9_000 },
    Asset { path: "/static/components/proptypes/index.js", content_type: "application/javascript", size: 4_000 },
    Asset { path: "/static/components/preact-compat/index.js", content_type: "application/javascript", size: 12_000 },
    Asset { path: "/static/components/requirejs/require.js", content_type: "application/javascript", size: 85_000 },
    Asset { path: "/static/tree/js/main.min.js", content_type: "application/javascript", size: 400_000 },
    Asset { path: "/static/components/jquery/jquery.min.js", content_type: "application/javascript", size: 87_000 },
    Asset { path: "/static/components/bootstrap/js/bootstrap.min.js", content_type: "application/javascript", size: 37_000 },
    Asset { path: "/static/components/jquery-ui/ui/minified/jquery-ui.min.js", content_type: "application/javascript", size: 240_000 },
    Asset { path: "/static/components/moment/moment.js", content_type: "application/javascript", size: 130_000 },
    Asset { path: "/static/base/js/namespace.js", content_type: "application/javascript", size: 3_000 },
    Asset { path: "/static/base/js/utils.js", content_type: "application/javascript", size: 35_000 },
    Asset { path: "/static/base/js/events.js", content_type: "application/javascript", size: 1_800 },
    Asset { path: "/static/base/js/dialog.js", content_type: "application/javascript", size: 14_000 },
    Asset { path: "/static/custom/custom.js", content_type: "application/javascript", size: 2_500 },
    Asset { path: "/static/services/config.js", content_type: "application/javascript", size: 4_200 },
    Asset { path: "/static/tree/js/notebooklist.js", content_type: "application/javascript", size: 60_000 },
    Asset { path: "/static/tree/js/sessionlist.js", content_type: "application/javascript", size: 5_000 },
    Asset { path: "/static/tree/js/kernellist.js", content_type: "application/javascript", size: 3_500 },
    Asset { path: "/static/templates/tree_header.html", content_type: "text/html; charset=utf-8", size: 6_000 },
    Asset { path: "/static/templates/notebook_list.html", content_type: "text/html; charset=utf-8", size: 9_000 },
    Asset { path: "/static/components/font-awesome/fonts/fontawesome-webfont.woff", content_type: "font/woff", size: 98_000 },
    Asset { path: "/static/components/bootstrap/fonts/glyphicons-halflings-regular.woff", content_type: "font/woff", size: 23_000 },
    Asset { path: "/static/base/images/logo.png", content_type: "image/png", size: 5_900 },
    Asset { path: "/static/base/images/favicon.ico", content_type: "image/x-icon", size: 32_000 },
    Asset { path: "/static/api/contents.json", content_type: "application/json", size: 1_200 },
];

static ASSET_BODIES: OnceLock<HashMap<&'static str, (Asset, Bytes)>> = OnceLock::new();

fn asset_bodies() -> &'static HashMap<&'static str, (Asset, Bytes)> {
    ASSET_BODIES.get_or_init(|| {
        NOTEBOOK_ASSETS
            .iter()
            .map(|a| (a.path, (*a, Bytes::from(asset_content(a)))))
            .collect()
    })
}

/// Deterministic content for an asset of the given type and size.
fn asset_content(asset: &Asset) -> Vec<u8> {
    let mut out = Vec::with_capacity(asset.size);
    if asset.content_type.starts_with("text/html") {
        let mut i = 0;
        while out.len() < asset.size {
            out.extend_from_slice(
                format!(
                    "<div class=\"row\"><a href=\"/tree/folder{i}\">folder {i}</a> \
                     <img src=\"/static/base/images/logo.png\"> <a href=\"rel/{i}\">rel</a></div>\n"
                )
                .as_bytes(),
            );
            i += 1;
        }
    } else if asset.content_type.starts_with("text/")
        || asset.content_type.ends_with("javascript")
        || asset.content_type.ends_with("json")
    {
        let line = format!("/* {} */ var x = \"/static/unused\"; // filler\n", asset.path);
        while out.len() < asset.size {
            out.extend_from_slice(line.as_bytes());
        }
    } else {
        out.resize(asset.size, 0);
        fill_pseudo_random(&mut out, fnv1a(asset.path.as_bytes()));
    }
    out.truncate(asset.size);
    out
}

fn fnv1a(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Fills `buf` from an xorshift64 stream; stable across platforms.
pub fn fill_pseudo_random(buf: &mut [u8], seed: u64) {
    let mut state = seed | 1;
    for chunk in buf.chunks_mut(8) {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let bytes = state.to_le_bytes();
        chunk.copy_from_slice(&bytes[..chunk.len()]);
    }
}

/// The workspace page of the notebook demo.
pub fn notebook_page() -> String {
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Home</title>\n\
         <link rel=\"icon\" href=\"/static/base/images/favicon.ico\">\n",
    );
    for a in NOTEBOOK_ASSETS {
        if a.content_type == "text/css" {
            html.push_str(&format!("<link rel=\"stylesheet\" href=\"{}\" type=\"text/css\"/>\n", a.path));
        }
    }
    html.push_str("</head>\n<body class=\"notebook_list\" style=\"background-image: url('/static/base/images/logo.png')\">\n");
    html.push_str(
        "<div id=\"header\"><a href=\"/tree\" title=\"dashboard\"><img src='/static/base/images/logo.png' alt=\"logo\"/></a></div>\n\
         <form action=\"/api/contents\" method=\"post\"><input type=\"submit\" value=\"New\"></form>\n\
         <a href=\"/redirect\">lab</a> <a href=\"notebooks/Untitled.ipynb\">relative</a> \
         <a href=\"https://jupyter.org/\">external</a> <a href=\"#top\">top</a>\n",
    );
    for a in NOTEBOOK_ASSETS {
        if a.content_type == "application/javascript" {
            html.push_str(&format!("<script src=\"{}\" type=\"text/javascript\"></script>\n", a.path));
        }
    }
    html.push_str("<script>var base_url = \"/\"; var api = '/api/contents';</script>\n</body>\n</html>\n");
    html
}

/// Serving tasks of a running job; dropping or stopping aborts them.
#[derive(Debug)]
pub struct RunningApp {
    tasks: Vec<JoinHandle<()>>,
    addrs: Vec<SocketAddr>,
}

impl RunningApp {
    pub fn addrs(&self) -> &[SocketAddr] {
        &self.addrs
    }

    pub fn stop(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

impl Drop for RunningApp {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `ports` on `ip` and serves `kind` on each. Must run inside a Tokio
/// runtime. Binding is synchronous so failures surface immediately.
pub fn spawn_app(
    kind: AppKind,
    ip: IpAddr,
    ports: &[u16],
    token: Option<String>,
) -> io::Result<RunningApp> {
    let mut listeners = Vec::with_capacity(ports.len());
    for &port in ports {
        let std_listener = std::net::TcpListener::bind((ip, port))?;
        std_listener.set_nonblocking(true)?;
        listeners.push(std_listener);
    }
    let app = Arc::new(DemoApp { kind, token });
    let mut running = RunningApp {
        tasks: Vec::new(),
        addrs: Vec::new(),
    };
    for std_listener in listeners {
        running.addrs.push(std_listener.local_addr()?);
        let listener = TcpListener::from_std(std_listener)?;
        let app = app.clone();
        running.tasks.push(tokio::spawn(serve(listener, move |req, _peer| {
            let app = app.clone();
            async move { app.handle(req).await }
        })));
    }
    Ok(running)
}

struct DemoApp {
    kind: AppKind,
    token: Option<String>,
}

impl DemoApp {
    async fn handle(&self, req: Request<Incoming>) -> Response<Body> {
        match self.kind {
            AppKind::EchoHttp => echo_http(req).await,
            AppKind::EchoWs => echo_ws(req),
            AppKind::TokenNotebook => self.notebook(req),
            AppKind::StaticSite => static_site(&req),
        }
    }

    fn notebook(&self, req: Request<Incoming>) -> Response<Body> {
        let path = req.uri().path();
        if let Some((asset, body)) = asset_bodies().get(path) {
            return typed(StatusCode::OK, asset.content_type, body.clone());
        }
        let expected = self.token.as_deref().unwrap_or_default();
        let presented = query_param(req.uri().query().unwrap_or(""), "token")
            .or_else(|| cookie(&req, "nbtoken"));
        if expected.is_empty() || presented.as_deref() != Some(expected) {
            return status_response(StatusCode::UNAUTHORIZED);
        }
        let mut resp = match path {
            "/" | "/tree" => typed(StatusCode::OK, "text/html; charset=utf-8", notebook_page()),
            "/redirect" => {
                // Absolute redirect built from the Host the backend was reached as.
                let host = req
                    .headers()
                    .get(header::HOST)
                    .and_then(|h| h.to_str().ok())
                    .unwrap_or("localhost")
                    .to_string();
                let mut r = status_response(StatusCode::FOUND);
                if let Ok(v) = HeaderValue::from_str(&format!("http://{host}/tree")) {
                    r.headers_mut().insert(header::LOCATION, v);
                }
                r
            }
            "/login" => {
                let mut r = status_response(StatusCode::FOUND);
                r.headers_mut()
                    .insert(header::LOCATION, HeaderValue::from_static("/tree"));
                r
            }
            "/api/contents" => typed(
                StatusCode::OK,
                "application/json",
                r#"{"name":"","path":"","type":"directory","content":[]}"#,
            ),
            _ => status_response(StatusCode::NOT_FOUND),
        };
        if let Ok(v) = HeaderValue::from_str(&format!("nbtoken={expected}; Path=/; HttpOnly")) {
            resp.headers_mut().insert(header::SET_COOKIE, v);
        }
        resp
    }
}

fn typed(status: StatusCode, content_type: &'static str, body: impl Into<Bytes>) -> Response<Body> {
    let body: Bytes = body.into();
    let mut resp = Response::new(full(body.clone()));
    *resp.status_mut() = status;
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    resp.headers_mut()
        .insert(header::CONTENT_LENGTH, HeaderValue::from(body.len()));
    resp
}

fn query_param(query: &str, key: &str) -> Option<String> {
    query.split('&').find_map(|pair| {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        (k == key).then(|| v.to_string())
    })
}

fn cookie<B>(req: &Request<B>, name: &str) -> Option<String> {
    req.headers()
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .find_map(|kv| {
            let (k, v) = kv.trim().split_once('=')?;
            (k == name).then(|| v.to_string())
        })
}

async fn echo_http(req: Request<Incoming>) -> Response<Body> {
    let method = req.method().clone();
    let target = path_and_query(&req);
    let body = match req.into_body().collect().await {
        Ok(b) => b.to_bytes(),
        Err(_) => return status_response(StatusCode::BAD_REQUEST),
    };
    let digest = hex::encode(Sha256::digest(&body));
    let text = format!(
        "{method} {target}\nbody-sha256: {digest}\nbody-length: {}\n",
        body.len()
    );
    typed(StatusCode::OK, "text/plain; charset=utf-8", text)
}

/// True for a GET carrying a version-13 WebSocket handshake.
pub fn is_websocket_upgrade<B>(req: &Request<B>) -> bool {
    let has_token = |name: header::HeaderName, token: &str| {
        req.headers().get_all(name).iter().any(|v| {
            v.to_str()
                .map(|s| s.split(',').any(|t| t.trim().eq_ignore_ascii_case(token)))
                .unwrap_or(false)
        })
    };
    req.method() == Method::GET
        && has_token(header::CONNECTION, "upgrade")
        && has_token(header::UPGRADE, "websocket")
        && req.headers().contains_key(header::SEC_WEBSOCKET_KEY)
        && req
            .headers()
            .get(header::SEC_WEBSOCKET_VERSION)
            .map(|v| v == "13")
            .unwrap_or(false)
}

fn echo_ws(mut req: Request<Incoming>) -> Response<Body> {
    if !is_websocket_upgrade(&req) {
        return typed(
            StatusCode::OK,
            "text/html; charset=utf-8",
            "<!DOCTYPE html><html><body><p>WebSocket echo at <a href=\"/ws\">/ws</a></p></body></html>\n",
        );
    }
    let key = req.headers()[header::SEC_WEBSOCKET_KEY].as_bytes().to_vec();
    let upgrade = hyper::upgrade::on(&mut req);
    tokio::spawn(async move {
        let upgraded = match upgrade.await {
            Ok(u) => u,
            Err(e) => {
                debug!(error = %e, "echo-ws upgrade failed");
                return;
            }
        };
        let mut ws = WebSocketStream::from_raw_socket(TokioIo::new(upgraded), Role::Server, None).await;
        while let Some(Ok(msg)) = ws.next().await {
            match msg {
                Message::Text(_) | Message::Binary(_) => {
                    if ws.send(msg).await.is_err() {
                        break;
                    }
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
        let _ = ws.close(None).await;
    });
    let mut resp = Response::new(crate::http::empty());
    *resp.status_mut() = StatusCode::SWITCHING_PROTOCOLS;
    let h = resp.headers_mut();
    h.insert(header::CONNECTION, HeaderValue::from_static("Upgrade"));
    h.insert(header::UPGRADE, HeaderValue::from_static("websocket"));
    h.insert(
        header::SEC_WEBSOCKET_ACCEPT,
        HeaderValue::from_str(&derive_accept_key(&key)).expect("base64 is a valid header"),
    );
    resp
}

const STATIC_INDEX: &str = "<!DOCTYPE html>\n<html><head><title>Fixtures</title>\
<link rel=\"stylesheet\" href=\"/style.css\"></head>\n<body>\
<img src=\"/logo.png\"><a href=\"/data.bin\">data</a> <a href=\"about.html\">about</a>\
</body></html>\n";

static STATIC_DATA: OnceLock<(Bytes, Bytes)> = OnceLock::new();

fn static_site(req: &Request<Incoming>) -> Response<Body> {
    let (data, logo) = STATIC_DATA.get_or_init(|| {
        let mut data = vec![0u8; 1 << 20];
        fill_pseudo_random(&mut data, 0x5eed);
        let mut logo = vec![0u8; 4096];
        fill_pseudo_random(&mut logo, 0x1060);
        (Bytes::from(data), Bytes::from(logo))
    });
    match req.uri().path() {
        "/" | "/index.html" => typed(StatusCode::OK, "text/html; charset=utf-8", STATIC_INDEX),
        "/style.css" => typed(StatusCode::OK, "text/css", "body { background: url(/logo.png); }\n"),
        "/data.bin" => typed(StatusCode::OK, "application/octet-stream", data.clone()),
        "/logo.png" => typed(StatusCode::OK, "image/png", logo.clone()),
        _ => status_response(StatusCode::NOT_FOUND),
    }
}
