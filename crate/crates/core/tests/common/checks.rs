//! One function per acceptance criterion. Each returns an [`Outcome`]
//! instead of panicking so the acceptance target can report every line.

use std::collections::{HashMap, HashSet};
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures_util::{SinkExt, StreamExt};
use http::{header, HeaderMap, Method, Response, StatusCode};
use portal_core::apps::{notebook_page, AppKind};
use portal_core::bench::{run_benchmark, LatencyReport, RequestManifest, Target};
use portal_core::firewall::{authorize_direct, authorize_named, ListenerInfo, Reason, Verdict};
use portal_core::http::{full, serve, Body};
use portal_core::ident::IdentAgent;
use portal_core::principal::Principal;
use portal_core::registry::{check_connect_permission, ForwardRecord, Mode, RegistryError, RegistryStore};
use portal_core::rewrite::{rewrite_html, RewriteContext};
use portal_core::scheduler::{AppHandle, Launcher, Node, PortRange, Scheduler, SchedulerError};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;

use super::*;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn pass(detail: impl Into<String>) -> Self {
        Self {
            passed: true,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self {
            passed: false,
            detail: detail.into(),
        }
    }

    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    #[track_caller]
    pub fn assert(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}

// ---------------------------------------------------------------------------
// Firewall oracle

/// Same user as the listener, or a member of the listener's primary group.
fn direct_oracle(uid: u32, primary: u32, supplementary: &[u32], l_uid: u32, l_gid: u32) -> bool {
    uid == l_uid || primary == l_gid || supplementary.contains(&l_gid)
}

/// Listener owned by the forward's owner, or by the forward's group.
fn named_oracle(f_uid: u32, f_gid: u32, l_uid: u32, l_gid: u32) -> bool {
    l_uid == f_uid || l_gid == f_gid
}

pub fn firewall_oracle() -> Outcome {
    let start = Instant::now();
    let ids = 1u32..=4;
    let mut cases = 0usize;
    let mut mismatches = Vec::new();

    for uid in ids.clone() {
        for primary in ids.clone() {
            for mask in 0u8..16 {
                let supplementary: Vec<u32> = (1..=4).filter(|g| mask & (1 << (g - 1)) != 0).collect();
                let p = Principal::new(uid, primary, supplementary.iter().copied(), "p");
                for l_uid in ids.clone() {
                    for l_gid in ids.clone() {
                        let listener = ListenerInfo {
                            node: "n".into(),
                            port: 1,
                            owner_uid: l_uid,
                            owner_primary_gid: l_gid,
                        };
                        let d = authorize_direct(&p, &listener);
                        let want = direct_oracle(uid, primary, &supplementary, l_uid, l_gid);
                        let reason_ok = match (want, d.reason) {
                            (true, Reason::UidMatch) => uid == l_uid,
                            (true, Reason::GroupMatch) => uid != l_uid,
                            (false, Reason::NoMatch) => true,
                            _ => false,
                        };
                        if d.is_allowed() != want || !reason_ok {
                            mismatches.push(format!("direct {p:?} {listener:?} -> {d:?}"));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }

    for f_uid in ids.clone() {
        for f_gid in ids.clone() {
            for mode in [0o700, 0o750, 0o000] {
                let record = ForwardRecord {
                    name: "f".into(),
                    owner_uid: f_uid,
                    group_gid: f_gid,
                    mode: Mode::from_bits(mode).unwrap(),
                    destination: None,
                    created_at: 0,
                };
                for l_uid in ids.clone() {
                    for l_gid in ids.clone() {
                        let listener = ListenerInfo {
                            node: "n".into(),
                            port: 1,
                            owner_uid: l_uid,
                            owner_primary_gid: l_gid,
                        };
                        let d = authorize_named(&record, &listener);
                        let want = named_oracle(f_uid, f_gid, l_uid, l_gid);
                        let reason_ok = match (want, d.reason) {
                            (true, Reason::ForwardOwnerMatch) => l_uid == f_uid,
                            (true, Reason::ForwardGroupMatch) => l_uid != f_uid,
                            (false, Reason::CrossConnection) => d.verdict == Verdict::Deny,
                            _ => false,
                        };
                        if d.is_allowed() != want || !reason_ok {
                            mismatches.push(format!("named {record:?} {listener:?} -> {d:?}"));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }

    let elapsed = start.elapsed();
    Outcome::check(
        mismatches.is_empty() && elapsed < Duration::from_secs(5),
        format!(
            "{cases} cases, {} mismatches, {:.1} ms{}",
            mismatches.len(),
            elapsed.as_secs_f64() * 1000.0,
            mismatches.first().map(|m| format!("; first: {m}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Permission oracle

#[derive(Debug, Clone, Copy)]
pub enum Class {
    Owner,
    GroupMember,
    Other,
    OwnerAndGroupMember,
}

/// Unix semantics read off the octal digits: the first class the user
/// falls in decides, by its execute bit.
fn unix_exec(mode: u16, is_owner: bool, in_group: bool) -> bool {
    let digits = format!("{mode:03o}");
    let d: Vec<u32> = digits.chars().map(|c| c.to_digit(8).unwrap()).collect();
    let digit = if is_owner {
        d[0]
    } else if in_group {
        d[1]
    } else {
        d[2]
    };
    digit % 2 == 1
}

pub fn permission_oracle() -> Outcome {
    let owner_uid = 500;
    let group = 600;
    let classes = [
        (Class::Owner, Principal::new(owner_uid, 501, [], "owner"), true, false),
        (Class::GroupMember, Principal::new(502, 503, [group], "member"), false, true),
        (Class::Other, Principal::new(504, 505, [], "other"), false, false),
        (
            Class::OwnerAndGroupMember,
            Principal::new(owner_uid, group, [], "owner-in-group"),
            true,
            true,
        ),
    ];
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for bits in 0u16..512 {
        let record = ForwardRecord {
            name: "f".into(),
            owner_uid,
            group_gid: group,
            mode: Mode::from_bits(bits).unwrap(),
            destination: None,
            created_at: 0,
        };
        for (class, p, is_owner, in_group) in &classes {
            cases += 1;
            if check_connect_permission(&record, p) != unix_exec(bits, *is_owner, *in_group) {
                mismatches.push(format!("{bits:03o} {class:?}"));
            }
        }
    }
    Outcome::check(
        mismatches.is_empty() && cases == 2048,
        format!("{cases} cases, {} mismatches {:?}", mismatches.len(), &mismatches[..mismatches.len().min(5)]),
    )
}

// ---------------------------------------------------------------------------
// Reservation linearizability

pub fn reservation_linearizability(claimers: usize, trials: usize) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(RegistryStore::open(dir.path()).unwrap());
    let principals: Vec<Principal> = (0..claimers as u32)
        .map(|i| Principal::new(1000 + i, 1000 + i, [], format!("u{i}")))
        .collect();

    for trial in 0..trials {
        let name = format!("name-{trial}");
        let barrier = Barrier::new(claimers);
        let results: Vec<Result<ForwardRecord, RegistryError>> = std::thread::scope(|s| {
            let handles: Vec<_> = principals
                .iter()
                .map(|p| {
                    let (store, barrier, name) = (&store, &barrier, &name);
                    s.spawn(move || {
                        barrier.wait();
                        store.claim_name(name, p)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });

        let winners: Vec<&ForwardRecord> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let taken = results
            .iter()
            .filter(|r| matches!(r, Err(RegistryError::NameTaken(_))))
            .count();
        if winners.len() != 1 || taken != claimers - 1 {
            return Outcome::fail(format!(
                "trial {trial}: {} successes, {taken} NameTaken",
                winners.len()
            ));
        }
        let owner_uid = winners[0].owner_uid;
        let owner = principals.iter().find(|p| p.uid() == owner_uid).unwrap();
        if store.lookup(&name).ok().map(|r| r.owner_uid) != Some(owner_uid) {
            return Outcome::fail(format!("trial {trial}: lookup disagrees with the winner"));
        }
        let other = principals.iter().find(|p| p.uid() != owner_uid).unwrap();
        if !matches!(store.release_name(&name, other), Err(RegistryError::NotOwner(_))) {
            return Outcome::fail(format!("trial {trial}: non-owner release was not refused"));
        }
        if let Err(e) = store.release_name(&name, owner) {
            return Outcome::fail(format!("trial {trial}: owner release failed: {e}"));
        }
        match store.claim_name(&name, other) {
            Ok(r) if r.owner_uid == other.uid() => {}
            other_result => {
                return Outcome::fail(format!("trial {trial}: reclaim after release gave {other_result:?}"))
            }
        }
    }

    let reopened = RegistryStore::open(dir.path()).unwrap();
    Outcome::check(
        reopened.list() == store.list(),
        format!("{trials} trials x {claimers} claimers: exactly one winner each; reclaim after release ok; on-disk state matches"),
    )
}

// ---------------------------------------------------------------------------
// Cross-connection prevention (end to end)

pub async fn cross_connection() -> Outcome {
    let t = TestPortal::start().await;
    let (_, bob_port, _) = t.launch(BOB, "node-1", "echo-http").await;
    let (_, alice_port, _) = t.launch(ALICE, "node-1", "echo-http").await;
    let (s, _) = t.api(Method::POST, "/api/forwards", ALICE, Some(json!({"name": "shared"}))).await;
    if s != StatusCode::CREATED {
        return Outcome::fail(format!("claim returned {s}"));
    }

    t.api(Method::PUT, "/api/forwards/shared", ALICE, Some(json!({"node": "node-1", "port": bob_port})))
        .await;
    let to_bob = t.get("/fw/shared/", Some(ALICE)).await.status;
    t.api(Method::PUT, "/api/forwards/shared", ALICE, Some(json!({"node": "node-1", "port": alice_port})))
        .await;
    let to_alice = t.get("/fw/shared/", Some(ALICE)).await.status;

    Outcome::check(
        to_bob == StatusCode::FORBIDDEN && to_alice == StatusCode::OK,
        format!("alice's forward -> bob's listener: {to_bob}; -> alice's listener: {to_alice}"),
    )
}

// ---------------------------------------------------------------------------
// Proxy transparency

const FIXED_DATE: &str = "Thu, 01 Jan 2026 00:00:00 GMT";

/// Serves `/blob/<i>` with fixed headers, including a constant Date.
async fn blob_backend(ip: IpAddr, blobs: Arc<Vec<Bytes>>) -> u16 {
    let listener = TcpListener::bind(SocketAddr::new(ip, 0)).await.unwrap();
    let port = listener.local_addr().unwrap().port();
    tokio::spawn(serve(listener, move |req, _| {
        let blobs = blobs.clone();
        async move {
            let idx: Option<usize> = req
                .uri()
                .path()
                .strip_prefix("/blob/")
                .and_then(|i| i.parse().ok());
            let Some(blob) = idx.and_then(|i| blobs.get(i)) else {
                return Response::builder()
                    .status(StatusCode::NOT_FOUND)
                    .header(header::DATE, FIXED_DATE)
                    .body(full("missing"))
                    .unwrap();
            };
            let i = idx.unwrap();
            let status = [StatusCode::OK, StatusCode::OK, StatusCode::NON_AUTHORITATIVE_INFORMATION, StatusCode::NOT_FOUND][i % 4];
            Response::builder()
                .status(status)
                .header(header::DATE, FIXED_DATE)
                .header(header::CONTENT_TYPE, "application/octet-stream")
                .header(header::ETAG, format!("\"blob-{i}\""))
                .header(header::CACHE_CONTROL, "no-store")
                .header("x-blob-index", i.to_string())
                .header(header::SET_COOKIE, format!("seen={i}; Path=/"))
                .body::<Body>(full(blob.clone()))
                .unwrap()
        }
    }));
    port
}

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

fn end_to_end_headers(h: &HeaderMap) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = h
        .iter()
        .filter(|(k, _)| !HOP_BY_HOP.contains(&k.as_str()))
        .map(|(k, v)| (k.as_str().to_string(), v.as_bytes().to_vec()))
        .collect();
    v.sort();
    v
}

pub fn random_payloads(n: usize, seed: u64) -> Vec<Bytes> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = match i {
                0 => 1,
                1 => 1 << 20,
                _ => {
                    let exp: f64 = rng.gen_range(0.0..20.0);
                    (2f64.powf(exp) as usize).clamp(1, 1 << 20)
                }
            };
            let mut buf = vec![0u8; len];
            rng.fill(&mut buf[..]);
            Bytes::from(buf)
        })
        .collect()
}

pub async fn proxy_transparency(count: usize) -> Outcome {
    let t = TestPortal::start().await;
    let blobs = Arc::new(random_payloads(count, 0x7a11));
    let port = blob_backend(t.node_ip(1), blobs.clone()).await;
    t.portal.agent("node-1").unwrap().register(port, 100, 100);

    let mut failures = Vec::new();
    for (i, blob) in blobs.iter().enumerate() {
        let direct = fetch(&format!("http://{}:{port}/blob/{i}", t.node_ip(1)), None).await;
        let proxied = t.get(&format!("/fw2/node-1:{port}/blob/{i}"), Some(ALICE)).await;
        if direct.body != *blob {
            failures.push(format!("#{i}: direct fetch itself differs"));
        }
        if proxied.status != direct.status {
            failures.push(format!("#{i}: status {} vs {}", proxied.status, direct.status));
        }
        if proxied.body != direct.body {
            failures.push(format!("#{i}: body differs ({} vs {} bytes)", proxied.body.len(), direct.body.len()));
        }
        if end_to_end_headers(&proxied.headers) != end_to_end_headers(&direct.headers) {
            failures.push(format!(
                "#{i}: headers {:?} vs {:?}",
                end_to_end_headers(&proxied.headers),
                end_to_end_headers(&direct.headers)
            ));
        }
    }
    let sizes: Vec<usize> = blobs.iter().map(|b| b.len()).collect();
    Outcome::check(
        failures.is_empty(),
        format!(
            "{count} payloads, {}..{} bytes, {} mismatches{}",
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap(),
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// WebSocket fidelity

pub fn ws_script(n: usize, seed: u64) -> Vec<Message> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let exp: f64 = rng.gen_range(0.0..16.0);
            let len = (2f64.powf(exp) as usize).clamp(1, 64 * 1024);
            if rng.gen_bool(0.5) {
                let s: String = (0..len).map(|_| rng.gen_range(b' '..=b'~') as char).collect();
                Message::text(s)
            } else {
                let mut b = vec![0u8; len];
                rng.fill(&mut b[..]);
                Message::binary(b)
            }
        })
        .collect()
}

async fn ws_transcript(url: &str, bearer: Option<&str>, script: &[Message]) -> Result<Vec<Message>, String> {
    let mut req = url.into_client_request().map_err(|e| e.to_string())?;
    if let Some(t) = bearer {
        req.headers_mut()
            .insert(header::AUTHORIZATION, format!("Bearer {t}").parse().unwrap());
    }
    let (mut ws, resp) = tokio_tungstenite::connect_async(req)
        .await
        .map_err(|e| format!("connect {url}: {e}"))?;
    if resp.status() != StatusCode::SWITCHING_PROTOCOLS {
        return Err(format!("handshake status {}", resp.status()));
    }
    let mut transcript = Vec::with_capacity(script.len());
    for m in script {
        ws.send(m.clone()).await.map_err(|e| e.to_string())?;
        loop {
            match ws.next().await {
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
                Some(Ok(reply)) => {
                    transcript.push(reply);
                    break;
                }
                Some(Err(e)) => return Err(e.to_string()),
                None => return Err("closed early".into()),
            }
        }
    }
    ws.close(None).await.ok();
    Ok(transcript)
}

pub async fn websocket_fidelity(n: usize) -> Outcome {
    let t = TestPortal::start().await;
    let (_, port, _) = t.launch(ALICE, "node-1", "echo-ws").await;
    let script = ws_script(n, 0x3e55a9e);

    let direct_url = format!("ws://{}:{port}/ws", t.node_ip(1));
    let portal_url = format!("ws://{}/fw2/node-1:{port}/ws", t.portal.addr());
    let direct = match ws_transcript(&direct_url, None, &script).await {
        Ok(d) => d,
        Err(e) => return Outcome::fail(format!("direct: {e}")),
    };
    let proxied = match ws_transcript(&portal_url, Some(ALICE), &script).await {
        Ok(p) => p,
        Err(e) => return Outcome::fail(format!("gateway: {e}")),
    };
    let first_diff = direct.iter().zip(&proxied).position(|(a, b)| a != b);
    let bytes: usize = script.iter().map(|m| m.len()).sum();
    Outcome::check(
        direct == proxied && direct == script,
        format!(
            "{n} messages ({bytes} bytes): direct {} / gateway {} replies, first difference {first_diff:?}",
            direct.len(),
            proxied.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Rewriter containment and idempotence

const URL_ATTRS: [&str; 4] = ["href", "src", "action", "content"];

/// Every attribute value `name=value` for URL attributes in `html`, found by
/// a deliberately simple scan. Only used on documents without comments or
/// scripts that embed markup.
fn naive_url_values(html: &str) -> Vec<String> {
    let lower = html.to_ascii_lowercase();
    let mut out = Vec::new();
    for attr in URL_ATTRS {
        for quote in ['"', '\''] {
            let needle = format!(" {attr}={quote}");
            let mut from = 0;
            while let Some(at) = lower[from..].find(&needle) {
                let start = from + at + needle.len();
                let end = start + html[start..].find(quote).unwrap();
                out.push(html[start..end].to_string());
                from = end;
            }
        }
    }
    let mut from = 0;
    while let Some(at) = lower[from..].find("url(") {
        let start = from + at + 4;
        let end = start + html[start..].find(')').unwrap();
        out.push(html[start..end].trim_matches(['\'', '"']).to_string());
        from = end;
    }
    out
}

fn root_relative(url: &str) -> bool {
    url.starts_with('/') && !url.starts_with("//") && !url.starts_with("/\\")
}

/// A generated document: the input and the output a correct rewriter must
/// produce, plus every URL slot as it must appear afterwards.
pub struct Case {
    pub input: String,
    pub expected: String,
    pub slots: Vec<String>,
}

fn gen_url(rng: &mut StdRng, prefix: &str) -> String {
    let seg = |rng: &mut StdRng| -> String {
        let n = rng.gen_range(1..8);
        (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
    };
    match rng.gen_range(0..12) {
        0..=3 => {
            let mut u = format!("/{}", seg(rng));
            if rng.gen_bool(0.5) {
                u.push_str(&format!("/{}.js", seg(rng)));
            }
            if rng.gen_bool(0.3) {
                u.push_str(&format!("?q={}&r=%20", seg(rng)));
            }
            if rng.gen_bool(0.2) {
                u.push_str("#frag");
            }
            u
        }
        4 => "/".into(),
        5 => seg(rng),
        6 => format!("../{}", seg(rng)),
        7 => format!("https://{}.example/{}", seg(rng), seg(rng)),
        8 => format!("//cdn.{}.example/x.js", seg(rng)),
        9 => format!("#{}", seg(rng)),
        10 => format!("{prefix}/{}", seg(rng)),
        _ => ["/\\evil.example", "mailto:a@b", "", "/fw", "?x=1", "data:text/plain,hi"][rng.gen_range(0..6)].into(),
    }
}

fn expected_url(url: &str, prefix: &str) -> String {
    let already = url.len() > prefix.len() && url.starts_with(prefix) && url.as_bytes()[prefix.len()] == b'/';
    if root_relative(url) && !already {
        format!("{prefix}{url}")
    } else {
        url.to_string()
    }
}

pub fn gen_case(rng: &mut StdRng, prefix: &str) -> Case {
    let mut input = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"></head><body>\n");
    let mut expected = input.clone();
    let mut slots = Vec::new();
    let pieces = rng.gen_range(5..40);
    for _ in 0..pieces {
        match rng.gen_range(0..10) {
            0..=4 => {
                let tag = ["a", "img", "link", "form", "iframe", "meta", "source", "A", "Img"][rng.gen_range(0..9)];
                let attr = {
                    let a = URL_ATTRS[rng.gen_range(0..4)];
                    if rng.gen_bool(0.2) { a.to_ascii_uppercase() } else { a.to_string() }
                };
                let url = gen_url(rng, prefix);
                let unquotable = !url.is_empty() && !url.contains([' ', '>', '"', '\'', '=']);
                let quote = match rng.gen_range(0..3) {
                    0 => "\"",
                    1 => "'",
                    _ if unquotable => "",
                    _ => "\"",
                };
                let eq = [" = ", "=", "= ", "\n=\n"][rng.gen_range(0..4)];
                let lead = if rng.gen_bool(0.3) { " class=\"c\" data-src=\"/no\" title='href=/no'" } else { "" };
                let tail = if rng.gen_bool(0.3) { " disabled" } else { "" };
                let close = if quote.is_empty() { " >" } else if rng.gen_bool(0.2) { "/>" } else { ">" };
                let out_url = expected_url(&url, prefix);
                input.push_str(&format!("<{tag}{lead} {attr}{eq}{quote}{url}{quote}{tail}{close}"));
                expected.push_str(&format!("<{tag}{lead} {attr}{eq}{quote}{out_url}{quote}{tail}{close}"));
                slots.push(out_url);
            }
            5 => {
                let url = gen_url(rng, prefix).replace(['(', ')', '\'', '"', ' '], "");
                let (q, inner) = [("\"", "'"), ("'", "\""), ("\"", "")][rng.gen_range(0..3)];
                let out_url = expected_url(&url, prefix);
                input.push_str(&format!("<div style={q}color: red; background: url({inner}{url}{inner}){q}>"));
                expected.push_str(&format!("<div style={q}color: red; background: url({inner}{out_url}{inner}){q}>"));
                slots.push(out_url);
            }
            6 => {
                let s = "<!-- <a href=\"/commented\"> <img src=/x> -->";
                input.push_str(s);
                expected.push_str(s);
            }
            7 => {
                let s = [
                    "<script>var u = \"/api/x\"; if (a < b) { document.write('<a href=\"/w\">'); }</script>",
                    "<style>body { background: url(/bg.png) }</style>",
                    "<textarea><a href=\"/typed\"></textarea>",
                    "<title>/home <img src=\"/t\"></title>",
                    "<SCRIPT type=\"text/plain\">'</scrip' + '<a href=/z>'</SCRIPT>",
                ][rng.gen_range(0..5)];
                input.push_str(s);
                expected.push_str(s);
            }
            8 => {
                let s = ["</a>", "</div>\n", "<br>", "<p class=\"x\">", "a < b > c", "&lt;a href=\"/e\"&gt;", "<?xml href=\"/pi\"?>"][rng.gen_range(0..7)];
                input.push_str(s);
                expected.push_str(s);
            }
            _ => {
                let s = "text with /slashes and href=\"/not-a-tag\" in it\n";
                input.push_str(s);
                expected.push_str(s);
            }
        }
    }
    input.push_str("</body></html>\n");
    expected.push_str("</body></html>\n");
    Case {
        input,
        expected,
        slots,
    }
}

/// Rewrites in randomly sized chunks.
pub fn rewrite_chunked(input: &[u8], ctx: &RewriteContext, rng: &mut StdRng) -> Vec<u8> {
    let mut rw = portal_core::rewrite::HtmlRewriter::new(ctx.clone());
    let mut out = Vec::new();
    let mut rest = input;
    while !rest.is_empty() {
        let n = rng.gen_range(1..=rest.len().min(64));
        rw.feed(&rest[..n], &mut out);
        rest = &rest[n..];
    }
    rw.finish(&mut out);
    out
}

pub fn rewriter_corpus(cases: usize) -> Outcome {
    let prefixes = ["/fw2/node-1:8888", "/fw/nb", "/fw/my.notebook_2"];
    let mut rng = StdRng::seed_from_u64(0xc0ffee);
    let mut failures = Vec::new();
    let mut slots = 0usize;

    // The notebook demo page.
    for prefix in prefixes {
        let ctx = RewriteContext::new(prefix, None).unwrap();
        let page = notebook_page();
        let once = String::from_utf8(rewrite_html(page.as_bytes(), &ctx)).unwrap();
        for url in naive_url_values(&once) {
            slots += 1;
            if root_relative(&url) && !url.starts_with(&format!("{prefix}/")) {
                failures.push(format!("notebook page: {url} not contained under {prefix}"));
            }
        }
        if rewrite_html(once.as_bytes(), &ctx) != once.as_bytes() {
            failures.push(format!("notebook page not idempotent under {prefix}"));
        }
    }

    for i in 0..cases {
        let prefix = prefixes[i % prefixes.len()];
        let ctx = RewriteContext::new(prefix, None).unwrap();
        let case = gen_case(&mut rng, prefix);
        let once = rewrite_html(case.input.as_bytes(), &ctx);
        let twice = rewrite_html(&once, &ctx);
        let chunked = rewrite_chunked(case.input.as_bytes(), &ctx, &mut rng);
        if once != case.expected.as_bytes() {
            let at = once
                .iter()
                .zip(case.expected.as_bytes())
                .position(|(a, b)| a != b)
                .unwrap_or(once.len().min(case.expected.len()));
            let lo = at.saturating_sub(60);
            failures.push(format!(
                "case {i}: output differs at {at}: got {:?} want {:?}",
                String::from_utf8_lossy(&once[lo..(at + 40).min(once.len())]),
                &case.expected[lo..(at + 40).min(case.expected.len())]
            ));
        }
        if twice != once {
            failures.push(format!("case {i}: not idempotent"));
        }
        if chunked != once {
            failures.push(format!("case {i}: chunked output differs"));
        }
        for s in &case.slots {
            slots += 1;
            if root_relative(s) && !s.starts_with(&format!("{prefix}/")) {
                failures.push(format!("case {i}: slot {s} escapes {prefix}"));
            }
        }
    }
    Outcome::check(
        failures.is_empty(),
        format!(
            "notebook page + {cases} generated documents, {slots} URL slots, {} failures{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Port uniqueness

struct Nothing;
impl AppHandle for Nothing {}

/// Starts nothing; fails now and then to exercise the failure path.
struct FakeLauncher {
    fail_every: u64,
    calls: std::sync::atomic::AtomicU64,
}

impl Launcher for FakeLauncher {
    fn launch(&self, _: AppKind, _: IpAddr, _: &[u16], _: Option<&str>) -> io::Result<Box<dyn AppHandle>> {
        let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        if self.fail_every > 0 && n % self.fail_every == self.fail_every - 1 {
            return Err(io::Error::other("simulated spawn failure"));
        }
        Ok(Box::new(Nothing))
    }
}

pub fn port_uniqueness(nodes: usize, ops: usize, range_size: u32, seed: u64) -> Outcome {
    let low = 20000;
    let range = PortRange::new(low, low + range_size - 1).unwrap();
    let node_names: Vec<String> = (0..nodes).map(|i| format!("node-{i}")).collect();
    let agents: Vec<Arc<IdentAgent>> = node_names.iter().map(|n| IdentAgent::new(n.clone())).collect();
    let node_map: HashMap<String, Node> = node_names
        .iter()
        .zip(&agents)
        .map(|(n, a)| {
            (
                n.clone(),
                Node {
                    ip: "127.0.0.1".parse().unwrap(),
                    agent: a.clone(),
                },
            )
        })
        .collect();
    let sched = Scheduler::new(
        range,
        node_map,
        Box::new(FakeLauncher {
            fail_every: 37,
            calls: Default::default(),
        }),
    );
    let users: Vec<Principal> = (0..4).map(|i| Principal::new(100 + i, 100 + i, [], "u")).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut launched = Vec::new();
    let (mut launches, mut stops, mut exhausted, mut failed) = (0, 0, 0, 0);

    for op in 0..ops {
        if launched.is_empty() || rng.gen_bool(0.6) {
            let node = &node_names[rng.gen_range(0..nodes)];
            let user = &users[rng.gen_range(0..users.len())];
            match sched.launch(user, node, AppKind::EchoHttp, rng.gen_range(1..=3)) {
                Ok(job) => {
                    launches += 1;
                    launched.push(job.job_id);
                }
                Err(SchedulerError::RangeExhausted { .. }) => exhausted += 1,
                Err(SchedulerError::SpawnFailure(_)) => failed += 1,
                Err(e) => return Outcome::fail(format!("op {op}: unexpected {e}")),
            }
        } else {
            let at = rng.gen_range(0..launched.len());
            // Mostly live jobs; sometimes a repeat stop.
            let id = if rng.gen_bool(0.9) { launched.swap_remove(at) } else { launched[at] };
            let job = sched.job(id).unwrap();
            let owner = users.iter().find(|u| u.uid() == job.owner.uid()).unwrap();
            if let Err(e) = sched.stop(id, owner) {
                return Outcome::fail(format!("op {op}: stop failed: {e}"));
            }
            stops += 1;
        }

        let live = sched.live_jobs();
        let mut seen = HashSet::new();
        for job in &live {
            for &p in &job.ports {
                if !range.contains(p) {
                    return Outcome::fail(format!("op {op}: port {p} outside the range"));
                }
                if !seen.insert((job.node.clone(), p)) {
                    return Outcome::fail(format!("op {op}: duplicate {}:{p}", job.node));
                }
                let agent = &agents[node_names.iter().position(|n| *n == job.node).unwrap()];
                if agent.owner_of(p) != Some((job.owner.uid(), job.owner.primary_gid())) {
                    return Outcome::fail(format!("op {op}: agent out of sync for {}:{p}", job.node));
                }
            }
        }
        for (i, agent) in agents.iter().enumerate() {
            for p in range.low()..=range.high() {
                if agent.owner_of(p).is_some() && !seen.contains(&(node_names[i].clone(), p)) {
                    return Outcome::fail(format!("op {op}: stale registration {}:{p}", node_names[i]));
                }
            }
        }
    }
    Outcome::pass(format!(
        "{ops} ops on {nodes} nodes, range size {range_size}: {launches} launches, {stops} stops, {exhausted} exhausted, {failed} spawn failures, no duplicates"
    ))
}

// ---------------------------------------------------------------------------
// Benchmark reproduction and cache effect

/// Launches a notebook on node-1 and benchmarks it directly and via `t`.
pub async fn bench_notebook(t: &TestPortal, reps: usize) -> Result<LatencyReport, String> {
    let (_, port, token) = t.launch(ALICE, "node-1", "token-notebook").await;
    let token = token.unwrap();
    let direct = Target::new(&format!("http://{}:{port}/?token={token}", t.node_ip(1)), None).unwrap();
    let portal = Target::new(
        &format!("{}/fw2/node-1:{port}/?token={token}", t.portal.base_url()),
        Some(ALICE.to_string()),
    )
    .unwrap();
    run_benchmark(&RequestManifest::notebook(), &direct, &portal, reps)
        .await
        .map_err(|e| e.to_string())
}

pub async fn bench_reproduction() -> Outcome {
    let start = Instant::now();
    let t = TestPortal::start().await;
    let manifest = RequestManifest::notebook();
    let report = match bench_notebook(&t, 5).await {
        Ok(r) => r,
        Err(e) => return Outcome::fail(e),
    };
    let median = report.median_delta_ms();
    let elapsed = start.elapsed();
    Outcome::check(
        report.per_request.len() == 31
            && manifest.concurrency == 8
            && report.sum_of_deltas_ms >= report.wall_clock_overhead_ms
            && median > 0.0
            && elapsed < Duration::from_secs(120),
        format!(
            "31 requests, concurrency 8: direct_total_ms={:.2} portal_total_ms={:.2} sum_of_deltas_ms={:.2} wall_clock_overhead_ms={:.2} median_delta_ms={:.3} ({:.1} s)",
            report.direct_total_ms,
            report.portal_total_ms,
            report.sum_of_deltas_ms,
            report.wall_clock_overhead_ms,
            median,
            elapsed.as_secs_f64()
        ),
    )
}

/// Requests the notebook page and then its 30 assets concurrently, as a
/// browser would, and counts agent queries.
async fn burst_queries(t: &TestPortal) -> (u64, usize) {
    let (_, port, token) = t.launch(ALICE, "node-1", "token-notebook").await;
    let token = token.unwrap();
    let agent = t.portal.agent("node-1").unwrap().clone();
    let before = agent.queries();
    let manifest = RequestManifest::notebook();
    let mut ok = 0;
    let mut groups = manifest.groups().into_iter();
    for group in groups.by_ref() {
        let mut set = tokio::task::JoinSet::new();
        for i in group {
            let url = t.url(&format!("/fw2/node-1:{port}{}?token={token}", manifest.entries[i].path));
            set.spawn(async move { fetch(&url, Some(ALICE)).await.status });
        }
        while let Some(s) = set.join_next().await {
            if s.unwrap() == StatusCode::OK {
                ok += 1;
            }
        }
    }
    (agent.queries() - before, ok)
}

pub async fn cache_effect() -> Outcome {
    // A small simulated round trip to the node agent, as on a real cluster.
    let cached = TestPortal::with(Options {
        latency_ms: 2,
        ..Options::default()
    })
    .await;
    let (queries, ok) = burst_queries(&cached).await;
    let uncached_portal = TestPortal::with(Options {
        ttl_ms: 0,
        latency_ms: 2,
        ..Options::default()
    })
    .await;
    let (uncached_queries, _) = burst_queries(&uncached_portal).await;

    // Median delta over requests 2..N, cache on versus off, same host.
    let mut on = Vec::new();
    let mut off = Vec::new();
    for _ in 0..3 {
        let a = match bench_notebook(&cached, 5).await {
            Ok(r) => r,
            Err(e) => return Outcome::fail(e),
        };
        let b = match bench_notebook(&uncached_portal, 5).await {
            Ok(r) => r,
            Err(e) => return Outcome::fail(e),
        };
        on.push(portal_core::bench::median(a.per_request[1..].iter().map(|r| r.delta_ms).collect()));
        off.push(portal_core::bench::median(b.per_request[1..].iter().map(|r| r.delta_ms).collect()));
    }
    let on_med = portal_core::bench::median(on.clone());
    let off_med = portal_core::bench::median(off.clone());
    Outcome::check(
        queries == 1 && ok == 31 && uncached_queries == 31 && on_med < off_med,
        format!(
            "31-request burst: {queries} agent queries with cache ({ok} ok), {uncached_queries} without; median delta (requests 2..31) {on_med:.3} ms cached vs {off_med:.3} ms uncached"
        ),
    )
}

// ---------------------------------------------------------------------------
// Disabled forwards

pub async fn disabled_forward() -> Outcome {
    let t = TestPortal::start().await;
    let (_, port, _) = t.launch(ALICE, "node-1", "echo-http").await;
    t.api(Method::POST, "/api/forwards", ALICE, Some(json!({"name": "nb"}))).await;
    t.api(Method::PUT, "/api/forwards/nb", ALICE, Some(json!({"node": "node-1", "port": port})))
        .await;
    let enabled = t.get("/fw/nb/", Some(ALICE)).await.status;
    let (s, _) = t
        .api(Method::PUT, "/api/forwards/nb", ALICE, Some(json!({"disabled": true})))
        .await;
    let disabled = t.get("/fw/nb/", Some(ALICE)).await;
    let (claim, _) = t.api(Method::POST, "/api/forwards", BOB, Some(json!({"name": "nb"}))).await;
    let on_disk = std::fs::read_to_string(t.portal.registry().root().join("nb.fwd")).unwrap_or_default();
    Outcome::check(
        enabled == StatusCode::OK
            && s == StatusCode::OK
            && disabled.status == StatusCode::SERVICE_UNAVAILABLE
            && disabled.text() == "503 Service Unavailable\n"
            && claim == StatusCode::CONFLICT
            && on_disk.is_empty(),
        format!(
            "enabled {enabled}; after disable GET {} (file {} bytes); other user's claim {claim}",
            disabled.status,
            on_disk.len()
        ),
    )
}
