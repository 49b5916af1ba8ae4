//! Listener-ownership lookups against per-node agents.
//!
//! Every simulated node runs an [`IdentAgent`] that knows which user owns
//! each listening port. The gateway asks it over a line protocol:
//!
//! ```text
//! LOOKUP <port>\n    ->  OWNER <uid> <gid>\n | NONE\n | ERR <reason>\n
//! ```
//!
//! Requests may be pipelined on one connection. [`IdentResolver`] adds a
//! short-lived cache in front of the agents so a burst of requests to one
//! backend costs a single round trip.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tracing::{debug, warn};

use crate::firewall::ListenerInfo;

const MAX_LINE: usize = 256;
const LOOKUP_TIMEOUT: Duration = Duration::from_secs(2);
const CACHE_PRUNE_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentError {
    #[error("ident agent for {0} unreachable")]
    AgentUnreachable(String),
    #[error("ident protocol error: {0}")]
    Protocol(String),
}

/// Answer to a lookup: the listener, or `None` when nothing listens.
pub type Lookup = Option<ListenerInfo>;

/// Per-node responder holding port ownership registrations.
#[derive(Debug)]
pub struct IdentAgent {
    node: String,
    registrations: RwLock<HashMap<u16, (u32, u32)>>,
    queries: AtomicU64,
    latency: Duration,
}

impl IdentAgent {
    pub fn new(node: impl Into<String>) -> Arc<Self> {
        Self::with_latency(node, Duration::ZERO)
    }

    /// An agent that waits `latency` before each answer, standing in for
    /// the network distance to a real compute node.
    pub fn with_latency(node: impl Into<String>, latency: Duration) -> Arc<Self> {
        Arc::new(Self {
            node: node.into(),
            registrations: RwLock::new(HashMap::new()),
            queries: AtomicU64::new(0),
            latency,
        })
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn register(&self, port: u16, uid: u32, gid: u32) {
        self.registrations.write().unwrap().insert(port, (uid, gid));
    }

    pub fn unregister(&self, port: u16) {
        self.registrations.write().unwrap().remove(&port);
    }

    pub fn owner_of(&self, port: u16) -> Option<(u32, u32)> {
        self.registrations.read().unwrap().get(&port).copied()
    }

    /// Number of protocol requests answered so far.
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Answers one request line (without its terminator).
    pub fn respond(&self, line: &str) -> String {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let port = line
            .strip_prefix("LOOKUP ")
            .filter(|p| !p.is_empty() && p.len() <= 5 && p.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|p| p.parse::<u16>().ok())
            .filter(|&p| p != 0);
        match port {
            None => "ERR malformed\n".to_string(),
            Some(port) => match self.owner_of(port) {
                Some((uid, gid)) => format!("OWNER {uid} {gid}\n"),
                None => "NONE\n".to_string(),
            },
        }
    }

    /// Serves connections until the listener fails.
    pub async fn serve(self: Arc<Self>, listener: TcpListener) {
        loop {
            let (stream, _) = match listener.accept().await {
                Ok(conn) => conn,
                Err(e) => {
                    warn!(node = %self.node, error = %e, "ident accept failed");
                    continue;
                }
            };
            let agent = self.clone();
            tokio::spawn(async move {
                if let Err(e) = agent.serve_connection(stream).await {
                    debug!(error = %e, "ident connection closed");
                }
            });
        }
    }

    async fn serve_connection(&self, stream: TcpStream) -> std::io::Result<()> {
        stream.set_nodelay(true)?;
        let (read, mut write) = stream.into_split();
        let mut reader = BufReader::new(read);
        let mut line = Vec::with_capacity(64);
        loop {
            line.clear();
            let n = (&mut reader)
                .take(MAX_LINE as u64 + 1)
                .read_until(b'\n', &mut line)
                .await?;
            if n == 0 {
                return Ok(());
            }
            if line.last() != Some(&b'\n') {
                // Overlong line or EOF mid-line.
                write.write_all(b"ERR malformed\n").await?;
                return Ok(());
            }
            line.pop();
            let text = std::str::from_utf8(&line).unwrap_or("");
            if !self.latency.is_zero() {
                tokio::time::sleep(self.latency).await;
            }
            let reply = self.respond(text);
            write.write_all(reply.as_bytes()).await?;
        }
    }
}

/// Parses one agent response line (without terminator).
pub fn parse_response(node: &str, port: u16, line: &str) -> Result<Lookup, IdentError> {
    let malformed = || IdentError::Protocol(format!("unexpected response {line:?}"));
    if line == "NONE" {
        return Ok(None);
    }
    if let Some(rest) = line.strip_prefix("OWNER ") {
        let mut parts = rest.split(' ');
        let uid = parts.next().and_then(|s| s.parse::<u32>().ok());
        let gid = parts.next().and_then(|s| s.parse::<u32>().ok());
        return match (uid, gid, parts.next()) {
            (Some(owner_uid), Some(owner_primary_gid), None) => Ok(Some(ListenerInfo {
                node: node.to_string(),
                port,
                owner_uid,
                owner_primary_gid,
            })),
            _ => Err(malformed()),
        };
    }
    if let Some(reason) = line.strip_prefix("ERR ") {
        return Err(IdentError::Protocol(reason.to_string()));
    }
    Err(malformed())
}

/// Talks to the agents of known nodes, one connection per lookup.
#[derive(Debug, Clone, Default)]
pub struct IdentClient {
    agents: HashMap<String, SocketAddr>,
}

impl IdentClient {
    pub fn new(agents: HashMap<String, SocketAddr>) -> Self {
        Self { agents }
    }

    pub fn agent_addr(&self, node: &str) -> Option<SocketAddr> {
        self.agents.get(node).copied()
    }

    pub async fn lookup(&self, node: &str, port: u16) -> Result<Lookup, IdentError> {
        let addr = self
            .agent_addr(node)
            .ok_or_else(|| IdentError::AgentUnreachable(node.to_string()))?;
        let exchange = async {
            let mut stream = TcpStream::connect(addr)
                .await
                .map_err(|_| IdentError::AgentUnreachable(node.to_string()))?;
            stream.set_nodelay(true).ok();
            stream
                .write_all(format!("LOOKUP {port}\n").as_bytes())
                .await
                .map_err(|_| IdentError::AgentUnreachable(node.to_string()))?;
            let mut reader = BufReader::new(stream).take(MAX_LINE as u64);
            let mut line = String::new();
            reader
                .read_line(&mut line)
                .await
                .map_err(|e| IdentError::Protocol(e.to_string()))?;
            let Some(line) = line.strip_suffix('\n') else {
                return Err(IdentError::Protocol("truncated response".into()));
            };
            parse_response(node, port, line)
        };
        tokio::time::timeout(LOOKUP_TIMEOUT, exchange)
            .await
            .unwrap_or_else(|_| Err(IdentError::AgentUnreachable(node.to_string())))
    }
}

/// Ident lookups with an optional TTL cache keyed by `(node, port)`.
///
/// Both owners and `NONE` answers are cached; errors never are. A zero TTL
/// disables caching. Concurrent misses on one key may each reach the agent.
#[derive(Debug)]
pub struct IdentResolver {
    client: IdentClient,
    ttl: Duration,
    entries: Mutex<HashMap<(String, u16), (Instant, Lookup)>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl IdentResolver {
    pub const DEFAULT_TTL: Duration = Duration::from_secs(2);

    pub fn new(client: IdentClient, ttl: Duration) -> Self {
        Self {
            client,
            ttl,
            entries: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn client(&self) -> &IdentClient {
        &self.client
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub async fn lookup(&self, node: &str, port: u16) -> Result<Lookup, IdentError> {
        if self.ttl.is_zero() {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return self.client.lookup(node, port).await;
        }

        let key = (node.to_string(), port);
        if let Some((at, cached)) = self.entries.lock().unwrap().get(&key) {
            if at.elapsed() < self.ttl {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(cached.clone());
            }
        }

        self.misses.fetch_add(1, Ordering::Relaxed);
        let fresh = self.client.lookup(node, port).await?;
        let mut entries = self.entries.lock().unwrap();
        if entries.len() >= CACHE_PRUNE_THRESHOLD {
            let ttl = self.ttl;
            entries.retain(|_, (at, _)| at.elapsed() < ttl);
        }
        entries.insert(key, (Instant::now(), fresh.clone()));
        Ok(fresh)
    }

    /// Drops every cached answer.
    pub fn clear(&self) {
        self.entries.lock().unwrap().clear();
    }
}
