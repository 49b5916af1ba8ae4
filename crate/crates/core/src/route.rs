//! Classification of incoming request targets.
//!
//! Two prefixes trigger forwarding:
//!
//! * `/fw/<name>/<rest>` forwards through a named, user-owned record in the
//!   forward registry.
//! * `/fw2/<node>:<port>/<rest>` forwards straight to a node and port.
//!
//! Everything else is served by the gateway itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NAMED_PREFIX: &str = "/fw/";
pub const DIRECT_PREFIX: &str = "/fw2/";

const MAX_NAME_LEN: usize = 64;
const MAX_NODE_LEN: usize = 253;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("malformed forward name: {0}")]
    MalformedName(String),
    #[error("malformed forward target: {0}")]
    MalformedTarget(String),
}

/// Where a request is headed.
///
/// `rest` and `path` carry the path plus the verbatim query string and
/// always begin with `/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteTarget {
    NamedForward { name: String, rest: String },
    DirectForward { node: String, port: u16, rest: String },
    Passthrough { path: String },
}

impl RouteTarget {
    /// The URL prefix that selects this target, without a trailing slash.
    pub fn prefix(&self) -> Option<String> {
        match self {
            RouteTarget::NamedForward { name, .. } => Some(format!("{NAMED_PREFIX}{name}")),
            RouteTarget::DirectForward { node, port, .. } => {
                Some(format!("{DIRECT_PREFIX}{node}:{port}"))
            }
            RouteTarget::Passthrough { .. } => None,
        }
    }

    /// Path and query the backend (or the gateway itself) sees.
    pub fn rest(&self) -> &str {
        match self {
            RouteTarget::NamedForward { rest, .. } | RouteTarget::DirectForward { rest, .. } => {
                rest
            }
            RouteTarget::Passthrough { path } => path,
        }
    }

    /// Re-assembles the original request target.
    pub fn to_path(&self) -> String {
        match self.prefix() {
            Some(prefix) => format!("{prefix}{}", self.rest()),
            None => self.rest().to_string(),
        }
    }
}

/// Splits an origin-form request target into its route.
pub fn parse_route(target: &str) -> Result<RouteTarget, RouteError> {
    let (path, query) = match target.find('?') {
        Some(i) => target.split_at(i),
        None => (target, ""),
    };

    if let Some(tail) = path.strip_prefix(NAMED_PREFIX) {
        let (name, rest) = split_segment(tail);
        validate_name(name)?;
        return Ok(RouteTarget::NamedForward {
            name: name.to_string(),
            rest: join_rest(rest, query),
        });
    }

    if let Some(tail) = path.strip_prefix(DIRECT_PREFIX) {
        let (segment, rest) = split_segment(tail);
        let dest: Destination = segment.parse()?;
        return Ok(RouteTarget::DirectForward {
            node: dest.node,
            port: dest.port,
            rest: join_rest(rest, query),
        });
    }

    Ok(RouteTarget::Passthrough {
        path: target.to_string(),
    })
}

fn split_segment(tail: &str) -> (&str, &str) {
    match tail.find('/') {
        Some(i) => tail.split_at(i),
        None => (tail, ""),
    }
}

fn join_rest(rest: &str, query: &str) -> String {
    let mut out = String::with_capacity(rest.len() + query.len() + 1);
    if rest.is_empty() {
        out.push('/');
    } else {
        out.push_str(rest);
    }
    out.push_str(query);
    out
}

/// Checks a forward name against `[A-Za-z0-9_.-]{1,64}`, rejecting `..`.
pub fn validate_name(name: &str) -> Result<(), RouteError> {
    let bad = name.is_empty()
        || name.len() > MAX_NAME_LEN
        || name.contains("..")
        || !name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'));
    if bad {
        return Err(RouteError::MalformedName(name.to_string()));
    }
    Ok(())
}

fn validate_node(node: &str) -> bool {
    !node.is_empty()
        && node.len() <= MAX_NODE_LEN
        && node
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'-'))
}

/// A node and port, written `node:port`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Destination {
    pub node: String,
    pub port: u16,
}

impl Destination {
    pub fn new(node: impl Into<String>, port: u16) -> Result<Self, RouteError> {
        let node = node.into();
        if !validate_node(&node) || port == 0 {
            return Err(RouteError::MalformedTarget(format!("{node}:{port}")));
        }
        Ok(Self { node, port })
    }
}

impl FromStr for Destination {
    type Err = RouteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || RouteError::MalformedTarget(s.to_string());
        let (node, port) = s.rsplit_once(':').ok_or_else(malformed)?;
        if !validate_node(node) || port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        let digits = port.trim_start_matches('0');
        if digits.len() > 5 {
            return Err(malformed());
        }
        let port: u32 = digits.parse().unwrap_or(0);
        if !(1..=65535).contains(&port) {
            return Err(malformed());
        }
        Ok(Destination {
            node: node.to_string(),
            port: port as u16,
        })
    }
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.port)
    }
}

/// Absolute URL of the backend resource. `rest` is copied verbatim, so
/// already-encoded octets are never re-encoded.
pub fn build_backend_url(dest: &Destination, rest: &str) -> String {
    format!("http://{}:{}{}", dest.node, dest.port, rest)
}
