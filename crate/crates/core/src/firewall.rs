//! User-based firewall decisions.
//!
//! A direct connection is allowed when the connecting user owns the
//! listening process, or belongs to the listener's primary group. A named
//! forward is additionally bound to its backend: the listener must be owned
//! by the forward's owner or carry the forward's group.

use serde::{Deserialize, Serialize};

use crate::principal::Principal;
use crate::registry::ForwardRecord;

/// Ownership of a listening socket on a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerInfo {
    pub node: String,
    pub port: u16,
    pub owner_uid: u32,
    pub owner_primary_gid: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    UidMatch,
    GroupMatch,
    NoMatch,
    NoListener,
    ForwardOwnerMatch,
    ForwardGroupMatch,
    CrossConnection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthDecision {
    pub verdict: Verdict,
    pub reason: Reason,
}

impl AuthDecision {
    fn allow(reason: Reason) -> Self {
        debug_assert!(matches!(
            reason,
            Reason::UidMatch
                | Reason::GroupMatch
                | Reason::ForwardOwnerMatch
                | Reason::ForwardGroupMatch
        ));
        Self {
            verdict: Verdict::Allow,
            reason,
        }
    }

    fn deny(reason: Reason) -> Self {
        Self {
            verdict: Verdict::Deny,
            reason,
        }
    }

    /// Nothing listens on the target port.
    pub fn no_listener() -> Self {
        Self::deny(Reason::NoListener)
    }

    pub fn is_allowed(&self) -> bool {
        self.verdict == Verdict::Allow
    }
}

/// Decides whether `principal` may connect to `listener`.
///
/// Membership in the listener's primary group may come from any of the
/// principal's groups, primary or supplementary.
pub fn authorize_direct(principal: &Principal, listener: &ListenerInfo) -> AuthDecision {
    if principal.uid() == listener.owner_uid {
        AuthDecision::allow(Reason::UidMatch)
    } else if principal.is_member_of(listener.owner_primary_gid) {
        AuthDecision::allow(Reason::GroupMatch)
    } else {
        AuthDecision::deny(Reason::NoMatch)
    }
}

/// Binds a named forward to its backend process.
///
/// This says nothing about the requester; callers combine it with
/// [`ForwardRecord::permits_connect`].
pub fn authorize_named(record: &ForwardRecord, listener: &ListenerInfo) -> AuthDecision {
    if listener.owner_uid == record.owner_uid {
        AuthDecision::allow(Reason::ForwardOwnerMatch)
    } else if listener.owner_primary_gid == record.group_gid {
        AuthDecision::allow(Reason::ForwardGroupMatch)
    } else {
        AuthDecision::deny(Reason::CrossConnection)
    }
}
