//! Authenticated users.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// An authenticated user of the portal.
///
/// `groups` always contains `primary_gid`; the constructor and the
/// deserializer both enforce it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPrincipal", into = "RawPrincipal")]
pub struct Principal {
    uid: u32,
    primary_gid: u32,
    groups: BTreeSet<u32>,
    display_name: String,
}

impl Principal {
    pub fn new(
        uid: u32,
        primary_gid: u32,
        supplementary: impl IntoIterator<Item = u32>,
        display_name: impl Into<String>,
    ) -> Self {
        let mut groups: BTreeSet<u32> = supplementary.into_iter().collect();
        groups.insert(primary_gid);
        Self {
            uid,
            primary_gid,
            groups,
            display_name: display_name.into(),
        }
    }

    pub fn uid(&self) -> u32 {
        self.uid
    }

    pub fn primary_gid(&self) -> u32 {
        self.primary_gid
    }

    pub fn groups(&self) -> &BTreeSet<u32> {
        &self.groups
    }

    pub fn display_name(&self) -> &str {
        &self.display_name
    }

    pub fn is_member_of(&self, gid: u32) -> bool {
        self.groups.contains(&gid)
    }
}

#[derive(Serialize, Deserialize)]
struct RawPrincipal {
    uid: u32,
    primary_gid: u32,
    #[serde(default)]
    groups: Vec<u32>,
    #[serde(default)]
    display_name: String,
}

impl TryFrom<RawPrincipal> for Principal {
    type Error = String;

    fn try_from(raw: RawPrincipal) -> Result<Self, Self::Error> {
        if !raw.groups.is_empty() && !raw.groups.contains(&raw.primary_gid) {
            return Err(format!(
                "primary gid {} missing from groups {:?}",
                raw.primary_gid, raw.groups
            ));
        }
        Ok(Principal::new(
            raw.uid,
            raw.primary_gid,
            raw.groups,
            raw.display_name,
        ))
    }
}

impl From<Principal> for RawPrincipal {
    fn from(p: Principal) -> Self {
        RawPrincipal {
            uid: p.uid,
            primary_gid: p.primary_gid,
            groups: p.groups.into_iter().collect(),
            display_name: p.display_name,
        }
    }
}
