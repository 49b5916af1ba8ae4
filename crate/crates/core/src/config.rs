//! Service configuration, read from TOML.
//!
//! ```toml
//! [gateway]
//! listen = "127.0.0.1:8080"
//! # ui_root = "ui/dist"
//!
//! [registry]
//! root = "/var/lib/portal/forwards"
//!
//! [ident]
//! cache_ttl_ms = 2000        # 0 disables the cache
//!
//! [scheduler]
//! port_range = [18000, 18049]
//!
//! [nodes]                    # node name -> address of its ident agent
//! node-1 = "127.0.10.1:7113"
//!
//! [agents.node-1]            # agents this process runs itself
//! listen = "127.0.10.1:7113"
//!
//! [[users]]
//! token = "alice-secret"
//! uid = 100
//! gid = 100
//! groups = [100, 200]
//! name = "alice"
//! ```
//!
//! A node's applications are reached on the IP address of its agent.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::principal::Principal;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub gateway: GatewayConfig,
    pub registry: RegistryConfig,
    #[serde(default)]
    pub ident: IdentConfig,
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub nodes: BTreeMap<String, SocketAddr>,
    #[serde(default)]
    pub agents: BTreeMap<String, AgentConfig>,
    #[serde(default)]
    pub users: Vec<UserEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    #[serde(default)]
    pub ui_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentConfig {
    #[serde(default = "default_ttl_ms")]
    pub cache_ttl_ms: u64,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self {
            cache_ttl_ms: default_ttl_ms(),
        }
    }
}

fn default_ttl_ms() -> u64 {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub port_range: [u32; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub listen: SocketAddr,
    /// Delay added before every answer, modelling the round trip to a
    /// remote node.
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEntry {
    pub token: String,
    pub uid: u32,
    pub gid: u32,
    #[serde(default)]
    pub groups: Vec<u32>,
    #[serde(default)]
    pub name: String,
}

impl UserEntry {
    pub fn principal(&self) -> Principal {
        Principal::new(self.uid, self.gid, self.groups.iter().copied(), self.name.clone())
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let [low, high] = self.scheduler.port_range;
        crate::scheduler::PortRange::new(low, high)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for name in self.nodes.keys().chain(self.agents.keys()) {
            crate::route::Destination::new(name.clone(), 1)
                .map_err(|_| ConfigError::Invalid(format!("bad node name {name:?}")))?;
        }
        Ok(())
    }

    /// Every node this process knows, with the address its agent is
    /// configured at.
    pub fn node_agents(&self) -> BTreeMap<String, SocketAddr> {
        let mut all = self.nodes.clone();
        for (name, agent) in &self.agents {
            all.entry(name.clone()).or_insert(agent.listen);
        }
        all
    }
}
