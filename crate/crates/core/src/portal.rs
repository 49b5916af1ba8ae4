//! Wires the registry, the agents, the scheduler and the gateway together.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinSet;
use tracing::info;

use crate::config::Config;
use crate::control::{ControlPlane, UserTable};
use crate::gateway::Gateway;
use crate::ident::{IdentAgent, IdentClient, IdentResolver};
use crate::registry::{RegistryError, RegistryStore};
use crate::scheduler::{DemoLauncher, Launcher, Node, PortRange, Scheduler};

#[derive(Debug, Error)]
pub enum StartError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("opening registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("binding {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

/// A started portal. Everything stops when this is dropped.
pub struct RunningPortal {
    addr: SocketAddr,
    agents: HashMap<String, (Arc<IdentAgent>, SocketAddr)>,
    gateway: Arc<Gateway>,
    registry: Arc<RegistryStore>,
    scheduler: Arc<Scheduler>,
    tasks: JoinSet<()>,
}

impl RunningPortal {
    /// Where the gateway listens.
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn agent(&self, node: &str) -> Option<&Arc<IdentAgent>> {
        self.agents.get(node).map(|(a, _)| a)
    }

    pub fn agent_addr(&self, node: &str) -> Option<SocketAddr> {
        self.agents.get(node).map(|(_, addr)| *addr)
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn registry(&self) -> &Arc<RegistryStore> {
        &self.registry
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.scheduler
    }

    pub async fn shutdown(mut self) {
        self.tasks.shutdown().await;
    }

    /// Runs until the process is interrupted.
    pub async fn wait(mut self) {
        while self.tasks.join_next().await.is_some() {}
    }
}

pub async fn start(config: &Config) -> Result<RunningPortal, StartError> {
    start_with_launcher(config, Box::new(DemoLauncher)).await
}

pub async fn start_with_launcher(
    config: &Config,
    launcher: Box<dyn Launcher>,
) -> Result<RunningPortal, StartError> {
    config
        .validate()
        .map_err(|e| StartError::Config(e.to_string()))?;
    let users = UserTable::new(&config.users).map_err(StartError::Config)?;
    let registry = Arc::new(RegistryStore::open(&config.registry.root)?);
    let mut tasks = JoinSet::new();

    let mut agents = HashMap::new();
    for (node, agent_cfg) in &config.agents {
        let listener = bind(agent_cfg.listen).await?;
        let addr = listener.local_addr().map_err(|source| StartError::Bind {
            addr: agent_cfg.listen,
            source,
        })?;
        let agent = IdentAgent::with_latency(node.clone(), Duration::from_millis(agent_cfg.latency_ms));
        tasks.spawn(agent.clone().serve(listener));
        info!(%node, %addr, "ident agent listening");
        agents.insert(node.clone(), (agent, addr));
    }

    let mut agent_addrs = HashMap::new();
    for (node, addr) in config.node_agents() {
        let addr = agents.get(&node).map(|(_, a)| *a).unwrap_or(addr);
        agent_addrs.insert(node, addr);
    }
    let node_ips = agent_addrs
        .iter()
        .map(|(n, a)| (n.clone(), a.ip()))
        .collect();
    let ttl = Duration::from_millis(config.ident.cache_ttl_ms);
    let resolver = Arc::new(IdentResolver::new(IdentClient::new(agent_addrs), ttl));

    let sched_nodes = agents
        .iter()
        .map(|(n, (agent, addr))| {
            (
                n.clone(),
                Node {
                    ip: addr.ip(),
                    agent: agent.clone(),
                },
            )
        })
        .collect();
    let [low, high] = config.scheduler.port_range;
    let range = PortRange::new(low, high).map_err(|e| StartError::Config(e.to_string()))?;
    let scheduler = Arc::new(Scheduler::new(range, sched_nodes, launcher));

    let control = ControlPlane::new(registry.clone(), scheduler.clone());
    let gateway = Arc::new(Gateway::new(
        users,
        registry.clone(),
        resolver,
        control,
        node_ips,
        config.gateway.ui_root.clone(),
    ));

    let listener = bind(config.gateway.listen).await?;
    let addr = listener.local_addr().map_err(|source| StartError::Bind {
        addr: config.gateway.listen,
        source,
    })?;
    let gw = gateway.clone();
    tasks.spawn(crate::http::serve(listener, move |req, peer| {
        let gw = gw.clone();
        async move { gw.handle(req, peer).await }
    }));
    info!(%addr, "gateway listening");

    Ok(RunningPortal {
        addr,
        agents,
        gateway,
        registry,
        scheduler,
        tasks,
    })
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, StartError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| StartError::Bind { addr, source })
}
