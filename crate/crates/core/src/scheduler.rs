//! A stand-in batch scheduler.
//!
//! Jobs get ports from a configured range, unique per node and handed out
//! lowest first. Launching a job starts a demo application bound to its
//! ports and registers the ports with the node's ident agent under the job
//! owner, so the firewall sees the application as the owner's process.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::net::IpAddr;
use std::sync::{Arc, Mutex};

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::{spawn_app, AppKind, RunningApp};
use crate::ident::IdentAgent;
use crate::principal::Principal;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("port range exhausted on {node}: {free} free, {requested} requested")]
    RangeExhausted {
        node: String,
        free: usize,
        requested: usize,
    },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("failed to start application: {0}")]
    SpawnFailure(String),
    #[error("no such job {0}")]
    NotFound(u64),
    #[error("job {0} belongs to another user")]
    NotOwner(u64),
    #[error("job {0} is not running")]
    NotRunning(u64),
    #[error("port count must be at least 1")]
    InvalidPortCount,
    #[error("invalid port range {low}-{high}")]
    InvalidRange { low: u32, high: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortRange {
    low: u16,
    high: u16,
}

impl PortRange {
    pub fn new(low: u32, high: u32) -> Result<Self, SchedulerError> {
        if low < 1 || low > high || high > 65535 {
            return Err(SchedulerError::InvalidRange { low, high });
        }
        Ok(Self {
            low: low as u16,
            high: high as u16,
        })
    }

    pub fn low(&self) -> u16 {
        self.low
    }

    pub fn high(&self) -> u16 {
        self.high
    }

    pub fn contains(&self, port: u16) -> bool {
        (self.low..=self.high).contains(&port)
    }

    /// Number of ports in the range.
    pub fn size(&self) -> usize {
        (self.high - self.low) as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Stopped,
    Failed,
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobState::Pending => "pending",
            JobState::Running => "running",
            JobState::Stopped => "stopped",
            JobState::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: u64,
    pub owner: Principal,
    pub node: String,
    pub ports: Vec<u16>,
    pub app_kind: AppKind,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl JobRecord {
    /// Portal link to the job's first port, with the token for notebooks.
    pub fn connect_link(&self) -> Result<String, SchedulerError> {
        if self.state != JobState::Running {
            return Err(SchedulerError::NotRunning(self.job_id));
        }
        let mut link = format!("/fw2/{}:{}/", self.node, self.ports[0]);
        if let Some(token) = &self.token {
            link.push_str("?token=");
            link.push_str(token);
        }
        Ok(link)
    }
}

/// Starts the process behind a job.
pub trait Launcher: Send + Sync {
    fn launch(
        &self,
        kind: AppKind,
        ip: IpAddr,
        ports: &[u16],
        token: Option<&str>,
    ) -> io::Result<Box<dyn AppHandle>>;
}

/// A launched application; dropped when the job stops.
pub trait AppHandle: Send + Sync {}

impl AppHandle for RunningApp {}

/// Runs the built-in demo apps in this process.
#[derive(Debug, Default, Clone, Copy)]
pub struct DemoLauncher;

impl Launcher for DemoLauncher {
    fn launch(
        &self,
        kind: AppKind,
        ip: IpAddr,
        ports: &[u16],
        token: Option<&str>,
    ) -> io::Result<Box<dyn AppHandle>> {
        Ok(Box::new(spawn_app(kind, ip, ports, token.map(str::to_string))?))
    }
}

/// A compute node as the scheduler sees it.
#[derive(Debug, Clone)]
pub struct Node {
    pub ip: IpAddr,
    pub agent: Arc<IdentAgent>,
}

struct Job {
    record: JobRecord,
    app: Option<Box<dyn AppHandle>>,
}

#[derive(Default)]
struct State {
    next_id: u64,
    jobs: BTreeMap<u64, Job>,
    in_use: HashMap<String, BTreeSet<u16>>,
}

pub struct Scheduler {
    range: PortRange,
    nodes: HashMap<String, Node>,
    launcher: Box<dyn Launcher>,
    state: Mutex<State>,
}

impl fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scheduler")
            .field("range", &self.range)
            .field("nodes", &self.nodes.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Scheduler {
    pub fn new(range: PortRange, nodes: HashMap<String, Node>, launcher: Box<dyn Launcher>) -> Self {
        Self {
            range,
            nodes,
            launcher,
            state: Mutex::new(State {
                next_id: 1,
                ..State::default()
            }),
        }
    }

    pub fn range(&self) -> PortRange {
        self.range
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.get(name)
    }

    /// Lowest `count` ports of the range not held by a live job on `node`.
    fn free_ports(&self, state: &State, node: &str, count: usize) -> Result<Vec<u16>, SchedulerError> {
        if count == 0 {
            return Err(SchedulerError::InvalidPortCount);
        }
        let used = state.in_use.get(node);
        let free: Vec<u16> = (self.range.low..=self.range.high)
            .filter(|p| used.is_none_or(|u| !u.contains(p)))
            .take(count)
            .collect();
        if free.len() < count {
            let total_free = self.range.size() - used.map_or(0, |u| u.len());
            return Err(SchedulerError::RangeExhausted {
                node: node.to_string(),
                free: total_free,
                requested: count,
            });
        }
        Ok(free)
    }

    /// Ports `assign` would hand out right now, without reserving them.
    pub fn assign_ports(&self, node: &str, count: usize) -> Result<Vec<u16>, SchedulerError> {
        let state = self.state.lock().unwrap();
        self.free_ports(&state, node, count)
    }

    pub fn launch(
        &self,
        owner: &Principal,
        node: &str,
        kind: AppKind,
        port_count: usize,
    ) -> Result<JobRecord, SchedulerError> {
        let target = self
            .nodes
            .get(node)
            .ok_or_else(|| SchedulerError::UnknownNode(node.to_string()))?;

        let mut state = self.state.lock().unwrap();
        let ports = self.free_ports(&state, node, port_count)?;
        let job_id = state.next_id;
        state.next_id += 1;

        let token = (kind == AppKind::TokenNotebook).then(new_token);
        let mut record = JobRecord {
            job_id,
            owner: owner.clone(),
            node: node.to_string(),
            ports: ports.clone(),
            app_kind: kind,
            state: JobState::Pending,
            token: None,
        };

        match self
            .launcher
            .launch(kind, target.ip, &ports, token.as_deref())
        {
            Ok(app) => {
                for &p in &ports {
                    target.agent.register(p, owner.uid(), owner.primary_gid());
                }
                state
                    .in_use
                    .entry(node.to_string())
                    .or_default()
                    .extend(ports.iter().copied());
                record.state = JobState::Running;
                record.token = token;
                state.jobs.insert(
                    job_id,
                    Job {
                        record: record.clone(),
                        app: Some(app),
                    },
                );
                Ok(record)
            }
            Err(e) => {
                record.state = JobState::Failed;
                state.jobs.insert(job_id, Job { record, app: None });
                Err(SchedulerError::SpawnFailure(e.to_string()))
            }
        }
    }

    /// Stops a job. Stopping a job that is no longer running succeeds.
    pub fn stop(&self, job_id: u64, principal: &Principal) -> Result<JobRecord, SchedulerError> {
        let mut state = self.state.lock().unwrap();
        let job = state
            .jobs
            .get_mut(&job_id)
            .ok_or(SchedulerError::NotFound(job_id))?;
        if job.record.owner.uid() != principal.uid() {
            return Err(SchedulerError::NotOwner(job_id));
        }
        if job.record.state != JobState::Running {
            return Ok(job.record.clone());
        }

        job.app.take();
        if let Some(node) = self.nodes.get(&job.record.node) {
            for &p in &job.record.ports {
                node.agent.unregister(p);
            }
        }
        job.record.state = JobState::Stopped;
        job.record.token = None;
        let record = job.record.clone();
        if let Some(used) = state.in_use.get_mut(&record.node) {
            for p in &record.ports {
                used.remove(p);
            }
        }
        Ok(record)
    }

    pub fn job(&self, job_id: u64) -> Option<JobRecord> {
        self.state
            .lock()
            .unwrap()
            .jobs
            .get(&job_id)
            .map(|j| j.record.clone())
    }

    /// The principal's jobs in every state, newest first.
    pub fn list_jobs(&self, principal: &Principal) -> Vec<JobRecord> {
        self.state
            .lock()
            .unwrap()
            .jobs
            .values()
            .rev()
            .filter(|j| j.record.owner.uid() == principal.uid())
            .map(|j| j.record.clone())
            .collect()
    }

    /// Every job in `Pending` or `Running`, across all users.
    pub fn live_jobs(&self) -> Vec<JobRecord> {
        self.state
            .lock()
            .unwrap()
            .jobs
            .values()
            .filter(|j| matches!(j.record.state, JobState::Pending | JobState::Running))
            .map(|j| j.record.clone())
            .collect()
    }
}

/// 48 hex characters from the OS random source.
fn new_token() -> String {
    let mut bytes = [0u8; 24];
    OsRng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}
