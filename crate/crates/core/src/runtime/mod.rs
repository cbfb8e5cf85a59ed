//! The multi-job system: a server control process (SCP) that schedules,
//! deploys, monitors and aborts jobs; one client control process (CCP) per
//! site that spawns job workers; and per-job workers that form the job
//! network.
//!
//! Every process is a state machine fed `(now, envelope)` and polled for
//! timers. Drivers ([`sim::Simulation`], [`sockets`]) own the transport and
//! apply the [`Effect`]s processes ask for.
//!
//! Addresses: the SCP is `server`, a CCP is `<site>`, a client worker is
//! `<site>/<job_id>`, the server worker is `server/<job_id>`. Every process
//! except the SCP holds a single link, to the SCP, which relays anything not
//! addressed to itself. Jobs with `messaging = direct` also get a link
//! between each client worker and the server worker.

pub mod ccp;
pub mod control;
pub mod scheduler;
pub mod scp;
pub mod sim;
pub mod sockets;
pub mod worker;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::config::{JobSpec, Messaging};
use crate::guestfl::{AppConfig, History};
use crate::store::JobEvent;
use crate::wire::{Envelope, SiteAddress};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Submitted,
    Scheduled,
    Deployed,
    Running,
    Finished,
    Aborted,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Finished | JobState::Aborted | JobState::Failed)
    }

    pub fn name(self) -> &'static str {
        match self {
            JobState::Submitted => "SUBMITTED",
            JobState::Scheduled => "SCHEDULED",
            JobState::Deployed => "DEPLOYED",
            JobState::Running => "RUNNING",
            JobState::Finished => "FINISHED",
            JobState::Aborted => "ABORTED",
            JobState::Failed => "FAILED",
        }
    }

    pub fn parse(s: &str) -> Option<JobState> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-site worker state as seen by the SCP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkerState {
    Deploying,
    Ready,
    Running,
    Finishing,
    Done,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    /// Participating sites, fixed at admission.
    pub sites: Vec<String>,
    pub per_site: BTreeMap<String, WorkerState>,
    pub submitted_t: u64,
    pub started_t: Option<u64>,
    pub ended_t: Option<u64>,
    pub failure_reason: Option<String>,
}

impl JobStatus {
    /// Rebuilds the coarse status from an event log.
    pub fn from_events(events: &[JobEvent]) -> Option<JobStatus> {
        let first = events.first()?;
        let mut st = JobStatus {
            job_id: first.job_id.clone(),
            state: JobState::Submitted,
            sites: Vec::new(),
            per_site: BTreeMap::new(),
            submitted_t: first.t_ms,
            started_t: None,
            ended_t: None,
            failure_reason: None,
        };
        for ev in events {
            let to = JobState::parse(&ev.to)?;
            st.state = to;
            if to == JobState::Running {
                st.started_t = Some(ev.t_ms);
            }
            if to.is_terminal() {
                st.ended_t = Some(ev.t_ms);
                if to != JobState::Finished {
                    st.failure_reason = ev.reason.clone();
                }
            }
        }
        Some(st)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("job {0:?} already exists")]
    DuplicateJobId(String),
    #[error("no app registered as {0:?}")]
    UnknownApp(String),
    #[error("job {job_id:?} needs {min_sites} sites but only {eligible} could ever take it")]
    NeverSchedulable { job_id: String, eligible: usize, min_sites: u32 },
    #[error("direct messaging is not permitted by the network policy")]
    DirectNotPermitted,
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("{addr} is not a member of job {job_id:?}")]
    NotAMember { job_id: String, addr: String },
    #[error("invalid job: {0}")]
    InvalidSpec(String),
}

impl RuntimeError {
    pub fn code(&self) -> &'static str {
        match self {
            RuntimeError::DuplicateJobId(_) => "DuplicateJobId",
            RuntimeError::UnknownApp(_) => "UnknownApp",
            RuntimeError::NeverSchedulable { .. } => "NeverSchedulable",
            RuntimeError::DirectNotPermitted => "DirectNotPermitted",
            RuntimeError::UnknownJob(_) => "UnknownJob",
            RuntimeError::NotAMember { .. } => "NotAMember",
            RuntimeError::InvalidSpec(_) => "InvalidSpec",
        }
    }
}

/// SUBMIT payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub job: JobSpec,
    #[serde(default)]
    pub app: Option<AppConfig>,
}

/// STATUS payload from a control client; no `job_id` lists every job.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusRequest {
    #[serde(default)]
    pub job_id: Option<String>,
}

/// ABORT payload, from a control client to the SCP or the SCP to a CCP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbortRequest {
    pub job_id: String,
    #[serde(default)]
    pub reason: Option<String>,
}

/// Result payload of every control-plane call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ControlReply {
    Status { status: JobStatus, events: Vec<JobEvent> },
    List { jobs: Vec<JobStatus> },
    Error { code: String, message: String },
}

impl ControlReply {
    pub fn error(e: &RuntimeError) -> Self {
        ControlReply::Error { code: e.code().to_string(), message: e.to_string() }
    }
}

/// DEPLOY payload, SCP to CCP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployOrder {
    pub job: JobSpec,
    pub app: AppConfig,
    pub site: String,
    pub sites: Vec<String>,
}

/// STATUS payload, SCP to a client worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkerCommand {
    /// Start the guest node.
    Running,
    /// Complete once the node is done and metrics are flushed.
    Finishing,
}

/// REQUEST payload, worker to SCP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WorkerReport {
    JobDone { history: History, failure: Option<String> },
    WorkerFailed { site: String, reason: String, timeout: bool },
}

/// Side effects a process asks its driver to perform.
#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    SpawnClient(DeployOrder),
    SpawnServer { job: JobSpec, app: AppConfig, sites: Vec<String> },
    Kill(SiteAddress),
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub envelopes: Vec<Envelope>,
    pub effects: Vec<Effect>,
}

impl Outbox {
    pub fn is_empty(&self) -> bool {
        self.envelopes.is_empty() && self.effects.is_empty()
    }
}

/// A runtime process as seen by a driver.
pub trait Process {
    fn address(&self) -> &SiteAddress;
    fn on_envelope(&mut self, now: u64, env: Envelope, out: &mut Outbox);
    fn poll(&mut self, now: u64, out: &mut Outbox);
    fn next_wakeup(&self) -> Option<u64>;
    /// Called once when the driver removes the process.
    fn on_kill(&mut self, _now: u64) {}
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("runtime payloads serialize")
}
