//! Single-process driver over the simulated fabric.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};

use super::ccp::Ccp;
use super::control::ControlClient;
use super::scp::Scp;
use super::worker::{ClientWorker, ServerWorker};
use super::{ControlReply, Effect, JobState, JobStatus, Messaging, Outbox, Process, SubmitRequest};
use crate::bridge::ConnMode;
use crate::config::{ConfigError, JobSpec, ScenarioConfig};
use crate::guestfl::AppConfig;
use crate::netsim::{Fabric, LinkId, LinkPolicy};
use crate::reliable::Timeouts;
use crate::store::RunStore;
use crate::wire::{decode_envelope, encode_envelope, Envelope, MsgId, SiteAddress, SERVER_SITE};

/// Steps taken at one instant before the driver assumes a livelock.
const MAX_STEPS_PER_INSTANT: u32 = 100_000;

pub enum Node {
    Scp(Scp),
    Ccp(Ccp),
    Client(Box<ClientWorker>),
    Server(Box<ServerWorker>),
    Control(ControlClient),
}

impl Node {
    pub(crate) fn process(&mut self) -> &mut dyn Process {
        match self {
            Node::Scp(p) => p,
            Node::Ccp(p) => p,
            Node::Client(p) => p.as_mut(),
            Node::Server(p) => p.as_mut(),
            Node::Control(p) => p,
        }
    }

    pub(crate) fn wakeup(&self) -> Option<u64> {
        match self {
            Node::Scp(p) => p.next_wakeup(),
            Node::Ccp(p) => p.next_wakeup(),
            Node::Client(p) => p.next_wakeup(),
            Node::Server(p) => p.next_wakeup(),
            Node::Control(p) => p.next_wakeup(),
        }
    }
}

/// Invariant checks made on every delivery and every step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Audit {
    pub deliveries: u64,
    /// Envelopes of job A delivered to a worker of another job.
    pub cross_job: u64,
    /// Steps at which some site used more slots than it has.
    pub slot_violations: u64,
    /// Frames that reached an address with no live process.
    pub undeliverable: u64,
}

pub struct Simulation {
    scenario: ScenarioConfig,
    fabric: Fabric,
    now: u64,
    nodes: BTreeMap<SiteAddress, Node>,
    links: BTreeMap<LinkId, (SiteAddress, SiteAddress)>,
    store: Option<RunStore>,
    mode: ConnMode,
    partitioned: BTreeSet<String>,
    edges: Vec<u64>,
    audit: Audit,
    steps_at_now: u32,
}

fn scp_addr() -> SiteAddress {
    SiteAddress::server()
}

fn control_addr() -> SiteAddress {
    SiteAddress::control("cli")
}

impl Simulation {
    pub fn new(scenario: ScenarioConfig, store: Option<RunStore>) -> Result<Self, ConfigError> {
        scenario.validate()?;
        let mut sim = Simulation {
            fabric: Fabric::new(),
            now: 0,
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            store: store.clone(),
            mode: ConnMode::InProc,
            partitioned: BTreeSet::new(),
            edges: scenario.partition_edges(),
            audit: Audit::default(),
            steps_at_now: 0,
            scenario,
        };
        sim.nodes.insert(scp_addr(), Node::Scp(Scp::new(sim.scenario.clone(), store)));
        let control = ControlClient::new(control_addr(), Timeouts::default());
        sim.nodes.insert(control_addr(), Node::Control(control));
        sim.connect(control_addr(), scp_addr(), LinkPolicy::lossless());
        let retry = Timeouts::default().retry_ms;
        for site in sim.scenario.sites.clone() {
            let addr = SiteAddress::control(site.name.clone());
            sim.nodes.insert(addr.clone(), Node::Ccp(Ccp::new(&site.name, sim.scenario.heartbeat, retry)));
            let policy = site.link.with_seed(sim.scenario.site_link_seed(&site.name));
            sim.connect(addr, scp_addr(), policy);
        }
        sim.apply_partitions();
        Ok(sim)
    }

    /// Guest nodes reach the LGS as a separate process would, through a
    /// framed byte stream split into `chunk`-byte pieces.
    pub fn with_stream_connections(mut self, chunk: usize) -> Self {
        self.mode = ConnMode::Stream(chunk);
        self
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn audit(&self) -> Audit {
        self.audit
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn scp(&self) -> &Scp {
        match self.nodes.get(&scp_addr()) {
            Some(Node::Scp(s)) => s,
            _ => unreachable!("the SCP is never removed"),
        }
    }

    fn control(&mut self) -> &mut ControlClient {
        match self.nodes.get_mut(&control_addr()) {
            Some(Node::Control(c)) => c,
            _ => unreachable!("the control client is never removed"),
        }
    }

    pub fn status(&self, job_id: &str) -> Option<JobStatus> {
        self.scp().status(job_id).cloned()
    }

    pub fn client_worker(&self, site: &str, job_id: &str) -> Option<&ClientWorker> {
        match self.nodes.get(&SiteAddress::new(site, job_id)) {
            Some(Node::Client(w)) => Some(w),
            _ => None,
        }
    }

    pub fn server_worker(&self, job_id: &str) -> Option<&ServerWorker> {
        match self.nodes.get(&SiteAddress::new(SERVER_SITE, job_id)) {
            Some(Node::Server(w)) => Some(w),
            _ => None,
        }
    }

    /// Addresses of live job workers.
    pub fn workers(&self) -> Vec<SiteAddress> {
        self.nodes.keys().filter(|a| !a.worker.is_empty()).cloned().collect()
    }

    fn connect(&mut self, a: SiteAddress, b: SiteAddress, policy: LinkPolicy) {
        match self.fabric.connect(a.clone(), b.clone(), policy) {
            Ok(id) => {
                let cut = self.partitioned.contains(&a.site) || self.partitioned.contains(&b.site);
                if cut {
                    self.fabric.set_partitioned(id, true);
                }
                self.links.insert(id, (a, b));
            }
            Err(e) => log::error!("link {a} <-> {b}: {e}"),
        }
    }

    fn apply_partitions(&mut self) {
        let now = self.now;
        let cut: BTreeSet<String> = self
            .scenario
            .sites
            .iter()
            .map(|s| s.name.clone())
            .filter(|s| self.scenario.partitioned_at(s, now))
            .collect();
        if cut == self.partitioned {
            return;
        }
        for (id, (a, b)) in &self.links {
            let p = cut.contains(&a.site) || cut.contains(&b.site);
            self.fabric.set_partitioned(*id, p);
        }
        self.partitioned = cut;
        self.edges.retain(|&t| t > now);
    }

    /// Submits through the control plane; the reply comes later.
    pub fn submit(&mut self, job: JobSpec, app: Option<AppConfig>) -> MsgId {
        let now = self.now;
        let mut out = Outbox::default();
        let id = self.control().submit(now, &SubmitRequest { job, app }, &mut out);
        self.apply(&control_addr(), out);
        id
    }

    pub fn request_abort(&mut self, job_id: &str, reason: Option<String>) -> MsgId {
        let now = self.now;
        let mut out = Outbox::default();
        let id = self.control().abort(now, job_id, reason, &mut out);
        self.apply(&control_addr(), out);
        id
    }

    pub fn request_status(&mut self, job_id: Option<&str>) -> MsgId {
        let now = self.now;
        let mut out = Outbox::default();
        let id = self.control().status(now, job_id, &mut out);
        self.apply(&control_addr(), out);
        id
    }

    pub fn take_reply(&mut self, id: MsgId) -> Option<Result<ControlReply, String>> {
        self.control().take_reply(id)
    }

    fn send(&mut self, from: &SiteAddress, env: Envelope) {
        let frame = match encode_envelope(&env) {
            Ok(f) => f,
            Err(e) => {
                log::error!("{from}: cannot encode {} {}: {e}", env.kind, env.msg_id);
                return;
            }
        };
        let next_hop = if self.fabric.link_between(from, &env.dst).is_some() {
            env.dst.clone()
        } else if *from != scp_addr() {
            scp_addr()
        } else {
            self.audit.undeliverable += 1;
            log::debug!("no link from the server to {}", env.dst);
            return;
        };
        if let Err(e) = self.fabric.send_to(from, &next_hop, frame) {
            log::debug!("{from} -> {next_hop}: {e}");
        }
    }

    fn apply(&mut self, from: &SiteAddress, out: Outbox) {
        for env in out.envelopes {
            self.send(from, env);
        }
        for effect in out.effects {
            self.apply_effect(effect);
        }
    }

    fn apply_effect(&mut self, effect: Effect) {
        match effect {
            Effect::SpawnClient(order) => {
                let addr = SiteAddress::new(order.site.clone(), order.job.job_id.clone());
                if self.nodes.contains_key(&addr) {
                    return;
                }
                let worker = ClientWorker::new(&order, self.mode, self.store.clone());
                self.nodes.insert(addr.clone(), Node::Client(Box::new(worker)));
                let seed = self.scenario.worker_link_seed(&order.site, &order.job.job_id, order.job.seed);
                let policy = self.scenario.site(&order.site).map(|s| s.link.with_seed(seed)).unwrap_or_default();
                self.connect(addr, scp_addr(), policy);
            }
            Effect::SpawnServer { job, app, sites } => {
                let addr = SiteAddress::new(SERVER_SITE, job.job_id.clone());
                if self.nodes.contains_key(&addr) {
                    return;
                }
                self.nodes.insert(addr.clone(), Node::Server(Box::new(ServerWorker::new(&job, &app, &sites))));
                self.connect(addr.clone(), scp_addr(), LinkPolicy::lossless());
                if job.messaging == Messaging::Direct {
                    for site in &sites {
                        let client = SiteAddress::new(site.clone(), job.job_id.clone());
                        if self.nodes.contains_key(&client) {
                            let seed = !self.scenario.worker_link_seed(site, &job.job_id, job.seed);
                            let policy = self.scenario.direct_link.with_seed(seed);
                            self.connect(client, addr.clone(), policy);
                        }
                    }
                }
            }
            Effect::Kill(addr) => {
                if let Some(mut node) = self.nodes.remove(&addr) {
                    node.process().on_kill(self.now);
                }
                let dead: Vec<LinkId> =
                    self.links.iter().filter(|(_, (a, b))| *a == addr || *b == addr).map(|(id, _)| *id).collect();
                for id in dead {
                    self.fabric.close(id);
                    self.links.remove(&id);
                }
            }
        }
    }

    fn next_event(&self) -> Option<u64> {
        let wake = self.nodes.values().filter_map(Node::wakeup).min();
        [self.fabric.next_due(), wake, self.edges.first().copied()].into_iter().flatten().min()
    }

    /// Advances to the next instant with work and performs it. Returns false
    /// when nothing is left to do.
    pub fn step(&mut self) -> bool {
        let Some(t) = self.next_event() else { return false };
        let t = t.max(self.now);
        if t == self.now {
            self.steps_at_now += 1;
            assert!(self.steps_at_now < MAX_STEPS_PER_INSTANT, "simulation livelock at t={}", self.now);
        } else {
            self.steps_at_now = 0;
        }
        let deliveries = self.fabric.step(t - self.now);
        self.now = t;
        if self.edges.first().is_some_and(|&e| e <= t) {
            self.apply_partitions();
        }
        for d in deliveries {
            let env = match decode_envelope(&d.frame) {
                Ok(env) => env,
                Err(e) => {
                    log::warn!("undecodable frame for {}: {e}", d.dst);
                    continue;
                }
            };
            self.audit.deliveries += 1;
            if !d.dst.worker.is_empty() && env.job_id != d.dst.worker {
                self.audit.cross_job += 1;
            }
            let Some(node) = self.nodes.get_mut(&d.dst) else {
                self.audit.undeliverable += 1;
                continue;
            };
            let mut out = Outbox::default();
            node.process().on_envelope(t, env, &mut out);
            self.apply(&d.dst, out);
        }
        let addrs: Vec<SiteAddress> = self.nodes.keys().cloned().collect();
        for addr in addrs {
            let Some(node) = self.nodes.get_mut(&addr) else { continue };
            if node.wakeup().is_some_and(|w| w <= t) {
                let mut out = Outbox::default();
                node.process().poll(t, &mut out);
                self.apply(&addr, out);
            }
        }
        if self.scp().slot_usage().values().any(|(used, slots)| used > slots) {
            self.audit.slot_violations += 1;
        }
        true
    }

    /// Steps until `done` holds or simulated time passes `deadline`.
    pub fn run_until(&mut self, deadline: u64, mut done: impl FnMut(&Simulation) -> bool) -> bool {
        while !done(self) {
            match self.next_event() {
                Some(t) if t <= deadline => {
                    self.step();
                }
                _ => return done(self),
            }
        }
        true
    }

    fn is_terminal(&self, job_id: &str) -> bool {
        self.status(job_id).is_some_and(|s| s.state.is_terminal())
    }

    /// Steps until every listed job is terminal, then lets teardown traffic
    /// settle.
    pub fn run_jobs(&mut self, job_ids: &[String]) -> bool {
        let horizon = self.scenario.horizon_ms;
        let ok = self.run_until(horizon, |s| job_ids.iter().all(|j| s.is_terminal(j)));
        let grace = self.now.saturating_add(120_000).min(horizon);
        self.run_until(grace, |s| {
            job_ids.iter().all(|j| !s.scp().has_calls_for(j) && s.workers().iter().all(|w| w.worker != *j))
        });
        ok
    }

    /// Submits one job and runs it to a terminal state. `Err` carries a
    /// rejected submission.
    pub fn run_job(&mut self, job: JobSpec, app: Option<AppConfig>) -> Result<JobStatus, ControlReply> {
        let job_id = job.job_id.clone();
        let call = self.submit(job, app);
        let horizon = self.scenario.horizon_ms;
        self.run_until(horizon, |s| s.control_ref_has_reply(call));
        match self.take_reply(call) {
            Some(Ok(ControlReply::Status { .. })) => {}
            Some(Ok(other)) => return Err(other),
            Some(Err(e)) => return Err(ControlReply::Error { code: "ControlPlane".into(), message: e }),
            None => {
                return Err(ControlReply::Error { code: "ControlPlane".into(), message: "no reply to SUBMIT".into() })
            }
        }
        self.run_jobs(std::slice::from_ref(&job_id));
        self.finish_job(&job_id);
        Ok(self.status(&job_id).expect("submitted job has a status"))
    }

    fn control_ref_has_reply(&self, id: MsgId) -> bool {
        match self.nodes.get(&control_addr()) {
            Some(Node::Control(c)) => c.has_reply(id),
            _ => false,
        }
    }

    /// Stops leftover workers of `job_id` and writes its fabric trace.
    pub fn finish_job(&mut self, job_id: &str) {
        let leftovers: Vec<SiteAddress> = self.workers().into_iter().filter(|w| w.worker == job_id).collect();
        for addr in leftovers {
            self.apply_effect(Effect::Kill(addr));
        }
        if let Some(store) = &self.store {
            let path = store.trace_path(job_id);
            let write = || -> std::io::Result<()> {
                let mut w = BufWriter::new(File::create(&path)?);
                for rec in self.fabric.trace().iter().filter(|r| r.job_id == job_id) {
                    serde_json::to_writer(&mut w, rec)?;
                    w.write_all(b"\n")?;
                }
                w.flush()
            };
            if let Err(e) = write() {
                log::error!("trace {}: {e}", path.display());
            }
        }
    }

    pub fn state_of(&self, job_id: &str) -> Option<JobState> {
        self.status(job_id).map(|s| s.state)
    }
}
