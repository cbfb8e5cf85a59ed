use std::collections::{BTreeMap, BTreeSet};

use super::scheduler::{admit, Demand, SiteCapacity};
use super::{
    to_json, AbortRequest, ControlReply, DeployOrder, Effect, JobState, JobStatus, Messaging, Outbox, Process,
    RuntimeError, StatusRequest, SubmitRequest, WorkerCommand, WorkerReport, WorkerState,
};
use crate::config::{JobSpec, ScenarioConfig};
use crate::guestfl::{history_json, AppConfig};
use crate::reliable::{Execution, Failure, Inbound, ReliableCall, ReliableEndpoint};
use crate::store::{JobEvent, RunStore};
use crate::tracking::{MetricSink, MetricsHub};
use crate::wire::{Envelope, MessageKind, MsgId, SiteAddress, SERVER_SITE};

/// Why the SCP dropped an envelope instead of relaying it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RouteStats {
    pub relayed: u64,
    pub unknown_job: u64,
    pub not_a_member: u64,
}

#[derive(Debug)]
struct SiteRecord {
    cap: SiteCapacity,
    last_seen: Option<u64>,
}

#[derive(Debug)]
struct JobRecord {
    spec: JobSpec,
    app: AppConfig,
    status: JobStatus,
    events: Vec<JobEvent>,
    reserved: bool,
    server_spawned: bool,
    history_written: bool,
    deploys: BTreeSet<String>,
    finishing: BTreeSet<String>,
}

#[derive(Clone, Debug)]
enum Purpose {
    Deploy { job: String, site: String },
    Start { job: String, site: String },
    Finish { job: String, site: String },
    Abort { job: String },
}

impl Purpose {
    fn job(&self) -> &str {
        match self {
            Purpose::Deploy { job, .. }
            | Purpose::Start { job, .. }
            | Purpose::Finish { job, .. }
            | Purpose::Abort { job } => job,
        }
    }
}

/// Server control process.
pub struct Scp {
    ep: ReliableEndpoint,
    scenario: ScenarioConfig,
    store: Option<RunStore>,
    apps: BTreeMap<String, AppConfig>,
    sites: BTreeMap<String, SiteRecord>,
    jobs: BTreeMap<String, JobRecord>,
    queue: Vec<String>,
    calls: BTreeMap<MsgId, Purpose>,
    metrics: MetricsHub,
    routes: RouteStats,
}

impl Scp {
    pub fn new(scenario: ScenarioConfig, store: Option<RunStore>) -> Self {
        let sites = scenario
            .sites
            .iter()
            .map(|s| {
                let cap = SiteCapacity { slots: s.slots, used: 0, online: false };
                (s.name.clone(), SiteRecord { cap, last_seen: None })
            })
            .collect();
        Scp {
            ep: ReliableEndpoint::new(SiteAddress::server()).with_retention(scenario.retention_ms),
            apps: scenario.apps.clone(),
            metrics: MetricsHub::new(scenario.retention_ms),
            scenario,
            store,
            sites,
            jobs: BTreeMap::new(),
            queue: Vec::new(),
            calls: BTreeMap::new(),
            routes: RouteStats::default(),
        }
    }

    pub fn status(&self, job_id: &str) -> Option<&JobStatus> {
        self.jobs.get(job_id).map(|j| &j.status)
    }

    pub fn events(&self, job_id: &str) -> Option<&[JobEvent]> {
        self.jobs.get(job_id).map(|j| j.events.as_slice())
    }

    pub fn list_jobs(&self) -> Vec<JobStatus> {
        self.jobs.values().map(|j| j.status.clone()).collect()
    }

    pub fn route_stats(&self) -> RouteStats {
        self.routes
    }

    pub fn metrics(&self) -> &MetricsHub {
        &self.metrics
    }

    /// (used, configured) slots per site.
    pub fn slot_usage(&self) -> BTreeMap<String, (u32, u32)> {
        self.sites.iter().map(|(n, s)| (n.clone(), (s.cap.used, s.cap.slots))).collect()
    }

    pub fn site_online(&self, site: &str) -> bool {
        self.sites.get(site).is_some_and(|s| s.cap.online)
    }

    pub fn has_calls_for(&self, job_id: &str) -> bool {
        self.calls.values().any(|p| p.job() == job_id)
    }

    /// Members of a live job network.
    fn members(&self, job_id: &str) -> Option<Vec<SiteAddress>> {
        let job = self.jobs.get(job_id)?;
        if !matches!(job.status.state, JobState::Deployed | JobState::Running) {
            return None;
        }
        let mut m: Vec<SiteAddress> = job.status.sites.iter().map(|s| SiteAddress::new(s.clone(), job_id)).collect();
        m.push(SiteAddress::new(SERVER_SITE, job_id));
        Some(m)
    }

    /// Validates a job-network envelope for relaying.
    pub fn check_route(&self, env: &Envelope) -> Result<(), RuntimeError> {
        let members = self.members(&env.job_id).ok_or_else(|| RuntimeError::UnknownJob(env.job_id.clone()))?;
        for addr in [&env.src, &env.dst] {
            if !members.contains(addr) {
                return Err(RuntimeError::NotAMember { job_id: env.job_id.clone(), addr: addr.to_string() });
            }
        }
        Ok(())
    }

    fn relay(&mut self, env: Envelope, out: &mut Outbox) {
        match self.check_route(&env) {
            Ok(()) => {
                self.routes.relayed += 1;
                out.envelopes.push(env);
            }
            Err(e) => {
                match e {
                    RuntimeError::NotAMember { .. } => self.routes.not_a_member += 1,
                    _ => self.routes.unknown_job += 1,
                }
                log::debug!("relay of {} {} dropped: {e}", env.kind, env.msg_id);
            }
        }
    }

    fn transition(&mut self, now: u64, job_id: &str, to: JobState, reason: Option<String>) {
        let Some(job) = self.jobs.get_mut(job_id) else { return };
        let from = job.status.state;
        if from == to || from.is_terminal() {
            return;
        }
        job.status.state = to;
        if to == JobState::Running {
            job.status.started_t = Some(now);
        }
        if to.is_terminal() {
            job.status.ended_t = Some(now);
            if to != JobState::Finished {
                job.status.failure_reason = reason.clone();
            }
        }
        let ev = JobEvent {
            t_ms: now,
            job_id: job_id.to_string(),
            from: Some(from.name().into()),
            to: to.name().into(),
            reason,
        };
        log::info!("job {job_id}: {from} -> {to}");
        if let Some(store) = &self.store {
            if let Err(e) = store.append_event(&ev) {
                log::error!("event log for {job_id}: {e}");
            }
        }
        job.events.push(ev);
    }

    /// Registers a job; it waits in SUBMITTED until the scheduler admits it.
    pub fn submit(&mut self, now: u64, req: SubmitRequest, out: &mut Outbox) -> Result<JobStatus, RuntimeError> {
        let SubmitRequest { job: spec, app } = req;
        spec.validate().map_err(|e| RuntimeError::InvalidSpec(e.to_string()))?;
        if self.jobs.get(&spec.job_id).is_some_and(|j| !j.status.state.is_terminal()) {
            return Err(RuntimeError::DuplicateJobId(spec.job_id));
        }
        let app = match app {
            Some(app) => {
                app.validate().map_err(|e| RuntimeError::InvalidSpec(e.to_string()))?;
                self.apps.insert(spec.app_ref.clone(), app.clone());
                app
            }
            None => {
                self.apps.get(&spec.app_ref).cloned().ok_or_else(|| RuntimeError::UnknownApp(spec.app_ref.clone()))?
            }
        };
        if spec.messaging == Messaging::Direct && !self.scenario.allow_direct {
            return Err(RuntimeError::DirectNotPermitted);
        }
        let demand = self.demand(&spec, &app);
        let possible = demand.ever_possible(&self.capacities());
        if possible < spec.min_sites as usize {
            return Err(RuntimeError::NeverSchedulable {
                job_id: spec.job_id,
                eligible: possible,
                min_sites: spec.min_sites,
            });
        }
        let job_id = spec.job_id.clone();
        if let Some(store) = &self.store {
            if let Err(e) = store.reset_job(&job_id) {
                log::error!("cannot prepare run directory for {job_id}: {e}");
            }
        }
        let status = JobStatus {
            job_id: job_id.clone(),
            state: JobState::Submitted,
            sites: Vec::new(),
            per_site: BTreeMap::new(),
            submitted_t: now,
            started_t: None,
            ended_t: None,
            failure_reason: None,
        };
        let ev = JobEvent {
            t_ms: now,
            job_id: job_id.clone(),
            from: None,
            to: JobState::Submitted.name().into(),
            reason: None,
        };
        if let Some(store) = &self.store {
            if let Err(e) = store.append_event(&ev) {
                log::error!("event log for {job_id}: {e}");
            }
        }
        let metrics_path = self.store.as_ref().map(|s| s.metrics_path(&job_id));
        match MetricSink::new(&job_id, metrics_path) {
            Ok(sink) => self.metrics.open(sink),
            Err(e) => log::error!("metrics log for {job_id}: {e}"),
        }
        self.jobs.insert(
            job_id.clone(),
            JobRecord {
                spec,
                app,
                status,
                events: vec![ev],
                reserved: false,
                server_spawned: false,
                history_written: false,
                deploys: BTreeSet::new(),
                finishing: BTreeSet::new(),
            },
        );
        log::info!("job {job_id}: SUBMITTED");
        self.queue.push(job_id.clone());
        self.schedule(now, out);
        Ok(self.jobs[&job_id].status.clone())
    }

    /// Sites a job may use: its filter, intersected with the sites the app
    /// has client data for.
    fn demand(&self, spec: &JobSpec, app: &AppConfig) -> Demand {
        let allowed = self
            .sites
            .keys()
            .filter(|s| spec.admits_site(s) && app.clients.contains_key(*s))
            .map(|s| (s.clone(), spec.slots_for(s)))
            .collect();
        Demand { job_id: spec.job_id.clone(), min_sites: spec.min_sites, allowed }
    }

    fn capacities(&self) -> BTreeMap<String, SiteCapacity> {
        self.sites.iter().map(|(n, s)| (n.clone(), s.cap.clone())).collect()
    }

    fn schedule(&mut self, now: u64, out: &mut Outbox) {
        let mut queue: Vec<Demand> =
            self.queue.iter().map(|id| self.demand(&self.jobs[id].spec, &self.jobs[id].app)).collect();
        let mut caps = self.capacities();
        let admitted = admit(&mut queue, &mut caps);
        for (name, cap) in caps {
            self.sites.get_mut(&name).expect("known site").cap = cap;
        }
        for (job_id, sites) in admitted {
            self.queue.retain(|j| *j != job_id);
            self.deploy(now, &job_id, sites, out);
        }
    }

    fn deploy(&mut self, now: u64, job_id: &str, sites: Vec<String>, out: &mut Outbox) {
        let job = self.jobs.get_mut(job_id).expect("admitted job exists");
        job.reserved = true;
        job.status.sites = sites.clone();
        job.status.per_site = sites.iter().map(|s| (s.clone(), WorkerState::Deploying)).collect();
        job.deploys = sites.iter().cloned().collect();
        let spec = job.spec.clone();
        let app = job.app.clone();
        self.transition(now, job_id, JobState::Scheduled, None);
        for site in &sites {
            let order = DeployOrder { job: spec.clone(), app: app.clone(), site: site.clone(), sites: sites.clone() };
            let id = self.ep.call(
                now,
                SiteAddress::control(site.clone()),
                MessageKind::Deploy,
                job_id,
                to_json(&order),
                spec.reliable,
                &mut out.envelopes,
            );
            self.calls.insert(id, Purpose::Deploy { job: job_id.to_string(), site: site.clone() });
        }
    }

    fn command_workers(&mut self, now: u64, job_id: &str, cmd: WorkerCommand, out: &mut Outbox) {
        let job = self.jobs.get_mut(job_id).expect("job exists");
        let timeouts = job.spec.reliable;
        let sites = job.status.sites.clone();
        if cmd == WorkerCommand::Finishing {
            job.finishing = sites.iter().cloned().collect();
            for s in &sites {
                job.status.per_site.insert(s.clone(), WorkerState::Finishing);
            }
        }
        for site in sites {
            let id = self.ep.call(
                now,
                SiteAddress::new(site.clone(), job_id),
                MessageKind::Status,
                job_id,
                to_json(&cmd),
                timeouts,
                &mut out.envelopes,
            );
            let purpose = match cmd {
                WorkerCommand::Running => Purpose::Start { job: job_id.to_string(), site },
                WorkerCommand::Finishing => Purpose::Finish { job: job_id.to_string(), site },
            };
            self.calls.insert(id, purpose);
        }
    }

    /// Ends a job in `state`. Terminal jobs are left as they are.
    pub fn terminate(&mut self, now: u64, job_id: &str, state: JobState, reason: Option<String>, out: &mut Outbox) {
        let Some(job) = self.jobs.get(job_id) else { return };
        if job.status.state.is_terminal() {
            return;
        }
        let was_reserved = job.reserved;
        let server_spawned = job.server_spawned;
        let sites = job.status.sites.clone();
        let spec = job.spec.clone();
        self.transition(now, job_id, state, reason.clone());
        self.queue.retain(|j| j != job_id);
        let job = self.jobs.get_mut(job_id).expect("job exists");
        job.reserved = false;
        for s in &sites {
            let ws = job.status.per_site.get_mut(s).expect("site state");
            if *ws != WorkerState::Done {
                *ws = WorkerState::Stopped;
            }
        }
        if was_reserved {
            for s in &sites {
                let rec = self.sites.get_mut(s).expect("known site");
                rec.cap.used -= spec.slots_for(s);
            }
        }
        let reason_text = reason.unwrap_or_else(|| state.name().to_string());
        self.ep.abort_job_calls(now, job_id, &reason_text);
        // Calls cut short here complete as Aborted and are ignored.
        self.calls.retain(|_, p| p.job() != job_id);
        if server_spawned {
            out.effects.push(Effect::Kill(SiteAddress::new(SERVER_SITE, job_id)));
        }
        for site in sites {
            let req = AbortRequest { job_id: job_id.to_string(), reason: Some(reason_text.clone()) };
            let id = self.ep.call(
                now,
                SiteAddress::control(site),
                MessageKind::Abort,
                job_id,
                to_json(&req),
                spec.reliable,
                &mut out.envelopes,
            );
            self.calls.insert(id, Purpose::Abort { job: job_id.to_string() });
        }
        self.metrics.mark_terminal(job_id, now);
        self.schedule(now, out);
    }

    fn on_call_done(&mut self, now: u64, call: ReliableCall, out: &mut Outbox) {
        let Some(purpose) = self.calls.remove(&call.msg_id) else { return };
        let failed = call.ok_bytes().is_none();
        if failed && matches!(call.failure, Some(Failure::Aborted(_))) {
            return;
        }
        let err = || format!("{} {} failed: {}", call.kind, call.msg_id, call.error_text().unwrap_or_default());
        match purpose {
            Purpose::Deploy { job, site } => {
                if failed {
                    return self.terminate(
                        now,
                        &job,
                        JobState::Aborted,
                        Some(format!("deploy to {site}: {}", err())),
                        out,
                    );
                }
                let Some(rec) = self.jobs.get_mut(&job) else { return };
                if rec.status.state != JobState::Scheduled {
                    return;
                }
                rec.status.per_site.insert(site.clone(), WorkerState::Ready);
                rec.deploys.remove(&site);
                if rec.deploys.is_empty() {
                    rec.server_spawned = true;
                    out.effects.push(Effect::SpawnServer {
                        job: rec.spec.clone(),
                        app: rec.app.clone(),
                        sites: rec.status.sites.clone(),
                    });
                    self.transition(now, &job, JobState::Deployed, None);
                    self.transition(now, &job, JobState::Running, None);
                    self.command_workers(now, &job, WorkerCommand::Running, out);
                }
            }
            Purpose::Start { job, site } => {
                if failed {
                    return self.terminate(now, &job, JobState::Aborted, Some(format!("start {site}: {}", err())), out);
                }
                if let Some(rec) = self.jobs.get_mut(&job) {
                    if rec.status.state == JobState::Running
                        && rec.status.per_site.get(&site) == Some(&WorkerState::Ready)
                    {
                        rec.status.per_site.insert(site, WorkerState::Running);
                    }
                }
            }
            Purpose::Finish { job, site } => {
                if failed {
                    return self.terminate(
                        now,
                        &job,
                        JobState::Aborted,
                        Some(format!("finish {site}: {}", err())),
                        out,
                    );
                }
                let Some(rec) = self.jobs.get_mut(&job) else { return };
                rec.status.per_site.insert(site.clone(), WorkerState::Done);
                rec.finishing.remove(&site);
                if rec.finishing.is_empty() && rec.status.state == JobState::Running {
                    self.terminate(now, &job, JobState::Finished, None, out);
                }
            }
            Purpose::Abort { .. } => {
                if failed {
                    log::warn!("{}", err());
                }
            }
        }
    }

    fn drain_completed(&mut self, now: u64, out: &mut Outbox) {
        loop {
            let done = self.ep.take_completed();
            if done.is_empty() {
                break;
            }
            for call in done {
                self.on_call_done(now, call, out);
            }
        }
    }

    fn execute(&mut self, now: u64, exec: &Execution, out: &mut Outbox) -> Result<Vec<u8>, String> {
        let bad = |e: serde_json::Error| format!("bad {} payload: {e}", exec.kind);
        match exec.kind {
            MessageKind::Submit => {
                let req: SubmitRequest = serde_json::from_slice(&exec.payload).map_err(bad)?;
                let job_id = req.job.job_id.clone();
                let reply = match self.submit(now, req, out) {
                    Ok(_) => self.status_reply(&job_id),
                    Err(e) => ControlReply::error(&e),
                };
                Ok(to_json(&reply))
            }
            MessageKind::Status => {
                let req: StatusRequest = serde_json::from_slice(&exec.payload).map_err(bad)?;
                let reply = match req.job_id {
                    None => ControlReply::List { jobs: self.list_jobs() },
                    Some(id) => self.status_reply(&id),
                };
                Ok(to_json(&reply))
            }
            MessageKind::Abort => {
                let req: AbortRequest = serde_json::from_slice(&exec.payload).map_err(bad)?;
                Ok(to_json(&self.abort_job(now, &req.job_id, req.reason, out)))
            }
            MessageKind::Request => {
                let report: WorkerReport = serde_json::from_slice(&exec.payload).map_err(bad)?;
                self.on_report(now, &exec.job_id, &exec.src, report, out);
                Ok(b"{}".to_vec())
            }
            k => Err(format!("{k} is not served by the server control process")),
        }
    }

    fn status_reply(&self, job_id: &str) -> ControlReply {
        match self.jobs.get(job_id) {
            Some(j) => ControlReply::Status { status: j.status.clone(), events: j.events.clone() },
            None => ControlReply::error(&RuntimeError::UnknownJob(job_id.to_string())),
        }
    }

    /// Aborts a job; terminal jobs are returned unchanged.
    pub fn abort_job(&mut self, now: u64, job_id: &str, reason: Option<String>, out: &mut Outbox) -> ControlReply {
        if !self.jobs.contains_key(job_id) {
            return ControlReply::error(&RuntimeError::UnknownJob(job_id.to_string()));
        }
        let reason = reason.unwrap_or_else(|| "aborted by operator".to_string());
        self.terminate(now, job_id, JobState::Aborted, Some(reason), out);
        self.status_reply(job_id)
    }

    fn on_report(&mut self, now: u64, job_id: &str, src: &SiteAddress, report: WorkerReport, out: &mut Outbox) {
        let Some(rec) = self.jobs.get_mut(job_id) else { return };
        if src.worker != job_id {
            log::warn!("report for {job_id} from {src} ignored");
            return;
        }
        match report {
            WorkerReport::JobDone { history, failure } => {
                if !rec.history_written {
                    rec.history_written = true;
                    if let Some(store) = &self.store {
                        if let Err(e) = store.write_bytes(&store.history_path(job_id), &history_json(&history)) {
                            log::error!("history for {job_id}: {e}");
                        }
                    }
                }
                if rec.status.state != JobState::Running || !rec.finishing.is_empty() {
                    return;
                }
                match failure {
                    Some(reason) => self.terminate(now, job_id, JobState::Failed, Some(reason), out),
                    None => self.command_workers(now, job_id, WorkerCommand::Finishing, out),
                }
            }
            WorkerReport::WorkerFailed { site, reason, timeout } => {
                let state = if timeout { JobState::Aborted } else { JobState::Failed };
                self.terminate(now, job_id, state, Some(format!("{site}: {reason}")), out);
            }
        }
    }

    fn offline_deadline(&self, rec: &SiteRecord) -> Option<u64> {
        let hb = self.scenario.heartbeat;
        match (rec.cap.online, rec.last_seen) {
            (true, Some(t)) => Some(t + hb.interval_ms * hb.missed_limit as u64),
            _ => None,
        }
    }

    fn check_liveness(&mut self, now: u64, out: &mut Outbox) {
        let limit = self.scenario.heartbeat.interval_ms * self.scenario.heartbeat.missed_limit as u64;
        let expired: Vec<String> = self
            .sites
            .iter()
            .filter(|(_, r)| self.offline_deadline(r).is_some_and(|d| now >= d))
            .map(|(n, _)| n.clone())
            .collect();
        for site in expired {
            self.sites.get_mut(&site).expect("known site").cap.online = false;
            log::warn!("site {site} offline");
            let affected: Vec<String> = self
                .jobs
                .values()
                .filter(|j| !j.status.state.is_terminal() && j.status.sites.contains(&site))
                .map(|j| j.status.job_id.clone())
                .collect();
            for job in affected {
                let reason = format!("site {site} offline: no traffic for {limit} ms");
                self.terminate(now, &job, JobState::Aborted, Some(reason), out);
            }
        }
    }

    fn saw_site(&mut self, now: u64, site: &str, out: &mut Outbox) {
        let Some(rec) = self.sites.get_mut(site) else { return };
        rec.last_seen = Some(now);
        if !rec.cap.online {
            rec.cap.online = true;
            log::info!("site {site} online");
            self.schedule(now, out);
        }
    }
}

impl Process for Scp {
    fn address(&self) -> &SiteAddress {
        self.ep.address()
    }

    fn on_envelope(&mut self, now: u64, env: Envelope, out: &mut Outbox) {
        self.check_liveness(now, out);
        if !env.src.is_server_site() {
            self.saw_site(now, &env.src.site.clone(), out);
        }
        if env.dst != *self.ep.address() {
            return self.relay(env, out);
        }
        match env.kind {
            MessageKind::Heartbeat => {
                let ack = env.reply(self.ep.next_msg_id(), MessageKind::Ack, Vec::new());
                out.envelopes.push(ack);
            }
            MessageKind::Metric => {
                let id = self.ep.next_msg_id();
                self.metrics.handle(now, &env, id, &mut out.envelopes);
            }
            _ => match self.ep.handle(now, env, &mut out.envelopes) {
                Inbound::Execute(exec) => {
                    let result = self.execute(now, &exec, out);
                    self.ep.complete(now, exec.msg_id, result, &mut out.envelopes);
                }
                Inbound::Consumed => {}
                Inbound::Other(env) => log::debug!("unexpected {} from {} dropped", env.kind, env.src),
            },
        }
        self.drain_completed(now, out);
    }

    fn poll(&mut self, now: u64, out: &mut Outbox) {
        self.ep.poll(now, &mut out.envelopes);
        self.drain_completed(now, out);
        self.check_liveness(now, out);
        self.ep.gc_results(now);
        self.metrics.gc(now);
    }

    fn next_wakeup(&self) -> Option<u64> {
        let liveness = self.sites.values().filter_map(|r| self.offline_deadline(r)).min();
        [self.ep.next_wakeup(), liveness].into_iter().flatten().min()
    }
}
