//! Per-job workers. The client worker hosts the guest node and the LGS; the
//! server worker hosts the guest link behind the LGC.

use super::{to_json, DeployOrder, Outbox, Process, WorkerCommand, WorkerReport};
use crate::bridge::{write_transcript, ConnMode, GuestConn, GuestMessage, Lgc, Lgs};
use crate::config::JobSpec;
use crate::guestfl::{AppConfig, GuestLink, GuestNode, NodeState};
use crate::reliable::{Failure, Inbound, ReliableCall, ReliableEndpoint};
use crate::store::RunStore;
use crate::tracking::{MetricRecord, MetricWriter, NullSink};
use crate::wire::{Envelope, MessageKind, MsgId, SiteAddress, SERVER_SITE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientPhase {
    /// Deployed, waiting for the start command.
    Ready,
    Running,
    /// Reported a failure; does nothing more.
    Stopped(String),
}

pub struct ClientWorker {
    ep: ReliableEndpoint,
    job: JobSpec,
    server_worker: SiteAddress,
    phase: ClientPhase,
    lgs: Lgs,
    mode: ConnMode,
    conn: Option<GuestConn>,
    node: Result<GuestNode, String>,
    writer: MetricWriter,
    tracking: bool,
    in_flight: Option<MsgId>,
    finishing: Option<MsgId>,
    store: Option<RunStore>,
    transcript_written: bool,
}

impl ClientWorker {
    pub fn new(order: &DeployOrder, mode: ConnMode, store: Option<RunStore>) -> Self {
        let addr = SiteAddress::new(order.site.clone(), order.job.job_id.clone());
        ClientWorker {
            writer: MetricWriter::new(&order.job.job_id, addr.clone(), order.job.reliable),
            ep: ReliableEndpoint::new(addr),
            server_worker: SiteAddress::new(SERVER_SITE, order.job.job_id.clone()),
            phase: ClientPhase::Ready,
            lgs: Lgs::new(),
            mode,
            conn: None,
            node: GuestNode::from_app(&order.app, &order.site).map_err(|e| e.to_string()),
            tracking: order.app.tracking,
            in_flight: None,
            finishing: None,
            store,
            transcript_written: false,
            job: order.job.clone(),
        }
    }

    pub fn phase(&self) -> &ClientPhase {
        &self.phase
    }

    pub fn lgs(&self) -> &Lgs {
        &self.lgs
    }

    /// Every metric record the guest produced here.
    pub fn journal(&self) -> &[MetricRecord] {
        self.writer.journal()
    }

    pub fn node_finished(&self) -> bool {
        self.node.as_ref().is_ok_and(|n| matches!(n.state(), NodeState::Finished))
    }

    fn site(&self) -> String {
        self.ep.address().site.clone()
    }

    fn report_failure(&mut self, now: u64, reason: String, timeout: bool, out: &mut Outbox) {
        if matches!(self.phase, ClientPhase::Stopped(_)) {
            return;
        }
        log::warn!("{}: {reason}", self.ep.address());
        self.phase = ClientPhase::Stopped(reason.clone());
        self.lgs.set_running(false);
        let report = WorkerReport::WorkerFailed { site: self.site(), reason, timeout };
        self.ep.call(
            now,
            SiteAddress::server(),
            MessageKind::Request,
            self.job.job_id.clone(),
            to_json(&report),
            self.job.reliable,
            &mut out.envelopes,
        );
    }

    fn start(&mut self, out_err: &mut Option<String>) {
        if self.phase != ClientPhase::Ready {
            return;
        }
        if let Err(e) = &self.node {
            *out_err = Some(format!("guest node could not start: {e}"));
            return;
        }
        self.lgs.set_running(true);
        match GuestConn::open(&mut self.lgs, self.mode) {
            Ok(conn) => {
                self.conn = Some(conn);
                self.phase = ClientPhase::Running;
            }
            Err(e) => *out_err = Some(e.to_string()),
        }
    }

    fn on_call_done(&mut self, now: u64, call: ReliableCall, out: &mut Outbox) {
        if self.in_flight != Some(call.msg_id) {
            return;
        }
        self.in_flight = None;
        if matches!(call.failure, Some(Failure::Aborted(_))) {
            return;
        }
        let Some(bytes) = call.ok_bytes() else {
            let timeout = matches!(call.failure, Some(Failure::SendTimeout | Failure::ResultTimeout));
            let reason = format!("{} {} failed: {}", call.kind, call.msg_id, call.error_text().unwrap_or_default());
            return self.report_failure(now, reason, timeout, out);
        };
        let reply = GuestMessage::decode(bytes)
            .and_then(|m| self.lgs.deliver(now, m))
            .and_then(|()| self.conn.as_mut().expect("running").recv(&mut self.lgs));
        match reply {
            Ok(Some(body)) => {
                let node = self.node.as_mut().expect("running node");
                self.writer.set_now(now);
                if self.tracking {
                    node.on_reply(now, &body, &mut self.writer);
                } else {
                    node.on_reply(now, &body, &mut NullSink);
                }
                // Round trips end rounds; ship what the node logged.
                self.writer.flush(now, &mut out.envelopes);
                if let NodeState::Failed(reason) = node.state().clone() {
                    self.report_failure(now, format!("guest node failed: {reason}"), false, out);
                }
            }
            Ok(None) => {}
            Err(e) => self.report_failure(now, format!("bridge: {e}"), false, out),
        }
    }

    fn pump_node(&mut self, now: u64, out: &mut Outbox) {
        if self.phase != ClientPhase::Running || self.in_flight.is_some() {
            return;
        }
        let Ok(node) = self.node.as_mut() else { return };
        let Some(body) = node.poll(now) else { return };
        let conn = self.conn.as_mut().expect("running");
        match conn.send(&mut self.lgs, now, &body) {
            Ok(msg) => {
                let id = self.ep.call(
                    now,
                    self.server_worker.clone(),
                    MessageKind::GuestFwd,
                    self.job.job_id.clone(),
                    msg.encode(),
                    self.job.reliable,
                    &mut out.envelopes,
                );
                self.in_flight = Some(id);
            }
            Err(e) => self.report_failure(now, format!("bridge: {e}"), false, out),
        }
    }

    fn try_finish(&mut self, now: u64, out: &mut Outbox) {
        let Some(id) = self.finishing else { return };
        if self.node_finished() && self.writer.is_drained() {
            self.finishing = None;
            self.ep.complete(now, id, Ok(b"{}".to_vec()), &mut out.envelopes);
            self.write_transcript();
        }
    }

    fn write_transcript(&mut self) {
        if self.transcript_written {
            return;
        }
        self.transcript_written = true;
        if let Some(store) = &self.store {
            let path = store.bridge_path(&self.job.job_id, &self.site());
            if let Err(e) = write_transcript(&path, self.lgs.transcript()) {
                log::error!("bridge transcript {}: {e}", path.display());
            }
        }
    }

    fn drain(&mut self, now: u64, out: &mut Outbox) {
        for call in self.ep.take_completed() {
            self.on_call_done(now, call, out);
        }
    }
}

impl Process for ClientWorker {
    fn address(&self) -> &SiteAddress {
        self.ep.address()
    }

    fn on_envelope(&mut self, now: u64, env: Envelope, out: &mut Outbox) {
        if env.kind == MessageKind::Ack && self.writer.on_ack(&env) {
            return self.try_finish(now, out);
        }
        match self.ep.handle(now, env, &mut out.envelopes) {
            Inbound::Execute(exec) if exec.kind == MessageKind::Status => {
                match serde_json::from_slice::<WorkerCommand>(&exec.payload) {
                    Ok(WorkerCommand::Running) => {
                        let mut err = None;
                        self.start(&mut err);
                        let result = match err {
                            None => Ok(b"{}".to_vec()),
                            Some(e) => Err(e),
                        };
                        self.ep.complete(now, exec.msg_id, result, &mut out.envelopes);
                    }
                    Ok(WorkerCommand::Finishing) => {
                        self.finishing = Some(exec.msg_id);
                        if let Ok(node) = &self.node {
                            if node.is_finished() {
                                self.writer.flush(now, &mut out.envelopes);
                            }
                        }
                    }
                    Err(e) => self.ep.complete(now, exec.msg_id, Err(format!("bad STATUS: {e}")), &mut out.envelopes),
                }
            }
            Inbound::Execute(exec) => {
                let err = Err(format!("{} is not served by a client worker", exec.kind));
                self.ep.complete(now, exec.msg_id, err, &mut out.envelopes);
            }
            Inbound::Consumed => {}
            Inbound::Other(env) => log::debug!("{}: unexpected {} dropped", self.ep.address(), env.kind),
        }
        self.drain(now, out);
        self.pump_node(now, out);
        self.try_finish(now, out);
    }

    fn poll(&mut self, now: u64, out: &mut Outbox) {
        self.ep.poll(now, &mut out.envelopes);
        self.drain(now, out);
        self.pump_node(now, out);
        self.writer.poll(now, &mut out.envelopes);
        self.try_finish(now, out);
    }

    fn next_wakeup(&self) -> Option<u64> {
        let node = match (&self.phase, &self.node, self.in_flight) {
            (ClientPhase::Running, Ok(n), None) => n.next_wakeup(),
            _ => None,
        };
        [self.ep.next_wakeup(), self.writer.next_wakeup(), node].into_iter().flatten().min()
    }

    fn on_kill(&mut self, now: u64) {
        self.ep.abort_calls(now, "worker stopped");
        self.write_transcript();
    }
}

pub struct ServerWorker {
    ep: ReliableEndpoint,
    job: JobSpec,
    lgc: Lgc<GuestLink>,
    reported: bool,
}

impl ServerWorker {
    pub fn new(job: &JobSpec, app: &AppConfig, sites: &[String]) -> Self {
        let link = GuestLink::new(app, sites.iter().cloned());
        ServerWorker {
            ep: ReliableEndpoint::new(SiteAddress::new(SERVER_SITE, job.job_id.clone())),
            lgc: Lgc::new(&job.bridge.link_target, link),
            job: job.clone(),
            reported: false,
        }
    }

    pub fn link(&self) -> Option<&GuestLink> {
        self.lgc.service()
    }

    fn forward(&mut self, peer: &str, payload: &[u8]) -> Option<Result<Vec<u8>, String>> {
        let msg = match GuestMessage::decode(payload) {
            Ok(m) => m,
            Err(e) => return Some(Err(e.to_string())),
        };
        match self.lgc.forward(peer, &msg) {
            Ok(Some(reply)) => Some(Ok(reply.encode())),
            Ok(None) => None,
            Err(e) => Some(Err(e.to_string())),
        }
    }

    fn maybe_report(&mut self, now: u64, out: &mut Outbox) {
        let Some(link) = self.lgc.service() else { return };
        if self.reported || !link.is_finished() {
            return;
        }
        self.reported = true;
        let report =
            WorkerReport::JobDone { history: link.history().clone(), failure: link.failure().map(str::to_string) };
        self.ep.call(
            now,
            SiteAddress::server(),
            MessageKind::Request,
            self.job.job_id.clone(),
            to_json(&report),
            self.job.reliable,
            &mut out.envelopes,
        );
    }
}

impl Process for ServerWorker {
    fn address(&self) -> &SiteAddress {
        self.ep.address()
    }

    fn on_envelope(&mut self, now: u64, env: Envelope, out: &mut Outbox) {
        match self.ep.handle(now, env, &mut out.envelopes) {
            Inbound::Execute(exec) => {
                let result = if exec.kind == MessageKind::GuestFwd {
                    self.forward(&exec.src.site, &exec.payload)
                } else {
                    Some(Err(format!("{} is not served by the server worker", exec.kind)))
                };
                // A withheld reply leaves the request pending for good.
                if let Some(result) = result {
                    self.ep.complete(now, exec.msg_id, result, &mut out.envelopes);
                }
            }
            Inbound::Consumed => {}
            Inbound::Other(env) => log::debug!("{}: unexpected {} dropped", self.ep.address(), env.kind),
        }
        self.ep.take_completed();
        self.maybe_report(now, out);
    }

    fn poll(&mut self, now: u64, out: &mut Outbox) {
        self.ep.poll(now, &mut out.envelopes);
        self.ep.take_completed();
    }

    fn next_wakeup(&self) -> Option<u64> {
        self.ep.next_wakeup()
    }

    fn on_kill(&mut self, now: u64) {
        self.ep.abort_calls(now, "worker stopped");
    }
}
