use std::collections::BTreeSet;

use super::{AbortRequest, DeployOrder, Effect, Outbox, Process};
use crate::config::HeartbeatConfig;
use crate::reliable::{Inbound, ReliableEndpoint};
use crate::wire::{Envelope, MessageKind, MsgId, SiteAddress};

#[derive(Debug)]
struct Beat {
    id: MsgId,
    attempt: u32,
    acked: bool,
    next_resend: u64,
}

/// Client control process for one site: spawns and stops job workers and
/// keeps the site alive at the server with heartbeats. A heartbeat is resent
/// every `retry_ms` until the server ACKs it or the next one is due.
pub struct Ccp {
    ep: ReliableEndpoint,
    heartbeat: HeartbeatConfig,
    retry_ms: u64,
    next_beat: u64,
    beat: Option<Beat>,
    workers: BTreeSet<String>,
}

impl Ccp {
    pub fn new(site: &str, heartbeat: HeartbeatConfig, retry_ms: u64) -> Self {
        Ccp {
            ep: ReliableEndpoint::new(SiteAddress::control(site)),
            heartbeat,
            retry_ms,
            next_beat: 0,
            beat: None,
            workers: BTreeSet::new(),
        }
    }

    pub fn site(&self) -> &str {
        &self.ep.address().site
    }

    pub fn workers(&self) -> &BTreeSet<String> {
        &self.workers
    }

    fn send_beat(&self, beat: &Beat, out: &mut Outbox) {
        let mut env = Envelope::request(
            beat.id,
            MessageKind::Heartbeat,
            "",
            self.ep.address().clone(),
            SiteAddress::server(),
            Vec::new(),
        );
        env.attempt = beat.attempt;
        out.envelopes.push(env);
    }

    fn execute(&mut self, kind: MessageKind, payload: &[u8], out: &mut Outbox) -> Result<Vec<u8>, String> {
        match kind {
            MessageKind::Deploy => {
                let order: DeployOrder = serde_json::from_slice(payload).map_err(|e| format!("bad DEPLOY: {e}"))?;
                if order.site != self.site() {
                    return Err(format!("deploy for {} sent to {}", order.site, self.site()));
                }
                if self.workers.insert(order.job.job_id.clone()) {
                    out.effects.push(Effect::SpawnClient(order));
                }
                Ok(b"{}".to_vec())
            }
            MessageKind::Abort => {
                let req: AbortRequest = serde_json::from_slice(payload).map_err(|e| format!("bad ABORT: {e}"))?;
                if self.workers.remove(&req.job_id) {
                    out.effects.push(Effect::Kill(SiteAddress::new(self.site().to_string(), req.job_id)));
                }
                Ok(b"{}".to_vec())
            }
            k => Err(format!("{k} is not served by a client control process")),
        }
    }
}

impl Process for Ccp {
    fn address(&self) -> &SiteAddress {
        self.ep.address()
    }

    fn on_envelope(&mut self, now: u64, env: Envelope, out: &mut Outbox) {
        if env.kind == MessageKind::Ack {
            if let Some(beat) = self.beat.as_mut().filter(|b| b.id == env.correlation_id) {
                beat.acked = true;
                return;
            }
        }
        match self.ep.handle(now, env, &mut out.envelopes) {
            Inbound::Execute(exec) => {
                let result = self.execute(exec.kind, &exec.payload, out);
                self.ep.complete(now, exec.msg_id, result, &mut out.envelopes);
            }
            Inbound::Consumed => {}
            Inbound::Other(env) => log::debug!("{}: unexpected {} dropped", self.ep.address(), env.kind),
        }
        self.ep.take_completed();
    }

    fn poll(&mut self, now: u64, out: &mut Outbox) {
        self.ep.poll(now, &mut out.envelopes);
        self.ep.take_completed();
        if now >= self.next_beat {
            let beat = Beat { id: self.ep.next_msg_id(), attempt: 1, acked: false, next_resend: now + self.retry_ms };
            self.send_beat(&beat, out);
            self.beat = Some(beat);
            while self.next_beat <= now {
                self.next_beat += self.heartbeat.interval_ms;
            }
        } else if let Some(beat) = self.beat.as_mut().filter(|b| !b.acked && now >= b.next_resend) {
            beat.attempt += 1;
            beat.next_resend = now + self.retry_ms;
            let beat = self.beat.as_ref().expect("beat");
            self.send_beat(beat, out);
        }
    }

    fn next_wakeup(&self) -> Option<u64> {
        let resend = self.beat.as_ref().filter(|b| !b.acked).map(|b| b.next_resend);
        [Some(self.next_beat), resend, self.ep.next_wakeup()].into_iter().flatten().min()
    }
}
