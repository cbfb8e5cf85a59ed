use std::collections::BTreeMap;

use super::{to_json, AbortRequest, ControlReply, Outbox, Process, StatusRequest, SubmitRequest};
use crate::reliable::{Inbound, ReliableEndpoint, Timeouts};
use crate::wire::{Envelope, MessageKind, MsgId, MsgIdGen, SiteAddress};

/// Control-plane client: issues SUBMIT/STATUS/ABORT calls to the SCP.
pub struct ControlClient {
    ep: ReliableEndpoint,
    timeouts: Timeouts,
    replies: BTreeMap<MsgId, Result<ControlReply, String>>,
}

impl ControlClient {
    pub fn new(addr: SiteAddress, timeouts: Timeouts) -> Self {
        ControlClient { ep: ReliableEndpoint::new(addr), timeouts, replies: BTreeMap::new() }
    }

    /// A client whose message ids come from `ids`, for clients that may
    /// reconnect under a name the server has seen before.
    pub fn with_ids(addr: SiteAddress, timeouts: Timeouts, ids: MsgIdGen) -> Self {
        ControlClient { ep: ReliableEndpoint::with_ids(addr, ids), timeouts, replies: BTreeMap::new() }
    }

    fn call(&mut self, now: u64, kind: MessageKind, job_id: &str, payload: Vec<u8>, out: &mut Outbox) -> MsgId {
        self.ep.call(now, SiteAddress::server(), kind, job_id, payload, self.timeouts, &mut out.envelopes)
    }

    pub fn submit(&mut self, now: u64, req: &SubmitRequest, out: &mut Outbox) -> MsgId {
        self.call(now, MessageKind::Submit, &req.job.job_id, to_json(req), out)
    }

    pub fn status(&mut self, now: u64, job_id: Option<&str>, out: &mut Outbox) -> MsgId {
        let req = StatusRequest { job_id: job_id.map(str::to_string) };
        self.call(now, MessageKind::Status, job_id.unwrap_or(""), to_json(&req), out)
    }

    pub fn abort(&mut self, now: u64, job_id: &str, reason: Option<String>, out: &mut Outbox) -> MsgId {
        let req = AbortRequest { job_id: job_id.to_string(), reason };
        self.call(now, MessageKind::Abort, job_id, to_json(&req), out)
    }

    /// The outcome of call `id`, once it has one.
    pub fn take_reply(&mut self, id: MsgId) -> Option<Result<ControlReply, String>> {
        self.replies.remove(&id)
    }

    pub fn has_reply(&self, id: MsgId) -> bool {
        self.replies.contains_key(&id)
    }

    fn collect(&mut self) {
        for call in self.ep.take_completed() {
            let r = match call.ok_bytes() {
                Some(b) => serde_json::from_slice(b).map_err(|e| format!("bad control reply: {e}")),
                None => Err(call.error_text().unwrap_or_default()),
            };
            self.replies.insert(call.msg_id, r);
        }
    }
}

impl Process for ControlClient {
    fn address(&self) -> &SiteAddress {
        self.ep.address()
    }

    fn on_envelope(&mut self, now: u64, env: Envelope, out: &mut Outbox) {
        if let Inbound::Execute(exec) = self.ep.handle(now, env, &mut out.envelopes) {
            self.ep.complete(now, exec.msg_id, Err("control clients serve nothing".into()), &mut out.envelopes);
        }
        self.collect();
    }

    fn poll(&mut self, now: u64, out: &mut Outbox) {
        self.ep.poll(now, &mut out.envelopes);
        self.collect();
    }

    fn next_wakeup(&self) -> Option<u64> {
        self.ep.next_wakeup()
    }
}
