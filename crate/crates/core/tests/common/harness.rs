//! Requester/responder pair over one simulated link, driven in event order.

use std::collections::BTreeMap;

use fedrelay::netsim::{Fabric, LinkId, LinkPolicy};
use fedrelay::reliable::{CallState, Inbound, ReliableCall, ReliableEndpoint, Timeouts};
use fedrelay::wire::{decode_envelope, encode_envelope, Envelope, MessageKind, MsgId, SiteAddress};

pub fn req_addr() -> SiteAddress {
    SiteAddress::new("site-1", "j")
}

pub fn resp_addr() -> SiteAddress {
    SiteAddress::new("server", "j")
}

pub fn handler_output(payload: &[u8]) -> Vec<u8> {
    let mut out = b"done:".to_vec();
    out.extend(payload.iter().rev());
    out
}

/// Requester and responder endpoints joined by one fabric link.
pub struct Harness {
    pub fabric: Fabric,
    pub link: LinkId,
    pub req: ReliableEndpoint,
    pub resp: ReliableEndpoint,
    pub now: u64,
    pub timeouts: Timeouts,
    /// Calls to open: (time, payload).
    pub schedule: Vec<(u64, Vec<u8>)>,
    /// Handler runs finishing no earlier than this.
    pub finish_at: u64,
    /// Handler latency after the request arrives.
    pub delay: u64,
    pub fail_handler: bool,
    pub pending: Vec<(u64, MsgId, Vec<u8>)>,
    pub invocations: BTreeMap<MsgId, u32>,
    /// Frames for which this returns true are discarded before sending.
    pub drop_if: fn(&Envelope) -> bool,
    pub done: Vec<ReliableCall>,
    pub opened: usize,
}

impl Harness {
    pub fn new(policy: LinkPolicy, timeouts: Timeouts) -> Self {
        let mut fabric = Fabric::new();
        let link = fabric.connect(req_addr(), resp_addr(), policy).unwrap();
        Harness {
            fabric,
            link,
            req: ReliableEndpoint::new(req_addr()),
            resp: ReliableEndpoint::new(resp_addr()),
            now: 0,
            timeouts,
            schedule: Vec::new(),
            finish_at: 0,
            delay: 0,
            fail_handler: false,
            pending: Vec::new(),
            invocations: BTreeMap::new(),
            drop_if: |_| false,
            done: Vec::new(),
            opened: 0,
        }
    }

    fn send(&mut self, from: SiteAddress, envs: Vec<Envelope>) {
        for env in envs {
            if (self.drop_if)(&env) {
                continue;
            }
            self.fabric.send(self.link, &from, encode_envelope(&env).unwrap()).unwrap();
        }
    }

    fn next_event(&self) -> Option<u64> {
        let sched = self.schedule.first().map(|s| s.0);
        let pend = self.pending.iter().map(|p| p.0).min();
        [self.fabric.next_due(), self.req.next_wakeup(), sched, pend].into_iter().flatten().min()
    }

    /// Runs until every scheduled call finished or nothing is left to do.
    pub fn run(&mut self, limit: u64) {
        self.schedule.sort_by_key(|s| s.0);
        while self.done.len() < self.opened + self.schedule.len() {
            let Some(t) = self.next_event() else { break };
            if t > limit {
                break;
            }
            self.round(t);
        }
    }

    pub fn round(&mut self, t: u64) {
        let deliveries = self.fabric.step(t - self.now);
        self.now = t;
        while self.schedule.first().is_some_and(|s| s.0 <= t) {
            let (_, payload) = self.schedule.remove(0);
            let mut out = Vec::new();
            self.req.call(t, resp_addr(), MessageKind::Request, "j", payload, self.timeouts, &mut out);
            self.opened += 1;
            self.send(req_addr(), out);
        }
        for d in deliveries {
            let env = decode_envelope(&d.frame).unwrap();
            let mut out = Vec::new();
            if d.dst == req_addr() {
                let r = self.req.handle(t, env, &mut out);
                assert!(matches!(r, Inbound::Consumed));
                self.send(req_addr(), out);
            } else {
                if let Inbound::Execute(exec) = self.resp.handle(t, env, &mut out) {
                    *self.invocations.entry(exec.msg_id).or_default() += 1;
                    let ready = (t + self.delay).max(self.finish_at);
                    self.pending.push((ready, exec.msg_id, exec.payload));
                }
                self.send(resp_addr(), out);
            }
        }
        let mut out = Vec::new();
        self.req.poll(t, &mut out);
        self.send(req_addr(), out);
        let (due, rest): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|p| p.0 <= t);
        self.pending = rest;
        for (_, id, payload) in due {
            let result =
                if self.fail_handler { Err("handler refused".to_string()) } else { Ok(handler_output(&payload)) };
            let mut out = Vec::new();
            self.resp.complete(t, id, result, &mut out);
            self.send(resp_addr(), out);
        }
        self.done.extend(self.req.take_completed());
    }
}

pub fn fast() -> Timeouts {
    Timeouts { retry_ms: 250, query_ms: 100, send_deadline_ms: 30_000, result_deadline_ms: 600_000 }
}

pub fn workload(seed: u64, calls: usize, drop: f64, dup: f64, lat: (u64, u64), t: Timeouts) -> Harness {
    let mut h = Harness::new(LinkPolicy::lossy(drop, dup, lat, seed), t);
    for i in 0..calls {
        h.schedule.push(((i as u64) * 3, format!("call-{i}").into_bytes()));
    }
    h.delay = 20;
    h.run(u64::MAX);
    h
}

pub fn assert_all_done_once(h: &Harness, calls: usize) {
    assert_eq!(h.done.len(), calls);
    for c in &h.done {
        assert_eq!(c.state, CallState::Done, "{c:?}");
        assert_eq!(c.ok_bytes().unwrap(), handler_output(&c.payload));
    }
    assert_eq!(h.invocations.len(), calls);
    assert!(h.invocations.values().all(|&n| n == 1));
    assert_eq!(h.resp.executions(), calls as u64);
}
