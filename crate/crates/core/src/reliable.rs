//! Reliable request/response messaging.
//!
//! A requester re-sends a REQUEST (same `msg_id`, growing `attempt`) every
//! `retry_ms` until the peer acknowledges it or the send deadline passes.
//! Once acknowledged it polls with QUERY every `query_ms`. The result
//! arrives either as the RESPONSE the peer pushes when its handler returns
//! or as the answer to a QUERY, whichever comes first.
//!
//! The responder keeps a result cache keyed by `msg_id`, so a request is
//! executed at most once however many duplicates arrive.
//!
//! Reply payloads start with a status byte: 0 PENDING, 1 READY (result
//! bytes follow), 2 FAULT (UTF-8 reason follows), 3 UNKNOWN.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{Envelope, MessageKind, MsgId, MsgIdGen, SiteAddress};

pub const DEFAULT_RETENTION_MS: u64 = 5 * 60 * 1000;

/// Per-call timing; all values in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timeouts {
    pub retry_ms: u64,
    pub query_ms: u64,
    pub send_deadline_ms: u64,
    pub result_deadline_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts { retry_ms: 250, query_ms: 500, send_deadline_ms: 30_000, result_deadline_ms: 600_000 }
    }
}

impl Timeouts {
    pub fn validate(&self) -> Result<(), String> {
        if self.retry_ms == 0 || self.query_ms == 0 || self.send_deadline_ms == 0 || self.result_deadline_ms == 0 {
            return Err("reliable timeouts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallState {
    Sending,
    Awaiting,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Failure {
    #[error("SendTimeout")]
    SendTimeout,
    #[error("ResultTimeout")]
    ResultTimeout,
    #[error("Aborted: {0}")]
    Aborted(String),
}

/// The peer's answer. A fault is still a completed exchange.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResultBody {
    Ok(Vec<u8>),
    Fault(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultPath {
    Response,
    QueryResponse,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResultStatus {
    Pending,
    Ready(Vec<u8>),
    Fault(String),
    Unknown,
}

impl ResultStatus {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ResultStatus::Pending => vec![0],
            ResultStatus::Ready(b) => {
                let mut v = Vec::with_capacity(b.len() + 1);
                v.push(1);
                v.extend_from_slice(b);
                v
            }
            ResultStatus::Fault(s) => {
                let mut v = vec![2];
                v.extend_from_slice(s.as_bytes());
                v
            }
            ResultStatus::Unknown => vec![3],
        }
    }

    pub fn decode(bytes: &[u8]) -> Option<ResultStatus> {
        let (&tag, rest) = bytes.split_first()?;
        match tag {
            0 if rest.is_empty() => Some(ResultStatus::Pending),
            1 => Some(ResultStatus::Ready(rest.to_vec())),
            2 => Some(ResultStatus::Fault(String::from_utf8_lossy(rest).into_owned())),
            3 if rest.is_empty() => Some(ResultStatus::Unknown),
            _ => None,
        }
    }

    fn from_body(body: &ResultBody) -> Self {
        match body {
            ResultBody::Ok(b) => ResultStatus::Ready(b.clone()),
            ResultBody::Fault(s) => ResultStatus::Fault(s.clone()),
        }
    }
}

/// Kinds a requester may open a reliable call with.
pub fn is_request_class(kind: MessageKind) -> bool {
    matches!(
        kind,
        MessageKind::Request
            | MessageKind::Submit
            | MessageKind::Deploy
            | MessageKind::Status
            | MessageKind::Abort
            | MessageKind::GuestFwd
    )
}

fn response_kind(request: MessageKind) -> MessageKind {
    if request == MessageKind::GuestFwd {
        MessageKind::GuestRet
    } else {
        MessageKind::Response
    }
}

/// One request/response exchange seen from the requester.
#[derive(Clone, Debug)]
pub struct ReliableCall {
    pub msg_id: MsgId,
    pub kind: MessageKind,
    pub job_id: String,
    pub dst: SiteAddress,
    pub payload: Vec<u8>,
    pub state: CallState,
    pub timeouts: Timeouts,
    pub first_send_t: u64,
    pub awaiting_since: Option<u64>,
    pub attempts: u32,
    pub queries: u32,
    pub result: Option<ResultBody>,
    pub failure: Option<Failure>,
    pub via: Option<ResultPath>,
    pub completed_t: Option<u64>,
    next_retry: u64,
    next_query: u64,
}

impl ReliableCall {
    pub fn is_finished(&self) -> bool {
        matches!(self.state, CallState::Done | CallState::Failed)
    }

    /// Result bytes when the peer succeeded.
    pub fn ok_bytes(&self) -> Option<&[u8]> {
        match &self.result {
            Some(ResultBody::Ok(b)) => Some(b),
            _ => None,
        }
    }

    /// Human-readable reason for anything other than success.
    pub fn error_text(&self) -> Option<String> {
        match (&self.result, &self.failure) {
            (Some(ResultBody::Fault(s)), _) => Some(format!("PeerFault: {s}")),
            (_, Some(f)) => Some(f.to_string()),
            _ => None,
        }
    }

    fn request_envelope(&self, src: &SiteAddress) -> Envelope {
        Envelope {
            msg_id: self.msg_id,
            correlation_id: MsgId::ZERO,
            job_id: self.job_id.clone(),
            src: src.clone(),
            dst: self.dst.clone(),
            kind: self.kind,
            attempt: self.attempts,
            payload: self.payload.clone(),
        }
    }

    fn finish(&mut self, now: u64, result: ResultBody, via: ResultPath) {
        self.state = CallState::Done;
        self.result = Some(result);
        self.via = Some(via);
        self.completed_t = Some(now);
    }

    fn fail(&mut self, now: u64, failure: Failure) {
        self.state = CallState::Failed;
        self.failure = Some(failure);
        self.completed_t = Some(now);
    }

    fn wakeup(&self) -> Option<u64> {
        match self.state {
            CallState::Sending => Some(self.next_retry.min(self.first_send_t + self.timeouts.send_deadline_ms)),
            CallState::Awaiting => {
                let since = self.awaiting_since.unwrap_or(self.first_send_t);
                Some(self.next_query.min(since + self.timeouts.result_deadline_ms))
            }
            _ => None,
        }
    }
}

/// Requester side: the table of in-flight calls for one endpoint.
#[derive(Debug, Default)]
pub struct Requester {
    calls: BTreeMap<MsgId, ReliableCall>,
    completed: Vec<ReliableCall>,
}

impl Requester {
    #[allow(clippy::too_many_arguments)]
    fn start(
        &mut self,
        now: u64,
        msg_id: MsgId,
        src: &SiteAddress,
        dst: SiteAddress,
        kind: MessageKind,
        job_id: String,
        payload: Vec<u8>,
        timeouts: Timeouts,
        out: &mut Vec<Envelope>,
    ) {
        debug_assert!(is_request_class(kind));
        let call = ReliableCall {
            msg_id,
            kind,
            job_id,
            dst,
            payload,
            state: CallState::Sending,
            timeouts,
            first_send_t: now,
            awaiting_since: None,
            attempts: 1,
            queries: 0,
            result: None,
            failure: None,
            via: None,
            completed_t: None,
            next_retry: now + timeouts.retry_ms,
            next_query: 0,
        };
        out.push(call.request_envelope(src));
        self.calls.insert(msg_id, call);
    }

    fn on_reply(&mut self, now: u64, src: &SiteAddress, env: &Envelope, out: &mut Vec<Envelope>) {
        let Some(call) = self.calls.get_mut(&env.correlation_id) else {
            return;
        };
        let status = match env.kind {
            MessageKind::Ack => None,
            _ => match ResultStatus::decode(&env.payload) {
                Some(s) => Some(s),
                None => {
                    log::warn!("{src}: undecodable reply payload for {}", env.correlation_id);
                    return;
                }
            },
        };
        let path =
            if env.kind == MessageKind::QueryResponse { ResultPath::QueryResponse } else { ResultPath::Response };
        match status {
            None | Some(ResultStatus::Pending) => {
                if call.state == CallState::Sending {
                    call.state = CallState::Awaiting;
                    call.awaiting_since = Some(now);
                    call.next_query = now + call.timeouts.query_ms;
                }
            }
            Some(ResultStatus::Ready(b)) => call.finish(now, ResultBody::Ok(b), path),
            Some(ResultStatus::Fault(s)) => call.finish(now, ResultBody::Fault(s), path),
            Some(ResultStatus::Unknown) => {
                // The peer has no record of the request: send it again.
                if call.state == CallState::Awaiting {
                    call.attempts += 1;
                    out.push(call.request_envelope(src));
                }
            }
        }
        if call.is_finished() {
            let call = self.calls.remove(&env.correlation_id).expect("present");
            self.completed.push(call);
        }
    }

    fn poll(&mut self, now: u64, src: &SiteAddress, ids: &mut MsgIdGen, out: &mut Vec<Envelope>) {
        let mut finished = Vec::new();
        for (id, call) in self.calls.iter_mut() {
            match call.state {
                CallState::Sending => {
                    if now >= call.first_send_t + call.timeouts.send_deadline_ms {
                        call.fail(now, Failure::SendTimeout);
                    } else if now >= call.next_retry {
                        call.attempts += 1;
                        out.push(call.request_envelope(src));
                        while call.next_retry <= now {
                            call.next_retry += call.timeouts.retry_ms;
                        }
                    }
                }
                CallState::Awaiting => {
                    let since = call.awaiting_since.unwrap_or(call.first_send_t);
                    if now >= since + call.timeouts.result_deadline_ms {
                        call.fail(now, Failure::ResultTimeout);
                    } else if now >= call.next_query {
                        call.queries += 1;
                        out.push(Envelope {
                            msg_id: ids.next_id(),
                            correlation_id: call.msg_id,
                            job_id: call.job_id.clone(),
                            src: src.clone(),
                            dst: call.dst.clone(),
                            kind: MessageKind::Query,
                            attempt: call.queries,
                            payload: Vec::new(),
                        });
                        while call.next_query <= now {
                            call.next_query += call.timeouts.query_ms;
                        }
                    }
                }
                _ => {}
            }
            if call.is_finished() {
                finished.push(*id);
            }
        }
        for id in finished {
            let call = self.calls.remove(&id).expect("present");
            self.completed.push(call);
        }
    }

    fn abort_where(&mut self, now: u64, reason: &str, mut pred: impl FnMut(&ReliableCall) -> bool) -> usize {
        let ids: Vec<MsgId> = self.calls.values().filter(|c| pred(c)).map(|c| c.msg_id).collect();
        for id in &ids {
            let mut call = self.calls.remove(id).expect("present");
            call.fail(now, Failure::Aborted(reason.to_string()));
            self.completed.push(call);
        }
        ids.len()
    }

    fn next_wakeup(&self) -> Option<u64> {
        self.calls.values().filter_map(ReliableCall::wakeup).min()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EntryStatus {
    Pending,
    Ready(ResultBody),
    /// Ready and already served to at least one query.
    Consumed(ResultBody),
}

#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub status: EntryStatus,
    pub ready_t: Option<u64>,
    pub requester: SiteAddress,
    request: Envelope,
}

/// Responder-side result retention keyed by request `msg_id`.
#[derive(Debug)]
pub struct ResultCache {
    entries: BTreeMap<MsgId, CacheEntry>,
    retention_ms: u64,
}

impl ResultCache {
    pub fn new(retention_ms: u64) -> Self {
        ResultCache { entries: BTreeMap::new(), retention_ms }
    }

    pub fn get(&self, id: &MsgId) -> Option<&CacheEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn retention_ms(&self) -> u64 {
        self.retention_ms
    }

    /// Evicts finished entries whose age reached `retention_ms`. Pending
    /// entries stay regardless of age.
    pub fn gc(&mut self, now: u64) -> usize {
        let before = self.entries.len();
        let retention = self.retention_ms;
        self.entries.retain(|_, e| match (&e.status, e.ready_t) {
            (EntryStatus::Pending, _) => true,
            (_, Some(t)) => now.saturating_sub(t) < retention,
            (_, None) => true,
        });
        before - self.entries.len()
    }

    fn insert_pending(&mut self, env: &Envelope) {
        self.entries.insert(
            env.msg_id,
            CacheEntry {
                status: EntryStatus::Pending,
                ready_t: None,
                requester: env.src.clone(),
                request: Envelope { payload: Vec::new(), ..env.clone() },
            },
        );
    }

    #[cfg(test)]
    fn insert_ready(&mut self, id: MsgId, ready_t: u64) {
        let env = Envelope::request(
            id,
            MessageKind::Request,
            "j",
            SiteAddress::control("a"),
            SiteAddress::control("b"),
            Vec::new(),
        );
        self.insert_pending(&env);
        let e = self.entries.get_mut(&id).unwrap();
        e.status = EntryStatus::Ready(ResultBody::Ok(Vec::new()));
        e.ready_t = Some(ready_t);
    }
}

/// A request the responder accepted for the first time; the owner must
/// eventually call [`ReliableEndpoint::complete`] for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub msg_id: MsgId,
    pub kind: MessageKind,
    pub job_id: String,
    pub src: SiteAddress,
    pub payload: Vec<u8>,
}

/// What an inbound envelope turned out to be.
#[derive(Debug)]
pub enum Inbound {
    /// First arrival of a request: run the handler.
    Execute(Execution),
    /// Reliability traffic fully handled here.
    Consumed,
    /// Not reliability traffic (heartbeats, metrics, ...).
    Other(Envelope),
}

/// Requester and responder for one process address, sharing an id source.
#[derive(Debug)]
pub struct ReliableEndpoint {
    addr: SiteAddress,
    ids: MsgIdGen,
    requester: Requester,
    cache: ResultCache,
    executions: u64,
}

impl ReliableEndpoint {
    pub fn new(addr: SiteAddress) -> Self {
        let ids = MsgIdGen::for_label(&addr.to_string());
        Self::with_ids(addr, ids)
    }

    pub fn with_ids(addr: SiteAddress, ids: MsgIdGen) -> Self {
        ReliableEndpoint {
            addr,
            ids,
            requester: Requester::default(),
            cache: ResultCache::new(DEFAULT_RETENTION_MS),
            executions: 0,
        }
    }

    pub fn with_retention(mut self, retention_ms: u64) -> Self {
        self.cache.retention_ms = retention_ms;
        self
    }

    pub fn address(&self) -> &SiteAddress {
        &self.addr
    }

    pub fn next_msg_id(&mut self) -> MsgId {
        self.ids.next_id()
    }

    /// Opens a reliable call; the first REQUEST is pushed to `out`.
    #[allow(clippy::too_many_arguments)]
    pub fn call(
        &mut self,
        now: u64,
        dst: SiteAddress,
        kind: MessageKind,
        job_id: impl Into<String>,
        payload: Vec<u8>,
        timeouts: Timeouts,
        out: &mut Vec<Envelope>,
    ) -> MsgId {
        let id = self.ids.next_id();
        self.requester.start(now, id, &self.addr, dst, kind, job_id.into(), payload, timeouts, out);
        id
    }

    pub fn handle(&mut self, now: u64, env: Envelope, out: &mut Vec<Envelope>) -> Inbound {
        match env.kind {
            MessageKind::Ack | MessageKind::Response | MessageKind::GuestRet | MessageKind::QueryResponse => {
                self.requester.on_reply(now, &self.addr, &env, out);
                Inbound::Consumed
            }
            MessageKind::Query => {
                self.on_query(&env, out);
                Inbound::Consumed
            }
            k if is_request_class(k) => match self.on_request(&env, out) {
                Some(exec) => Inbound::Execute(exec),
                None => Inbound::Consumed,
            },
            _ => Inbound::Other(env),
        }
    }

    fn on_request(&mut self, env: &Envelope, out: &mut Vec<Envelope>) -> Option<Execution> {
        out.push(env.reply(self.ids.next_id(), MessageKind::Ack, Vec::new()));
        match self.cache.entries.get(&env.msg_id) {
            None => {
                self.cache.insert_pending(env);
                self.executions += 1;
                Some(Execution {
                    msg_id: env.msg_id,
                    kind: env.kind,
                    job_id: env.job_id.clone(),
                    src: env.src.clone(),
                    payload: env.payload.clone(),
                })
            }
            Some(entry) => {
                if let EntryStatus::Ready(body) | EntryStatus::Consumed(body) = &entry.status {
                    let status = ResultStatus::from_body(body).encode();
                    out.push(env.reply(self.ids.next_id(), response_kind(env.kind), status));
                }
                None
            }
        }
    }

    fn on_query(&mut self, env: &Envelope, out: &mut Vec<Envelope>) {
        let status = match self.cache.entries.get_mut(&env.correlation_id) {
            None => ResultStatus::Unknown,
            Some(entry) => match &entry.status {
                EntryStatus::Pending => ResultStatus::Pending,
                EntryStatus::Ready(body) => {
                    let s = ResultStatus::from_body(body);
                    entry.status = EntryStatus::Consumed(body.clone());
                    s
                }
                EntryStatus::Consumed(body) => ResultStatus::from_body(body),
            },
        };
        let mut reply = env.reply(self.ids.next_id(), MessageKind::QueryResponse, status.encode());
        // Answers the call, not the individual query.
        reply.correlation_id = env.correlation_id;
        out.push(reply);
    }

    /// Records the handler's result and pushes it to the requester.
    pub fn complete(&mut self, now: u64, msg_id: MsgId, result: Result<Vec<u8>, String>, out: &mut Vec<Envelope>) {
        let Some(entry) = self.cache.entries.get_mut(&msg_id) else {
            log::warn!("{}: completion for unknown request {msg_id}", self.addr);
            return;
        };
        if entry.status != EntryStatus::Pending {
            return;
        }
        let body = match result {
            Ok(b) => ResultBody::Ok(b),
            Err(s) => ResultBody::Fault(s),
        };
        let payload = ResultStatus::from_body(&body).encode();
        entry.status = EntryStatus::Ready(body);
        entry.ready_t = Some(now);
        let request = &entry.request;
        out.push(request.reply(self.ids.next_id(), response_kind(request.kind), payload));
    }

    /// Handles `env`, running `handler` synchronously for first arrivals.
    pub fn serve<F>(&mut self, now: u64, env: Envelope, out: &mut Vec<Envelope>, mut handler: F) -> Option<Envelope>
    where
        F: FnMut(&Execution) -> Result<Vec<u8>, String>,
    {
        match self.handle(now, env, out) {
            Inbound::Execute(exec) => {
                let result = handler(&exec);
                self.complete(now, exec.msg_id, result, out);
                None
            }
            Inbound::Consumed => None,
            Inbound::Other(env) => Some(env),
        }
    }

    /// Emits due retries and queries and expires overdue calls.
    pub fn poll(&mut self, now: u64, out: &mut Vec<Envelope>) {
        self.requester.poll(now, &self.addr, &mut self.ids, out);
    }

    pub fn gc_results(&mut self, now: u64) -> usize {
        self.cache.gc(now)
    }

    pub fn abort_calls(&mut self, now: u64, reason: &str) -> usize {
        self.requester.abort_where(now, reason, |_| true)
    }

    pub fn abort_job_calls(&mut self, now: u64, job_id: &str, reason: &str) -> usize {
        self.requester.abort_where(now, reason, |c| c.job_id == job_id)
    }

    pub fn take_completed(&mut self) -> Vec<ReliableCall> {
        std::mem::take(&mut self.requester.completed)
    }

    pub fn in_flight(&self) -> usize {
        self.requester.calls.len()
    }

    pub fn call_state(&self, id: &MsgId) -> Option<CallState> {
        self.requester.calls.get(id).map(|c| c.state)
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        self.requester.next_wakeup()
    }

    pub fn cache(&self) -> &ResultCache {
        &self.cache
    }

    /// Number of first-arrival executions handed out so far.
    pub fn executions(&self) -> u64 {
        self.executions
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a() -> SiteAddress {
        SiteAddress::new("site-1", "j")
    }
    fn b() -> SiteAddress {
        SiteAddress::new("server", "j")
    }

    #[test]
    fn status_codec() {
        for s in [
            ResultStatus::Pending,
            ResultStatus::Ready(vec![1, 2]),
            ResultStatus::Ready(vec![]),
            ResultStatus::Fault("boom".into()),
            ResultStatus::Unknown,
        ] {
            assert_eq!(ResultStatus::decode(&s.encode()), Some(s));
        }
        assert_eq!(ResultStatus::decode(&[]), None);
        assert_eq!(ResultStatus::decode(&[9]), None);
    }

    #[test]
    fn duplicate_requests_execute_once() {
        let mut req = ReliableEndpoint::new(a());
        let mut resp = ReliableEndpoint::new(b());
        let mut out = Vec::new();
        req.call(0, b(), MessageKind::Request, "j", b"hi".to_vec(), Timeouts::default(), &mut out);
        let first = out.pop().unwrap();
        let mut second = first.clone();
        second.attempt = 2;
        let mut calls = 0;
        let mut replies = Vec::new();
        for env in [first, second] {
            resp.serve(1, env, &mut replies, |e| {
                calls += 1;
                Ok(e.payload.iter().rev().copied().collect())
            });
        }
        assert_eq!(calls, 1);
        let responses: Vec<_> = replies.iter().filter(|e| e.kind == MessageKind::Response).collect();
        assert_eq!(responses.len(), 2);
        assert_eq!(responses[0].payload, responses[1].payload);
        for env in replies {
            req.handle(2, env, &mut out);
        }
        let done = req.take_completed();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].ok_bytes(), Some(&b"ih"[..]));
    }

    #[test]
    fn query_before_request_is_unknown() {
        let mut resp = ReliableEndpoint::new(b());
        let q = Envelope {
            msg_id: MsgId(5),
            correlation_id: MsgId(99),
            job_id: "j".into(),
            src: a(),
            dst: b(),
            kind: MessageKind::Query,
            attempt: 1,
            payload: vec![],
        };
        let mut out = Vec::new();
        resp.handle(0, q, &mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, MessageKind::QueryResponse);
        assert_eq!(out[0].correlation_id, MsgId(99));
        assert_eq!(ResultStatus::decode(&out[0].payload), Some(ResultStatus::Unknown));
    }

    #[test]
    fn handler_error_becomes_fault() {
        let mut req = ReliableEndpoint::new(a());
        let mut resp = ReliableEndpoint::new(b());
        let mut out = Vec::new();
        req.call(0, b(), MessageKind::Request, "j", vec![], Timeouts::default(), &mut out);
        let mut replies = Vec::new();
        resp.serve(0, out.pop().unwrap(), &mut replies, |_| Err("bad input".into()));
        for env in replies {
            req.handle(0, env, &mut out);
        }
        let done = req.take_completed();
        assert_eq!(done[0].state, CallState::Done);
        assert_eq!(done[0].result, Some(ResultBody::Fault("bad input".into())));
        assert!(done[0].failure.is_none());
    }

    #[test]
    fn unacknowledged_call_times_out_after_ceil_attempts() {
        let mut req = ReliableEndpoint::new(a());
        let t = Timeouts { retry_ms: 300, send_deadline_ms: 1000, ..Timeouts::default() };
        let mut out = Vec::new();
        req.call(0, b(), MessageKind::Request, "j", vec![], t, &mut out);
        let mut now = 0;
        while req.in_flight() > 0 {
            now = req.next_wakeup().unwrap();
            req.poll(now, &mut out);
        }
        assert_eq!(out.len(), 4); // t = 0, 300, 600, 900
        assert!(out.iter().all(|e| e.msg_id == out[0].msg_id));
        assert_eq!(out.iter().map(|e| e.attempt).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(now, 1000);
        assert_eq!(req.take_completed()[0].failure, Some(Failure::SendTimeout));
    }

    #[test]
    fn acked_call_polls_then_times_out() {
        let mut req = ReliableEndpoint::new(a());
        let t = Timeouts { query_ms: 100, result_deadline_ms: 450, ..Timeouts::default() };
        let mut out = Vec::new();
        let id = req.call(0, b(), MessageKind::Request, "j", vec![], t, &mut out);
        let ack = out[0].reply(MsgId(77), MessageKind::Ack, vec![]);
        req.handle(10, ack, &mut out);
        assert_eq!(req.call_state(&id), Some(CallState::Awaiting));
        out.clear();
        while req.in_flight() > 0 {
            let now = req.next_wakeup().unwrap();
            req.poll(now, &mut out);
        }
        assert_eq!(out.iter().filter(|e| e.kind == MessageKind::Query).count(), 4);
        let done = req.take_completed();
        assert_eq!(done[0].failure, Some(Failure::ResultTimeout));
        assert_eq!(done[0].completed_t, Some(460));
    }

    #[test]
    fn abort_fails_pending_calls() {
        let mut req = ReliableEndpoint::new(a());
        let mut out = Vec::new();
        req.call(0, b(), MessageKind::Request, "j", vec![], Timeouts::default(), &mut out);
        req.call(0, b(), MessageKind::Request, "k", vec![], Timeouts::default(), &mut out);
        assert_eq!(req.abort_job_calls(5, "j", "job aborted"), 1);
        let done = req.take_completed();
        assert_eq!(done[0].failure, Some(Failure::Aborted("job aborted".into())));
        assert_eq!(req.in_flight(), 1);
    }

    #[test]
    fn gc_boundary_inclusive_and_pending_kept() {
        let mut cache = ResultCache::new(100);
        assert_eq!(cache.gc(0), 0);
        cache.insert_ready(MsgId(1), 0);
        cache.insert_ready(MsgId(2), 1);
        let env = Envelope::request(MsgId(3), MessageKind::Request, "j", a(), b(), vec![]);
        cache.insert_pending(&env);
        assert_eq!(cache.gc(100), 1);
        assert!(cache.get(&MsgId(1)).is_none());
        assert!(cache.get(&MsgId(2)).is_some());
        assert_eq!(cache.gc(1_000_000), 1);
        assert!(cache.get(&MsgId(3)).is_some());
    }
}
