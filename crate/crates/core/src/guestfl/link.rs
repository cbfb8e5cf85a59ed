use std::collections::{BTreeMap, BTreeSet};

use super::protocol::{decode, encode, LinkReply, NodeRequest, Phase, PushResult};
use super::{initial_weights, AppConfig, EvalResult, FitResult, History, ModelVector, RoundRecord, Strategy};
use crate::bridge::{GuestLinkService, LinkOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LinkPhase {
    Registering,
    Running(Phase),
    Done,
    Failed,
}

/// The server app. Nodes register, pull tasks, and push results; the link
/// advances a round once every expected node has answered the current phase.
#[derive(Debug)]
pub struct GuestLink {
    expected: BTreeSet<String>,
    registered: BTreeSet<String>,
    phase: LinkPhase,
    round: u32,
    num_rounds: u32,
    global: ModelVector,
    strategy: Strategy,
    fit_results: BTreeMap<String, FitResult>,
    eval_results: BTreeMap<String, EvalResult>,
    history: History,
    failure: Option<String>,
    stall_round: Option<u32>,
}

impl GuestLink {
    pub fn new(app: &AppConfig, expected: impl IntoIterator<Item = String>) -> Self {
        GuestLink {
            expected: expected.into_iter().collect(),
            registered: BTreeSet::new(),
            phase: LinkPhase::Registering,
            round: 0,
            num_rounds: app.server.num_rounds,
            global: initial_weights(app.server.seed, app.dimension),
            strategy: Strategy::from_config(&app.server),
            fit_results: BTreeMap::new(),
            eval_results: BTreeMap::new(),
            history: Vec::new(),
            failure: None,
            stall_round: app.faults.stall_round,
        }
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn global(&self) -> &ModelVector {
        &self.global
    }

    pub fn is_done(&self) -> bool {
        self.phase == LinkPhase::Done
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, LinkPhase::Done | LinkPhase::Failed)
    }

    /// Handles one request body; `None` means the reply is withheld.
    pub fn handle_request(&mut self, body: &[u8]) -> Option<Vec<u8>> {
        let reply = match decode::<NodeRequest>(body) {
            Ok(req) => self.dispatch(req)?,
            Err(e) => LinkReply::Rejected { reason: e.to_string() },
        };
        Some(encode(&reply))
    }

    fn dispatch(&mut self, req: NodeRequest) -> Option<LinkReply> {
        let node = match &req {
            NodeRequest::Register { node } | NodeRequest::Pull { node } | NodeRequest::Push { node, .. } => node,
        };
        if !self.expected.contains(node) {
            return Some(LinkReply::Rejected { reason: format!("unknown node {node}") });
        }
        let reply = match req {
            NodeRequest::Register { node } => {
                self.registered.insert(node);
                if self.phase == LinkPhase::Registering && self.registered == self.expected {
                    self.start_round();
                }
                LinkReply::Registered
            }
            NodeRequest::Pull { node } => return self.pull(&node),
            NodeRequest::Push { node, round, phase, result } => self.push(node, round, phase, result),
        };
        Some(reply)
    }

    fn start_round(&mut self) {
        self.round += 1;
        self.fit_results.clear();
        self.eval_results.clear();
        self.phase = LinkPhase::Running(Phase::Fit);
    }

    fn pull(&mut self, node: &str) -> Option<LinkReply> {
        let phase = match self.phase {
            LinkPhase::Registering => return Some(LinkReply::Wait),
            LinkPhase::Done => return Some(LinkReply::Done),
            LinkPhase::Failed => return Some(LinkReply::Failed { reason: self.failure.clone().unwrap_or_default() }),
            LinkPhase::Running(p) => p,
        };
        if phase == Phase::Fit && self.stall_round == Some(self.round) {
            return None;
        }
        let answered = match phase {
            Phase::Fit => self.fit_results.contains_key(node),
            Phase::Evaluate => self.eval_results.contains_key(node),
        };
        if answered {
            return Some(LinkReply::Wait);
        }
        Some(LinkReply::Task {
            round: self.round,
            phase,
            model: self.global.clone(),
            config: BTreeMap::from([("round".to_string(), self.round as f64)]),
        })
    }

    fn push(&mut self, node: String, round: u32, phase: Phase, result: PushResult) -> LinkReply {
        if self.phase != LinkPhase::Running(phase) || round != self.round {
            // Late or repeated push for a phase that already closed.
            return LinkReply::Accepted;
        }
        match result {
            PushResult::Fault { reason } => {
                self.fail(format!("client {node} fault in round {round}: {reason}"));
            }
            PushResult::Fit(r) if phase == Phase::Fit => {
                if r.weights.dim() != self.global.dim() || r.num_examples == 0 {
                    self.fail(format!("client {node} returned an invalid fit result in round {round}"));
                } else {
                    self.fit_results.entry(node).or_insert(r);
                    if self.fit_results.len() == self.expected.len() {
                        self.aggregate();
                    }
                }
            }
            PushResult::Evaluate(r) if phase == Phase::Evaluate => {
                self.eval_results.entry(node).or_insert(r);
                if self.eval_results.len() == self.expected.len() {
                    self.record_round();
                }
            }
            _ => return LinkReply::Rejected { reason: "result does not match phase".into() },
        }
        LinkReply::Accepted
    }

    fn aggregate(&mut self) {
        // BTreeMap iteration is the canonical site-name order.
        let results: Vec<FitResult> = self.fit_results.values().cloned().collect();
        match self.strategy.aggregate(&self.global, &results) {
            Ok(w) => {
                self.global = w;
                self.phase = LinkPhase::Running(Phase::Evaluate);
            }
            Err(e) => self.fail(format!("aggregation failed in round {}: {e}", self.round)),
        }
    }

    fn record_round(&mut self) {
        let total: f64 = self.eval_results.values().map(|r| r.num_examples as f64).sum();
        let mut loss = 0.0;
        let mut acc = 0.0;
        for r in self.eval_results.values() {
            let share = r.num_examples as f64 / total;
            loss += share * r.loss;
            acc += share * r.accuracy();
        }
        self.history.push(RoundRecord { round: self.round, loss, accuracy: acc });
        if self.round >= self.num_rounds {
            self.phase = LinkPhase::Done;
        } else {
            self.start_round();
        }
    }

    fn fail(&mut self, reason: String) {
        log::warn!("guest run failed: {reason}");
        self.failure = Some(reason);
        self.phase = LinkPhase::Failed;
    }
}

impl GuestLinkService for GuestLink {
    fn handle(&mut self, _stream_id: u64, body: &[u8]) -> LinkOutcome {
        match self.handle_request(body) {
            Some(reply) => LinkOutcome::Reply(reply),
            None => LinkOutcome::Pending,
        }
    }
}
