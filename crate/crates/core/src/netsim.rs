//! Deterministic in-process transport fabric.
//!
//! Links are bidirectional; each direction owns a ChaCha8 stream derived from
//! the link seed, so a (topology, policies, seeds, send script) tuple fully
//! determines the delivery trace. Per send on an open, unpartitioned
//! direction the fabric draws, in order:
//!
//! 1. `u = unit(next_u64())`; the frame is dropped when `u < drop_prob`;
//! 2. otherwise a latency `min + next_u64() % (max - min + 1)`;
//! 3. `d = unit(next_u64())`; when `d < dup_prob` a second latency is drawn
//!    and an extra copy is scheduled.
//!
//! `unit(x)` is `(x >> 11) * 2^-53`. Partitioned directions consume no draws.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{decode_envelope, SiteAddress};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("a link between {0} and {1} already exists")]
    DuplicateLink(SiteAddress, SiteAddress),
    #[error("self-link on {0} is not allowed")]
    SelfLink(SiteAddress),
    #[error("link {0} is closed")]
    LinkClosed(usize),
    #[error("{0} is not an end of link {1}")]
    NotAnEnd(SiteAddress, usize),
    #[error("invalid link policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkPolicy {
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub latency_ms: (u64, u64),
    pub partitioned: bool,
    pub seed: u64,
}

impl Default for LinkPolicy {
    fn default() -> Self {
        LinkPolicy { drop_prob: 0.0, dup_prob: 0.0, latency_ms: (0, 0), partitioned: false, seed: 0 }
    }
}

impl LinkPolicy {
    pub fn lossless() -> Self {
        Self::default()
    }

    pub fn lossy(drop_prob: f64, dup_prob: f64, latency_ms: (u64, u64), seed: u64) -> Self {
        LinkPolicy { drop_prob, dup_prob, latency_ms, partitioned: false, seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        LinkPolicy { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        for (name, p) in [("drop_prob", self.drop_prob), ("dup_prob", self.dup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FabricError::InvalidPolicy(format!("{name}={p} outside [0,1]")));
            }
        }
        if self.latency_ms.0 > self.latency_ms.1 {
            return Err(FabricError::InvalidPolicy(format!(
                "latency min {} > max {}",
                self.latency_ms.0, self.latency_ms.1
            )));
        }
        Ok(())
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one direction of a link: 0 is `a -> b` as passed to `connect`.
pub fn direction_seed(link_seed: u64, direction: u8) -> u64 {
    splitmix64(link_seed ^ (0xa5a5_0000_0000_0000 | direction as u64))
}

pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub usize);

#[derive(Debug)]
struct Link {
    ends: [SiteAddress; 2],
    policy: LinkPolicy,
    rngs: [ChaCha8Rng; 2],
    partitioned: [bool; 2],
    closed: bool,
}

#[derive(Debug)]
struct InFlight {
    src: SiteAddress,
    dst: SiteAddress,
    frame: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub t_ms: u64,
    pub link: LinkId,
    pub src: SiteAddress,
    pub dst: SiteAddress,
    pub frame: Vec<u8>,
}

/// One line of the delivery trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_ms: u64,
    pub src: String,
    pub dst: String,
    pub msg_id: String,
    pub kind: String,
    #[serde(skip)]
    pub job_id: String,
    #[serde(skip)]
    pub dst_addr: Option<SiteAddress>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub sent: u64,
    pub dropped: u64,
    pub partitioned: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub discarded_closed: u64,
}

#[derive(Debug, Default)]
pub struct Fabric {
    now: u64,
    links: Vec<Link>,
    by_pair: BTreeMap<(SiteAddress, SiteAddress), LinkId>,
    pending: BTreeMap<(u64, usize, u64), InFlight>,
    seq: u64,
    trace: Vec<TraceRecord>,
    stats: FabricStats,
}

fn pair_key(a: &SiteAddress, b: &SiteAddress) -> (SiteAddress, SiteAddress) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl Fabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn connect(&mut self, a: SiteAddress, b: SiteAddress, policy: LinkPolicy) -> Result<LinkId, FabricError> {
        if a == b {
            return Err(FabricError::SelfLink(a));
        }
        policy.validate()?;
        let key = pair_key(&a, &b);
        if self.by_pair.contains_key(&key) {
            return Err(FabricError::DuplicateLink(a, b));
        }
        let id = LinkId(self.links.len());
        self.links.push(Link {
            rngs: [
                ChaCha8Rng::seed_from_u64(direction_seed(policy.seed, 0)),
                ChaCha8Rng::seed_from_u64(direction_seed(policy.seed, 1)),
            ],
            partitioned: [policy.partitioned; 2],
            ends: [a, b],
            policy,
            closed: false,
        });
        self.by_pair.insert(key, id);
        Ok(id)
    }

    pub fn link_between(&self, a: &SiteAddress, b: &SiteAddress) -> Option<LinkId> {
        self.by_pair.get(&pair_key(a, b)).copied()
    }

    pub fn ends(&self, link: LinkId) -> Option<(&SiteAddress, &SiteAddress)> {
        self.links.get(link.0).map(|l| (&l.ends[0], &l.ends[1]))
    }

    pub fn policy(&self, link: LinkId) -> Option<&LinkPolicy> {
        self.links.get(link.0).map(|l| &l.policy)
    }

    /// Closes a link; frames still in flight on it are discarded.
    pub fn close(&mut self, link: LinkId) {
        if let Some(l) = self.links.get_mut(link.0) {
            if !l.closed {
                l.closed = true;
                let key = pair_key(&l.ends[0], &l.ends[1]);
                self.by_pair.remove(&key);
            }
        }
    }

    /// Partitions (or heals) both directions of a link.
    pub fn set_partitioned(&mut self, link: LinkId, partitioned: bool) {
        if let Some(l) = self.links.get_mut(link.0) {
            l.partitioned = [partitioned; 2];
        }
    }

    /// Partitions (or heals) only the direction that starts at `from`.
    pub fn set_partitioned_from(&mut self, link: LinkId, from: &SiteAddress, partitioned: bool) {
        if let Some(l) = self.links.get_mut(link.0) {
            if let Some(dir) = l.ends.iter().position(|e| e == from) {
                l.partitioned[dir] = partitioned;
            }
        }
    }

    pub fn send(&mut self, link: LinkId, from: &SiteAddress, frame: Vec<u8>) -> Result<(), FabricError> {
        let l = self.links.get_mut(link.0).ok_or(FabricError::LinkClosed(link.0))?;
        if l.closed {
            return Err(FabricError::LinkClosed(link.0));
        }
        let dir = l.ends.iter().position(|e| e == from).ok_or_else(|| FabricError::NotAnEnd(from.clone(), link.0))?;
        self.stats.sent += 1;
        if l.partitioned[dir] {
            self.stats.partitioned += 1;
            return Ok(());
        }
        let (min, max) = l.policy.latency_ms;
        let span = max - min + 1;
        let rng = &mut l.rngs[dir];
        if unit_f64(rng.next_u64()) < l.policy.drop_prob {
            self.stats.dropped += 1;
            return Ok(());
        }
        let first = min + rng.next_u64() % span;
        let dup = if unit_f64(rng.next_u64()) < l.policy.dup_prob { Some(min + rng.next_u64() % span) } else { None };
        let src = l.ends[dir].clone();
        let dst = l.ends[1 - dir].clone();
        if let Some(lat) = dup {
            self.stats.duplicated += 1;
            self.enqueue(link, first, src.clone(), dst.clone(), frame.clone());
            self.enqueue(link, lat, src, dst, frame);
        } else {
            self.enqueue(link, first, src, dst, frame);
        }
        Ok(())
    }

    /// Convenience: send from `from` to `to` over whatever link joins them.
    pub fn send_to(&mut self, from: &SiteAddress, to: &SiteAddress, frame: Vec<u8>) -> Result<(), FabricError> {
        let link = self.link_between(from, to).ok_or_else(|| FabricError::NotAnEnd(from.clone(), usize::MAX))?;
        self.send(link, from, frame)
    }

    fn enqueue(&mut self, link: LinkId, latency: u64, src: SiteAddress, dst: SiteAddress, frame: Vec<u8>) {
        self.seq += 1;
        self.pending.insert((self.now + latency, link.0, self.seq), InFlight { src, dst, frame });
    }

    pub fn next_due(&self) -> Option<u64> {
        self.pending.keys().next().map(|k| k.0)
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Advances the clock and returns every delivery now due, ordered by
    /// (due time, link id, send sequence).
    pub fn step(&mut self, advance_ms: u64) -> Vec<Delivery> {
        self.now += advance_ms;
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            let (due, link, _) = *entry.key();
            if due > self.now {
                break;
            }
            let f = entry.remove();
            if self.links[link].closed {
                self.stats.discarded_closed += 1;
                continue;
            }
            self.stats.delivered += 1;
            self.trace.push(trace_record(due, &f));
            out.push(Delivery { t_ms: due, link: LinkId(link), src: f.src, dst: f.dst, frame: f.frame });
        }
        out
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn stats(&self) -> FabricStats {
        self.stats
    }

    pub fn write_trace_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.trace {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn trace_record(t_ms: u64, f: &InFlight) -> TraceRecord {
    let (msg_id, kind, job_id) = match decode_envelope(&f.frame) {
        Ok(env) => (env.msg_id.to_string(), env.kind.name().to_string(), env.job_id),
        Err(_) => (String::new(), "?".to_string(), String::new()),
    };
    TraceRecord {
        t_ms,
        src: f.src.to_string(),
        dst: f.dst.to_string(),
        msg_id,
        kind,
        job_id,
        dst_addr: Some(f.dst.clone()),
    }
}
