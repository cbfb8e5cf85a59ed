//! Experiment tracking: client-side scalar writers stream batches of
//! [`MetricRecord`]s to a server-side sink that appends them, once each, to
//! `runs/<job_id>/metrics.jsonl`.
//!
//! Batches travel as METRIC envelopes addressed to the server control
//! process. The sink ACKs every copy it sees; the writer re-sends a batch
//! (same `msg_id`) every `retry_ms` until acknowledged. The sink drops
//! records whose (site, tag, step) it has already logged. A writer keeps at
//! most one batch in flight, so each site's records reach the log in the
//! order they were written.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliable::Timeouts;
use crate::wire::{Envelope, MessageKind, MsgId, MsgIdGen, SiteAddress};

pub const FLUSH_EVERY: usize = 100;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("value for {tag:?} at step {step} is not finite")]
    NonFinite { tag: String, step: u64 },
    #[error("step {step} for {tag:?} does not follow {last}")]
    NonMonotonic { tag: String, step: u64, last: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Anything that accepts scalars in the `add_scalar(tag, value, step)` shape.
pub trait ScalarSink {
    fn add_scalar(&mut self, tag: &str, value: f64, step: u64) -> Result<(), TrackingError>;
}

/// Discards everything; used when tracking is off.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl ScalarSink for NullSink {
    fn add_scalar(&mut self, _tag: &str, _value: f64, _step: u64) -> Result<(), TrackingError> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub job_id: String,
    pub site: String,
    pub tag: String,
    pub value: f64,
    pub step: u64,
    pub t_ms: u64,
}

impl MetricRecord {
    pub fn key(&self) -> (String, String, u64) {
        (self.site.clone(), self.tag.clone(), self.step)
    }
}

#[derive(Debug)]
struct Batch {
    records: Vec<MetricRecord>,
    attempt: u32,
    first_sent: u64,
    next_retry: u64,
}

/// Client-side writer for one job worker.
#[derive(Debug)]
pub struct MetricWriter {
    job_id: String,
    site: String,
    src: SiteAddress,
    dst: SiteAddress,
    ids: MsgIdGen,
    timeouts: Timeouts,
    now: u64,
    buffer: Vec<MetricRecord>,
    last_step: BTreeMap<String, u64>,
    unacked: BTreeMap<MsgId, Batch>,
    /// A flush was asked for while a batch was still in flight.
    flush_pending: bool,
    journal: Vec<MetricRecord>,
    lost: u64,
}

impl MetricWriter {
    pub fn new(job_id: &str, src: SiteAddress, timeouts: Timeouts) -> Self {
        MetricWriter {
            job_id: job_id.to_string(),
            site: src.site.clone(),
            ids: MsgIdGen::for_label(&format!("metrics:{src}")),
            src,
            dst: SiteAddress::server(),
            timeouts,
            now: 0,
            buffer: Vec::new(),
            last_step: BTreeMap::new(),
            unacked: BTreeMap::new(),
            flush_pending: false,
            journal: Vec::new(),
            lost: 0,
        }
    }

    /// Timestamp applied to records added from now on.
    pub fn set_now(&mut self, now: u64) {
        self.now = now;
    }

    /// Every record accepted by `add_scalar`, in order.
    pub fn journal(&self) -> &[MetricRecord] {
        &self.journal
    }

    /// Records given up on after the send deadline.
    pub fn lost(&self) -> u64 {
        self.lost
    }

    pub fn is_drained(&self) -> bool {
        self.buffer.is_empty() && self.unacked.is_empty()
    }

    /// Sends buffered records as one METRIC batch, or as soon as the batch
    /// in flight is acknowledged.
    pub fn flush(&mut self, now: u64, out: &mut Vec<Envelope>) {
        if self.buffer.is_empty() {
            return;
        }
        if !self.unacked.is_empty() {
            self.flush_pending = true;
            return;
        }
        self.flush_pending = false;
        let records = std::mem::take(&mut self.buffer);
        let id = self.ids.next_id();
        let batch = Batch { records, attempt: 1, first_sent: now, next_retry: now + self.timeouts.retry_ms };
        out.push(self.envelope(id, &batch));
        self.unacked.insert(id, batch);
    }

    fn envelope(&self, id: MsgId, batch: &Batch) -> Envelope {
        let mut env = Envelope::request(
            id,
            MessageKind::Metric,
            self.job_id.clone(),
            self.src.clone(),
            self.dst.clone(),
            serde_json::to_vec(&batch.records).expect("records serialize"),
        );
        env.attempt = batch.attempt;
        env
    }

    /// Re-sends the unacknowledged batch and flushes a full buffer or a
    /// deferred flush.
    pub fn poll(&mut self, now: u64, out: &mut Vec<Envelope>) {
        self.now = now;
        if self.flush_pending || self.buffer.len() >= FLUSH_EVERY {
            self.flush(now, out);
        }
        let mut expired = Vec::new();
        let ids: Vec<MsgId> = self.unacked.keys().copied().collect();
        for id in ids {
            let batch = self.unacked.get_mut(&id).expect("present");
            if now >= batch.first_sent + self.timeouts.send_deadline_ms {
                expired.push(id);
            } else if now >= batch.next_retry {
                batch.attempt += 1;
                while batch.next_retry <= now {
                    batch.next_retry += self.timeouts.retry_ms;
                }
                let batch = &self.unacked[&id];
                out.push(self.envelope(id, batch));
            }
        }
        for id in expired {
            let batch = self.unacked.remove(&id).expect("present");
            log::warn!("{}: gave up on {} metric records", self.src, batch.records.len());
            self.lost += batch.records.len() as u64;
        }
    }

    /// Consumes an ACK for one of our batches.
    pub fn on_ack(&mut self, env: &Envelope) -> bool {
        env.kind == MessageKind::Ack && self.unacked.remove(&env.correlation_id).is_some()
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        let t = self.unacked.values().map(|b| b.next_retry.min(b.first_sent + self.timeouts.send_deadline_ms)).min();
        let sendable = self.unacked.is_empty() && !self.buffer.is_empty();
        if sendable && (self.flush_pending || self.buffer.len() >= FLUSH_EVERY) {
            Some(self.now)
        } else {
            t
        }
    }
}

impl ScalarSink for MetricWriter {
    fn add_scalar(&mut self, tag: &str, value: f64, step: u64) -> Result<(), TrackingError> {
        if !value.is_finite() {
            return Err(TrackingError::NonFinite { tag: tag.to_string(), step });
        }
        if let Some(&last) = self.last_step.get(tag) {
            if step <= last {
                return Err(TrackingError::NonMonotonic { tag: tag.to_string(), step, last });
            }
        }
        self.last_step.insert(tag.to_string(), step);
        let rec = MetricRecord {
            job_id: self.job_id.clone(),
            site: self.site.clone(),
            tag: tag.to_string(),
            value,
            step,
            t_ms: self.now,
        };
        self.journal.push(rec.clone());
        self.buffer.push(rec);
        Ok(())
    }
}

/// Server-side, append-only log for one job.
#[derive(Debug)]
pub struct MetricSink {
    job_id: String,
    path: Option<PathBuf>,
    seen: BTreeSet<(String, String, u64)>,
    records: Vec<MetricRecord>,
    duplicates: u64,
    rejected: u64,
}

impl MetricSink {
    /// `path` of `None` keeps records in memory only.
    pub fn new(job_id: &str, path: Option<PathBuf>) -> io::Result<Self> {
        if let Some(p) = &path {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            File::create(p)?;
        }
        Ok(MetricSink {
            job_id: job_id.to_string(),
            path,
            seen: BTreeSet::new(),
            records: Vec::new(),
            duplicates: 0,
            rejected: 0,
        })
    }

    /// Appends the records not seen before; returns how many were new.
    pub fn accept(&mut self, batch: &[MetricRecord]) -> io::Result<usize> {
        let mut fresh = Vec::new();
        for rec in batch {
            if rec.job_id != self.job_id || !rec.value.is_finite() {
                self.rejected += 1;
                continue;
            }
            if self.seen.insert(rec.key()) {
                fresh.push(rec.clone());
            } else {
                self.duplicates += 1;
            }
        }
        if let (Some(path), false) = (&self.path, fresh.is_empty()) {
            let mut w = BufWriter::new(OpenOptions::new().append(true).open(path)?);
            for rec in &fresh {
                serde_json::to_writer(&mut w, rec)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        let n = fresh.len();
        self.records.extend(fresh);
        Ok(n)
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }
}

/// Routes METRIC envelopes to per-job sinks. Sinks outlive their job for a
/// retention window so late batches still land.
#[derive(Debug, Default)]
pub struct MetricsHub {
    sinks: BTreeMap<String, (MetricSink, Option<u64>)>,
    retention_ms: u64,
    unknown_job_drops: u64,
}

impl MetricsHub {
    pub fn new(retention_ms: u64) -> Self {
        MetricsHub { sinks: BTreeMap::new(), retention_ms, unknown_job_drops: 0 }
    }

    pub fn open(&mut self, sink: MetricSink) {
        self.sinks.insert(sink.job_id.clone(), (sink, None));
    }

    pub fn mark_terminal(&mut self, job_id: &str, now: u64) {
        if let Some((_, t)) = self.sinks.get_mut(job_id) {
            t.get_or_insert(now);
        }
    }

    pub fn sink(&self, job_id: &str) -> Option<&MetricSink> {
        self.sinks.get(job_id).map(|(s, _)| s)
    }

    pub fn unknown_job_drops(&self) -> u64 {
        self.unknown_job_drops
    }

    /// Handles one METRIC envelope; the ACK (always sent) goes to `out`.
    pub fn handle(&mut self, now: u64, env: &Envelope, ack_id: MsgId, out: &mut Vec<Envelope>) {
        out.push(env.reply(ack_id, MessageKind::Ack, Vec::new()));
        let retention = self.retention_ms;
        let Some((sink, terminal)) = self.sinks.get_mut(&env.job_id) else {
            self.unknown_job_drops += 1;
            log::warn!("metrics for unknown job {:?} dropped", env.job_id);
            return;
        };
        if terminal.is_some_and(|t| now.saturating_sub(t) > retention) {
            self.unknown_job_drops += 1;
            return;
        }
        match serde_json::from_slice::<Vec<MetricRecord>>(&env.payload) {
            Ok(batch) => {
                if let Err(e) = sink.accept(&batch) {
                    log::error!("metrics log for {} not written: {e}", env.job_id);
                }
            }
            Err(e) => {
                sink.rejected += 1;
                log::warn!("bad metric batch from {}: {e}", env.src);
            }
        }
    }

    /// Forgets sinks whose retention window has passed.
    pub fn gc(&mut self, now: u64) {
        let retention = self.retention_ms;
        self.sinks.retain(|_, (_, t)| t.is_none_or(|t| now.saturating_sub(t) <= retention));
    }
}

pub fn read_metrics(path: &Path) -> io::Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

/// Rows `step,site,value` for `tag`, sorted by (step, site).
pub fn csv_rows(records: &[MetricRecord], tag: &str) -> Vec<(u64, String, f64)> {
    let mut rows: Vec<_> = records.iter().filter(|r| r.tag == tag).map(|r| (r.step, r.site.clone(), r.value)).collect();
    rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    rows
}

/// Writes the CSV projection of `metrics_path` for `tag` to `out_path`.
/// An unknown tag yields a header-only file. Returns the data row count.
pub fn export_csv(metrics_path: &Path, tag: &str, out_path: &Path) -> io::Result<usize> {
    let records = read_metrics(metrics_path)?;
    let rows = csv_rows(&records, tag);
    let mut w = BufWriter::new(File::create(out_path)?);
    writeln!(w, "step,site,value")?;
    for (step, site, value) in &rows {
        writeln!(w, "{step},{site},{value}")?;
    }
    w.flush()?;
    Ok(rows.len())
}
