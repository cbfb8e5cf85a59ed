use std::collections::{BTreeMap, BTreeSet};

use fedrelay::guestfl::{history_json, run_direct};
use fedrelay::netsim::{Fabric, LinkId, LinkPolicy};
use fedrelay::reliable::Timeouts;
use fedrelay::tracking::{csv_rows, read_metrics, MetricRecord, MetricSink, MetricWriter, MetricsHub, ScalarSink};
use fedrelay::wire::{decode_envelope, encode_envelope, MsgId, SiteAddress};

mod common;
use common::tracked::{assert_steps_increase, keyed, run_tracked, tracked_app};

struct Streamed {
    log: Vec<MetricRecord>,
    file: Vec<MetricRecord>,
    journals: Vec<MetricRecord>,
    duplicates: u64,
    lost: u64,
}

/// Three writers stream `per_site` steps of two tags each to one hub.
fn stream(seed: u64, drop: f64, dup: f64, per_site: u64, flush_every: u64) -> Streamed {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("job/metrics.jsonl");
    let timeouts = Timeouts { retry_ms: 40, query_ms: 40, send_deadline_ms: 600_000, result_deadline_ms: 600_000 };
    let mut fabric = Fabric::new();
    let mut hub = MetricsHub::new(60_000);
    hub.open(MetricSink::new("job", Some(path.clone())).unwrap());
    let mut writers: Vec<(MetricWriter, LinkId, SiteAddress)> = (1..=3)
        .map(|i| {
            let addr = SiteAddress::new(format!("site-{i}"), "job");
            let link = fabric
                .connect(addr.clone(), SiteAddress::server(), LinkPolicy::lossy(drop, dup, (0, 30), seed * 10 + i))
                .unwrap();
            (MetricWriter::new("job", addr.clone(), timeouts), link, addr)
        })
        .collect();
    let mut acks = 0u128;
    let mut now = 0u64;
    let mut step = 0u64;
    loop {
        let script_due = (step < per_site).then_some(step * 10);
        let wake = writers.iter().filter_map(|w| w.0.next_wakeup()).min();
        let Some(t) = [script_due, fabric.next_due(), wake].into_iter().flatten().min() else { break };
        let t = t.max(now);
        let deliveries = fabric.step(t - now);
        now = t;
        if script_due == Some(t) {
            for (i, (w, link, addr)) in writers.iter_mut().enumerate() {
                w.set_now(t);
                w.add_scalar("train_loss", 1.0 / (step + 1 + i as u64) as f64, step).unwrap();
                w.add_scalar("accuracy", (step as f64 * 0.01).min(1.0), step * 2).unwrap();
                if (step + 1) % flush_every == 0 || step + 1 == per_site {
                    let mut out = Vec::new();
                    w.flush(t, &mut out);
                    for env in out {
                        fabric.send(*link, addr, encode_envelope(&env).unwrap()).unwrap();
                    }
                }
            }
            step += 1;
        }
        for d in deliveries {
            let env = decode_envelope(&d.frame).unwrap();
            if d.dst == SiteAddress::server() {
                let mut out = Vec::new();
                acks += 1;
                hub.handle(t, &env, MsgId(1 << 100 | acks), &mut out);
                for ack in out {
                    fabric.send(d.link, &SiteAddress::server(), encode_envelope(&ack).unwrap()).unwrap();
                }
            } else {
                let w = writers.iter_mut().find(|w| w.2 == d.dst).unwrap();
                w.0.on_ack(&env);
            }
        }
        for (w, link, addr) in writers.iter_mut() {
            let mut out = Vec::new();
            w.poll(t, &mut out);
            for env in out {
                fabric.send(*link, addr, encode_envelope(&env).unwrap()).unwrap();
            }
        }
        if step >= per_site && writers.iter().all(|w| w.0.is_drained()) && fabric.next_due().is_none() {
            break;
        }
    }
    let sink = hub.sink("job").unwrap();
    Streamed {
        log: sink.records().to_vec(),
        file: read_metrics(&path).unwrap(),
        journals: writers.iter().flat_map(|w| w.0.journal().to_vec()).collect(),
        duplicates: sink.duplicates(),
        lost: writers.iter().map(|w| w.0.lost()).sum(),
    }
}

#[test]
fn three_clients_five_steps_give_fifteen_records() {
    let s = stream(1, 0.0, 0.0, 5, 1);
    let losses: Vec<&MetricRecord> = s.log.iter().filter(|r| r.tag == "train_loss").collect();
    assert_eq!(losses.len(), 15);
    for site in ["site-1", "site-2", "site-3"] {
        let steps: Vec<u64> = losses.iter().filter(|r| r.site == site).map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    }
    assert_eq!(s.file, s.log);
}

#[test]
fn three_hundred_records_survive_loss_and_duplication() {
    for seed in 0..10 {
        // 3 sites x 50 steps x 2 tags.
        let s = stream(seed, 0.5, 0.3, 50, 7);
        assert_eq!(s.lost, 0);
        assert_eq!(s.journals.len(), 300);
        assert_eq!(s.log.len(), 300, "seed {seed}");
        assert_eq!(keyed(&s.log), keyed(&s.journals), "seed {seed}");
        assert_eq!(s.file, s.log);
        assert_steps_increase(&s.log);
        assert!(s.duplicates > 0, "seed {seed}: no duplicate ever reached the sink");
    }
}

#[test]
fn exported_rows_are_monotone_per_site() {
    let s = stream(3, 0.5, 0.2, 40, 3);
    for tag in ["train_loss", "accuracy", "missing"] {
        let rows = csv_rows(&s.log, tag);
        assert_eq!(rows.len(), s.log.iter().filter(|r| r.tag == tag).count());
        let mut last: BTreeMap<String, u64> = BTreeMap::new();
        for (step, site, _) in rows {
            if let Some(prev) = last.insert(site, step) {
                assert!(step > prev);
            }
        }
    }
}

#[test]
fn runtime_log_equals_journals_under_heavy_loss() {
    let (_, log, journals) = run_tracked(0.5, tracked_app(true));
    assert_eq!(journals.len(), 15);
    assert_eq!(keyed(&log), keyed(&journals));
    assert_eq!(log.len(), 15);
    assert_steps_increase(&log);
    let sites: BTreeSet<&str> = log.iter().map(|r| r.site.as_str()).collect();
    assert_eq!(sites.len(), 3);
}

#[test]
fn tracking_leaves_history_unchanged() {
    let (with, log, _) = run_tracked(0.2, tracked_app(true));
    let (without, none, _) = run_tracked(0.2, tracked_app(false));
    assert_eq!(with, without);
    assert_eq!(with, history_json(&run_direct(&tracked_app(false)).unwrap().history));
    assert!(!log.is_empty());
    assert!(none.is_empty());
}
