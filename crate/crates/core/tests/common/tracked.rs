//! A three-client tracked job in the simulator, and checks on metric logs.

use std::collections::BTreeMap;
use std::fs;

use fedrelay::config::{JobSpec, ScenarioConfig};
use fedrelay::guestfl::AppConfig;
use fedrelay::netsim::LinkPolicy;
use fedrelay::runtime::sim::Simulation;
use fedrelay::runtime::JobState;
use fedrelay::store::RunStore;
use fedrelay::tracking::{read_metrics, MetricRecord};

pub type Key = (String, String, u64);

pub fn keyed(records: &[MetricRecord]) -> BTreeMap<Key, (u64, u64)> {
    records.iter().map(|r| (r.key(), (r.value.to_bits(), r.t_ms))).collect()
}

pub fn assert_steps_increase(records: &[MetricRecord]) {
    let mut last: BTreeMap<(String, String), u64> = BTreeMap::new();
    for r in records {
        if let Some(prev) = last.insert((r.site.clone(), r.tag.clone()), r.step) {
            assert!(r.step > prev, "{}/{}: step {} after {prev}", r.site, r.tag, r.step);
        }
    }
}

pub fn three_site_scenario(drop: f64) -> ScenarioConfig {
    let mut s = ScenarioConfig::simple(&[("site-1", 1), ("site-2", 1), ("site-3", 1)]);
    for (i, site) in s.sites.iter_mut().enumerate() {
        site.link = LinkPolicy::lossy(drop, 0.1, (0, 40), 500 + i as u64);
    }
    s
}

pub fn tracked_app(tracking: bool) -> AppConfig {
    let mut app = AppConfig::quickstart(&["site-1", "site-2", "site-3"]);
    app.epochs = 5;
    app.server.num_rounds = 1;
    app.tracking = tracking;
    app
}

/// Runs the job, snapshotting each client worker's journal while it lives.
pub fn run_tracked(drop: f64, app: AppConfig) -> (Vec<u8>, Vec<MetricRecord>, Vec<MetricRecord>) {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path());
    let mut sim = Simulation::new(three_site_scenario(drop), Some(store.clone())).unwrap();
    sim.submit(JobSpec::new("job-m", "quick", 3), Some(app));
    let mut journals: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    sim.run_until(u64::MAX, |s| {
        for site in ["site-1", "site-2", "site-3"] {
            if let Some(w) = s.client_worker(site, "job-m") {
                journals.insert(site.to_string(), w.journal().to_vec());
            }
        }
        s.state_of("job-m").is_some_and(|st| st.is_terminal()) && s.workers().is_empty()
    });
    assert_eq!(sim.state_of("job-m"), Some(JobState::Finished));
    let history = fs::read(store.history_path("job-m")).unwrap();
    let log = read_metrics(&store.metrics_path("job-m")).unwrap_or_default();
    (history, log, journals.into_values().flatten().collect())
}
