//! On-disk configuration: `scenario.json`, `job.json` and `app.json`.
//! Field-by-field schemas are in `docs/config.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::INPROC_TARGET;
use crate::guestfl::AppConfig;
use crate::netsim::{splitmix64, LinkPolicy};
use crate::reliable::{Timeouts, DEFAULT_RETENTION_MS};
use crate::wire::{fnv1a64, validate_site_name, SERVER_SITE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let bytes = fs::read(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Messaging {
    #[default]
    Relay,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub name: String,
    #[serde(default = "one")]
    pub slots: u32,
    /// Policy for every link between this site and the server.
    #[serde(default)]
    pub link: LinkPolicy,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeartbeatConfig {
    pub interval_ms: u64,
    /// Intervals without any traffic from a site before it is offline.
    pub missed_limit: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        HeartbeatConfig { interval_ms: 1000, missed_limit: 3 }
    }
}

/// Cuts every link of `site` during `[from_ms, until_ms)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionWindow {
    pub site: String,
    pub from_ms: u64,
    #[serde(default)]
    pub until_ms: Option<u64>,
}

impl PartitionWindow {
    pub fn active_at(&self, t: u64) -> bool {
        t >= self.from_ms && self.until_ms.is_none_or(|u| t < u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub messaging: Messaging,
    #[serde(default)]
    pub allow_direct: bool,
    #[serde(default)]
    pub direct_link: LinkPolicy,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    #[serde(default)]
    pub partitions: Vec<PartitionWindow>,
    /// Registered guest apps by name.
    #[serde(default)]
    pub apps: BTreeMap<String, AppConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retention")]
    pub retention_ms: u64,
    /// Simulated time after which a run gives up.
    #[serde(default = "default_horizon")]
    pub horizon_ms: u64,
}

fn default_retention() -> u64 {
    DEFAULT_RETENTION_MS
}
fn default_horizon() -> u64 {
    24 * 3600 * 1000
}

impl ScenarioConfig {
    /// Lossless sites with the given slot counts and default everything else.
    pub fn simple(sites: &[(&str, u32)]) -> Self {
        ScenarioConfig {
            sites: sites
                .iter()
                .map(|(n, s)| SiteConfig { name: n.to_string(), slots: *s, link: LinkPolicy::lossless() })
                .collect(),
            messaging: Messaging::Relay,
            allow_direct: false,
            direct_link: LinkPolicy::lossless(),
            heartbeat: HeartbeatConfig::default(),
            partitions: Vec::new(),
            apps: BTreeMap::new(),
            seed: 0,
            retention_ms: DEFAULT_RETENTION_MS,
            horizon_ms: default_horizon(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = load_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sites.is_empty() {
            return Err(invalid("scenario has no sites"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sites {
            validate_site_name(&s.name).map_err(|e| invalid(format!("site {:?}: {e}", s.name)))?;
            if s.name == SERVER_SITE || s.name == "cli" {
                return Err(invalid(format!("site name {:?} is reserved", s.name)));
            }
            if !seen.insert(&s.name) {
                return Err(invalid(format!("duplicate site {:?}", s.name)));
            }
            s.link.validate().map_err(|e| invalid(format!("site {}: {e}", s.name)))?;
        }
        self.direct_link.validate().map_err(|e| invalid(format!("direct_link: {e}")))?;
        if self.heartbeat.interval_ms == 0 || self.heartbeat.missed_limit == 0 {
            return Err(invalid("heartbeat interval_ms and missed_limit must be positive"));
        }
        for p in &self.partitions {
            if !seen.contains(&p.site) {
                return Err(invalid(format!("partition names unknown site {:?}", p.site)));
            }
            if p.until_ms.is_some_and(|u| u <= p.from_ms) {
                return Err(invalid(format!("partition of {} ends before it starts", p.site)));
            }
        }
        for (name, app) in &self.apps {
            app.validate().map_err(|e| invalid(format!("app {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn site(&self, name: &str) -> Option<&SiteConfig> {
        self.sites.iter().find(|s| s.name == name)
    }

    pub fn site_names(&self) -> Vec<String> {
        self.sites.iter().map(|s| s.name.clone()).collect()
    }

    /// Seed of the link between `site`'s control process and the server.
    pub fn site_link_seed(&self, site: &str) -> u64 {
        let base = self.site(site).map_or(0, |s| s.link.seed);
        splitmix64(self.seed ^ fnv1a64(site.as_bytes())) ^ base
    }

    /// Seed of a link that belongs to one job's worker at `site`.
    pub fn worker_link_seed(&self, site: &str, job_id: &str, job_seed: u64) -> u64 {
        splitmix64(self.site_link_seed(site) ^ fnv1a64(job_id.as_bytes()) ^ job_seed)
    }

    pub fn partitioned_at(&self, site: &str, t: u64) -> bool {
        self.partitions.iter().any(|p| p.site == site && p.active_at(t))
    }

    /// Times at which some partition starts or ends, ascending.
    pub fn partition_edges(&self) -> Vec<u64> {
        let mut edges: Vec<u64> =
            self.partitions.iter().flat_map(|p| [Some(p.from_ms), p.until_ms]).flatten().collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// Logical LGS port; informational in simulator mode.
    pub lgs_port: u16,
    /// Where the server worker finds the guest link.
    pub link_target: String,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig { lgs_port: 9092, link_target: INPROC_TARGET.to_string() }
    }
}

/// Contents of `job.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub job_id: String,
    pub app_ref: String,
    #[serde(default = "one")]
    pub min_sites: u32,
    #[serde(default)]
    pub site_filter: Option<Vec<String>>,
    /// Slots needed per site; sites not listed need one.
    #[serde(default)]
    pub resources: BTreeMap<String, u32>,
    #[serde(default)]
    pub messaging: Messaging,
    #[serde(default)]
    pub reliable: Timeouts,
    #[serde(default)]
    pub bridge: BridgeConfig,
    #[serde(default)]
    pub seed: u64,
}

impl JobSpec {
    pub fn new(job_id: &str, app_ref: &str, min_sites: u32) -> Self {
        JobSpec {
            job_id: job_id.to_string(),
            app_ref: app_ref.to_string(),
            min_sites,
            site_filter: None,
            resources: BTreeMap::new(),
            messaging: Messaging::Relay,
            reliable: Timeouts::default(),
            bridge: BridgeConfig::default(),
            seed: 0,
        }
    }

    pub fn slots_for(&self, site: &str) -> u32 {
        self.resources.get(site).copied().unwrap_or(1)
    }

    pub fn admits_site(&self, site: &str) -> bool {
        self.site_filter.as_ref().is_none_or(|f| f.iter().any(|s| s == site))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_job_id(&self.job_id)?;
        if self.app_ref.is_empty() {
            return Err(invalid("app_ref is empty"));
        }
        if self.min_sites == 0 {
            return Err(invalid("min_sites must be at least 1"));
        }
        if self.resources.values().any(|&s| s == 0) {
            return Err(invalid("resources must request at least one slot per site"));
        }
        self.reliable.validate().map_err(invalid)?;
        Ok(())
    }
}

/// Job ids double as directory names and worker names.
pub fn validate_job_id(id: &str) -> Result<(), ConfigError> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id != "."
        && id != ".."
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("job_id {id:?} must be 1-64 chars of [A-Za-z0-9._-]")))
    }
}

/// A job directory: `job.json` plus an optional `app.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct JobBundle {
    pub job: JobSpec,
    pub app: Option<AppConfig>,
}

impl JobBundle {
    pub fn load(dir: &Path) -> Result<Self, ConfigError> {
        let job_path = dir.join("job.json");
        if !job_path.is_file() {
            return Err(invalid(format!("{}: missing job.json", dir.display())));
        }
        let job: JobSpec = load_json(&job_path)?;
        job.validate()?;
        let app_path = dir.join("app.json");
        let app = if app_path.is_file() {
            let app: AppConfig = load_json(&app_path)?;
            app.validate().map_err(|e| invalid(format!("{}: {e}", app_path.display())))?;
            Some(app)
        } else {
            None
        };
        Ok(JobBundle { job, app })
    }
}

/// A self-hosted project: `scenario.json`, `app.json`, optional `job.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct Project {
    pub scenario: ScenarioConfig,
    pub bundle: JobBundle,
}

impl Project {
    pub fn load(dir: &Path) -> Result<Self, ConfigError> {
        let scenario = ScenarioConfig::load(&dir.join("scenario.json"))?;
        let app_path = dir.join("app.json");
        if !app_path.is_file() {
            return Err(invalid(format!("{}: missing app.json", dir.display())));
        }
        let app: AppConfig = load_json(&app_path)?;
        app.validate().map_err(|e| invalid(format!("{}: {e}", app_path.display())))?;
        let job = if dir.join("job.json").is_file() {
            let job: JobSpec = load_json(&dir.join("job.json"))?;
            job.validate()?;
            job
        } else {
            let mut job = JobSpec::new("job-1", "app", app.clients.len() as u32);
            job.site_filter = Some(app.clients.keys().cloned().collect());
            job
        };
        Ok(Project { scenario, bundle: JobBundle { job, app: Some(app) } })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_and_duplicate_sites() {
        let mut s = ScenarioConfig::simple(&[("server", 1)]);
        assert!(s.validate().is_err());
        s = ScenarioConfig::simple(&[("a", 1), ("a", 1)]);
        assert!(s.validate().is_err());
        s = ScenarioConfig::simple(&[("a", 1), ("b", 2)]);
        s.validate().unwrap();
    }

    #[test]
    fn job_defaults_from_minimal_json() {
        let j: JobSpec = serde_json::from_str(r#"{"job_id":"j1","app_ref":"a"}"#).unwrap();
        assert_eq!(j.min_sites, 1);
        assert_eq!(j.messaging, Messaging::Relay);
        assert_eq!(j.bridge.link_target, "inproc");
        assert_eq!(j.slots_for("x"), 1);
        j.validate().unwrap();
    }

    #[test]
    fn job_id_rules() {
        assert!(validate_job_id("job-1.a_b").is_ok());
        assert!(validate_job_id("..").is_err());
        assert!(validate_job_id("a/b").is_err());
        assert!(validate_job_id(&"x".repeat(65)).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<JobSpec>(r#"{"job_id":"j","app_ref":"a","bogus":1}"#).is_err());
    }

    #[test]
    fn partition_window() {
        let p = PartitionWindow { site: "a".into(), from_ms: 10, until_ms: Some(20) };
        assert!(!p.active_at(9) && p.active_at(10) && p.active_at(19) && !p.active_at(20));
    }
}
