use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GuestError;
use crate::wire::validate_site_name;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Fedavg,
    Fedadam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams { eta: 0.1, beta1: 0.9, beta2: 0.99, tau: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub num_rounds: u32,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    #[serde(default)]
    pub strategy_params: StrategyParams,
    #[serde(default)]
    pub seed: u64,
}

fn default_strategy() -> StrategyKind {
    StrategyKind::Fedavg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientData {
    pub seed: u64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

fn default_n_train() -> usize {
    64
}
fn default_n_test() -> usize {
    32
}

/// Fault injection, for exercising failure paths end to end.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Faults {
    /// The link stops answering task pulls once this round starts.
    pub stall_round: Option<u32>,
    /// This client's data has one extra feature, so fit reports a fault.
    pub bad_dimension_site: Option<String>,
}

/// Contents of a guest app bundle's `app.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// 0 means one full batch per epoch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub task_seed: u64,
    pub clients: BTreeMap<String, ClientData>,
    pub server: ServerConfig,
    #[serde(default)]
    pub tracking: bool,
    #[serde(default = "default_poll")]
    pub poll_interval_ms: u64,
    #[serde(default)]
    pub faults: Faults,
}

fn default_dimension() -> usize {
    16
}
fn default_epochs() -> u32 {
    1
}
fn default_lr() -> f64 {
    0.05
}
fn default_noise() -> f64 {
    0.1
}
fn default_poll() -> u64 {
    50
}

impl AppConfig {
    /// Two-client, three-round quickstart configuration.
    pub fn quickstart(sites: &[&str]) -> Self {
        AppConfig {
            dimension: 16,
            epochs: 2,
            lr: 0.05,
            batch_size: 16,
            noise_std: 0.1,
            task_seed: 42,
            clients: sites
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), ClientData { seed: 1000 + i as u64, n_train: 48 + 16 * i, n_test: 32 }))
                .collect(),
            server: ServerConfig {
                num_rounds: 3,
                strategy: StrategyKind::Fedavg,
                strategy_params: StrategyParams::default(),
                seed: 7,
            },
            tracking: false,
            poll_interval_ms: 50,
            faults: Faults::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GuestError> {
        let bad = |m: String| Err(GuestError::Config(m));
        if self.dimension == 0 {
            return bad("dimension must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad("noise_std must be finite and >= 0".into());
        }
        if self.server.num_rounds == 0 {
            return bad("server.num_rounds must be >= 1".into());
        }
        let p = self.server.strategy_params;
        if ![p.eta, p.beta1, p.beta2, p.tau].iter().all(|v| v.is_finite()) {
            return bad("strategy_params must be finite".into());
        }
        if self.clients.is_empty() {
            return bad("at least one client is required".into());
        }
        for (site, c) in &self.clients {
            validate_site_name(site).map_err(|e| GuestError::Config(e.to_string()))?;
            if site == crate::wire::SERVER_SITE {
                return bad("\"server\" cannot be a client".into());
            }
            if c.n_train == 0 || c.n_test == 0 {
                return bad(format!("client {site} needs n_train >= 1 and n_test >= 1"));
            }
        }
        if self.poll_interval_ms == 0 {
            return bad("poll_interval_ms must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_uses_defaults() {
        let app: AppConfig =
            serde_json::from_str(r#"{"clients":{"site-1":{"seed":1}},"server":{"num_rounds":3}}"#).unwrap();
        assert_eq!(app.dimension, 16);
        assert_eq!(app.server.strategy, StrategyKind::Fedavg);
        assert_eq!(app.server.strategy_params, StrategyParams { eta: 0.1, beta1: 0.9, beta2: 0.99, tau: 1e-9 });
        app.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: Result<AppConfig, _> =
            serde_json::from_str(r#"{"clients":{"site-1":{"seed":1}},"server":{"num_rounds":3},"bogus":1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn zero_rounds_invalid() {
        let mut app = AppConfig::quickstart(&["site-1"]);
        app.server.num_rounds = 0;
        assert!(app.validate().is_err());
    }
}
