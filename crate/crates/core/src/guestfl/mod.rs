//! A small guest FL framework: a server app runs rounds of fit and
//! federated evaluation over client apps on a synthetic least-squares task.
//!
//! The guest never talks to the runtime directly. Its nodes speak a
//! request/response protocol ([`protocol`]) to the link, and whatever
//! carries those bytes (an in-process call or the bridge) is invisible to
//! it.

mod app;
mod client;
mod data;
mod direct;
mod link;
mod node;
pub mod protocol;
mod strategy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use app::{AppConfig, ClientData, Faults, ServerConfig, StrategyKind, StrategyParams};
pub use client::ClientApp;
pub use data::{true_weights, SiteData};
pub use direct::{run_direct, DirectRun};
pub use link::GuestLink;
pub use node::{GuestNode, NodeState};
pub use strategy::{aggregate_fedavg, initial_weights, FedAdam, Strategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuestError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no results to aggregate")]
    Empty,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid app config: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVector {
    pub weights: Vec<f64>,
    pub version: u32,
}

impl ModelVector {
    pub fn new(weights: Vec<f64>, version: u32) -> Result<Self, GuestError> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(GuestError::NonFinite("model weights"));
        }
        Ok(ModelVector { weights, version })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub weights: ModelVector,
    pub num_examples: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub num_examples: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.metrics.get("accuracy").copied().unwrap_or(f64::NAN)
    }
}

/// One point of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub loss: f64,
    pub accuracy: f64,
}

pub type History = Vec<RoundRecord>;

/// Serialized form of `history.json`.
pub fn history_json(history: &History) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(history).expect("history serializes");
    v.push(b'\n');
    v
}
