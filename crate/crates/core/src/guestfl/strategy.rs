use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FitResult, GuestError, ModelVector, ServerConfig, StrategyKind, StrategyParams};

/// Initial global model: `0.1 * N(0, 1)` per coordinate from the server seed.
pub fn initial_weights(seed: u64, dim: usize) -> ModelVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.1 * z
        })
        .collect::<Vec<f64>>();
    ModelVector { weights: w, version: 0 }
}

fn check_dims(results: &[FitResult]) -> Result<usize, GuestError> {
    let first = results.first().ok_or(GuestError::Empty)?;
    let d = first.weights.dim();
    for r in results {
        if r.weights.dim() != d {
            return Err(GuestError::DimensionMismatch { expected: d, got: r.weights.dim() });
        }
        if r.num_examples == 0 {
            return Err(GuestError::Protocol("num_examples must be >= 1".into()));
        }
    }
    Ok(d)
}

/// Example-weighted mean of the client models, reduced in the order given.
///
/// Computed as `w_0 + sum_i (n_i / N) (w_i - w_0)` so identical inputs come
/// back bit-for-bit.
pub fn aggregate_fedavg(results: &[FitResult]) -> Result<ModelVector, GuestError> {
    let d = check_dims(results)?;
    let total: f64 = results.iter().map(|r| r.num_examples as f64).sum();
    let base = &results[0].weights.weights;
    let mut out = base.clone();
    for j in 0..d {
        let mut acc = 0.0;
        for r in results {
            acc += (r.num_examples as f64 / total) * (r.weights.weights[j] - base[j]);
        }
        out[j] += acc;
    }
    let version = results.iter().map(|r| r.weights.version).max().unwrap_or(0);
    ModelVector::new(out, version)
}

/// Server-side adaptive optimizer applied to the averaged pseudo-gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct FedAdam {
    pub params: StrategyParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl FedAdam {
    pub fn new(params: StrategyParams) -> Self {
        FedAdam { params, m: Vec::new(), v: Vec::new() }
    }

    /// `delta = avg - global; m = b1 m + (1-b1) delta; v = b2 v + (1-b2) delta^2;
    /// w = global + eta m / (sqrt(v) + tau)`, moments starting at zero.
    pub fn step(&mut self, global: &ModelVector, results: &[FitResult]) -> Result<ModelVector, GuestError> {
        let avg = aggregate_fedavg(results)?;
        if avg.dim() != global.dim() {
            return Err(GuestError::DimensionMismatch { expected: global.dim(), got: avg.dim() });
        }
        if self.m.is_empty() {
            self.m = vec![0.0; global.dim()];
            self.v = vec![0.0; global.dim()];
        }
        let StrategyParams { eta, beta1, beta2, tau } = self.params;
        let mut w = global.weights.clone();
        for j in 0..w.len() {
            let delta = avg.weights[j] - global.weights[j];
            self.m[j] = beta1 * self.m[j] + (1.0 - beta1) * delta;
            self.v[j] = beta2 * self.v[j] + (1.0 - beta2) * delta * delta;
            w[j] = global.weights[j] + eta * self.m[j] / (self.v[j].sqrt() + tau);
        }
        ModelVector::new(w, global.version + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    FedAvg,
    FedAdam(FedAdam),
}

impl Strategy {
    pub fn from_config(cfg: &ServerConfig) -> Self {
        match cfg.strategy {
            StrategyKind::Fedavg => Strategy::FedAvg,
            StrategyKind::Fedadam => Strategy::FedAdam(FedAdam::new(cfg.strategy_params)),
        }
    }

    pub fn aggregate(&mut self, global: &ModelVector, results: &[FitResult]) -> Result<ModelVector, GuestError> {
        match self {
            Strategy::FedAvg => {
                let mut w = aggregate_fedavg(results)?;
                w.version = global.version + 1;
                Ok(w)
            }
            Strategy::FedAdam(adam) => adam.step(global, results),
        }
    }
}
