//! Extended-precision aggregation oracles.

use std::collections::BTreeMap;

use fedrelay::guestfl::{
    aggregate_fedavg, initial_weights, FitResult, ModelVector, ServerConfig, Strategy, StrategyKind, StrategyParams,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Double-double accumulator: a value carried as an unevaluated sum hi + lo.
#[derive(Clone, Copy, Default)]
pub struct Dd(pub f64, pub f64);

pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl Dd {
    pub fn add(self, x: Dd) -> Dd {
        let (s, e) = two_sum(self.0, x.0);
        let (hi, lo) = two_sum(s, e + self.1 + x.1);
        Dd(hi, lo)
    }

    pub fn prod(a: f64, b: f64) -> Dd {
        let p = a * b;
        Dd(p, a.mul_add(b, -p))
    }

    pub fn div(self, d: f64) -> f64 {
        let q = self.0 / d;
        let r = self.add(Dd::prod(-q, d));
        q + (r.0 + r.1) / d
    }
}

/// Brute-force weighted mean in extended precision.
pub fn oracle_fedavg(results: &[(Vec<f64>, u64)]) -> Vec<f64> {
    let total: u64 = results.iter().map(|r| r.1).sum();
    (0..results[0].0.len())
        .map(|j| results.iter().fold(Dd::default(), |acc, (w, n)| acc.add(Dd::prod(*n as f64, w[j]))).div(total as f64))
        .collect()
}

pub fn fit_results(raw: &[(Vec<f64>, u64)]) -> Vec<FitResult> {
    raw.iter()
        .map(|(w, n)| FitResult {
            weights: ModelVector { weights: w.clone(), version: 1 },
            num_examples: *n,
            metrics: BTreeMap::new(),
        })
        .collect()
}

/// Absolute error measured against the size of the inputs: the mean is a
/// convex combination, so cancellation can push the result toward zero
/// while the inputs stay large.
pub fn rel_err(got: f64, want: f64, scale: f64) -> f64 {
    (got - want).abs() / want.abs().max(scale).max(f64::MIN_POSITIVE)
}

/// Adam on the pseudo-gradient, written out from the recurrences.
pub struct AdamOracle {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub p: StrategyParams,
}

impl AdamOracle {
    pub fn step(&mut self, global: &[f64], avg: &[f64]) -> Vec<f64> {
        let mut next = Vec::with_capacity(global.len());
        for j in 0..global.len() {
            let delta = avg[j] - global[j];
            self.m[j] = self.p.beta1 * self.m[j] + (1.0 - self.p.beta1) * delta;
            self.v[j] = self.p.beta2 * self.v[j] + (1.0 - self.p.beta2) * delta * delta;
            next.push(global[j] + self.p.eta * self.m[j] / (self.v[j].sqrt() + self.p.tau));
        }
        next
    }
}

/// Client models spanning several orders of magnitude, with random sizes.
pub fn random_instance(rng: &mut ChaCha8Rng, clients: usize, dim: usize) -> Vec<(Vec<f64>, u64)> {
    (0..clients)
        .map(|_| {
            let mag = 10f64.powi(rng.gen_range(-3..4));
            ((0..dim).map(|_| rng.gen_range(-1.0..1.0) * mag).collect(), rng.gen_range(1..5000))
        })
        .collect()
}

/// Worst per-coordinate error of `aggregate_fedavg` against the oracle.
pub fn fedavg_error(raw: &[(Vec<f64>, u64)]) -> f64 {
    let got = aggregate_fedavg(&fit_results(raw)).unwrap();
    let want = oracle_fedavg(raw);
    (0..want.len())
        .map(|j| {
            let scale = raw.iter().map(|r| r.0[j].abs()).fold(0.0, f64::max);
            rel_err(got.weights[j], want[j], scale)
        })
        .fold(0.0, f64::max)
}

/// Runs the FedAdam strategy for `rounds` rounds on random client updates
/// and returns its worst deviation from the recurrence oracle.
pub fn fedadam_trajectory_error(seed: u64, p: StrategyParams, rounds: u32) -> f64 {
    let dim = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ServerConfig { num_rounds: rounds, strategy: StrategyKind::Fedadam, strategy_params: p, seed };
    let mut strategy = Strategy::from_config(&cfg);
    let mut oracle = AdamOracle { m: vec![0.0; dim], v: vec![0.0; dim], p };
    let mut global = initial_weights(seed, dim);
    let mut expected = global.weights.clone();
    let mut worst: f64 = 0.0;
    for round in 1..=rounds {
        // Clients move the model by a random amount around the current global.
        let raw: Vec<(Vec<f64>, u64)> = (0..3)
            .map(|_| (global.weights.iter().map(|w| w + rng.gen_range(-0.5..0.5)).collect(), rng.gen_range(10..100)))
            .collect();
        global = strategy.aggregate(&global, &fit_results(&raw)).unwrap();
        expected = oracle.step(&expected, &oracle_fedavg(&raw));
        assert_eq!(global.version, round);
        for j in 0..dim {
            worst = worst.max(rel_err(global.weights[j], expected[j], 1.0));
        }
    }
    worst
}
