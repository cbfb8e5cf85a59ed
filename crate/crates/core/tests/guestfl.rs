use fedrelay::guestfl::{
    aggregate_fedavg, initial_weights, run_direct, true_weights, AppConfig, SiteData, StrategyKind, StrategyParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::aggregate::{
    fedadam_trajectory_error, fedavg_error, fit_results, oracle_fedavg, random_instance, rel_err, AdamOracle,
};

#[test]
fn fedavg_matches_extended_precision_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..100 {
        let clients = if i < 20 { 5 } else { rng.gen_range(1..9) };
        let raw = random_instance(&mut rng, clients, 16);
        let err = fedavg_error(&raw);
        assert!(err <= 1e-12, "instance {i}: relative error {err:e}");
    }
}

#[test]
fn fedavg_small_closed_forms() {
    let one = fit_results(&[(vec![0.3, -7.0], 11)]);
    assert_eq!(aggregate_fedavg(&one).unwrap().weights, vec![0.3, -7.0]);
    let pair = fit_results(&[(vec![0.0; 4], 1), (vec![2.0; 4], 1)]);
    assert_eq!(aggregate_fedavg(&pair).unwrap().weights, vec![1.0; 4]);
    let same = fit_results(&[(vec![0.1, 0.7], 3), (vec![0.1, 0.7], 9), (vec![0.1, 0.7], 1)]);
    assert_eq!(aggregate_fedavg(&same).unwrap().weights, vec![0.1, 0.7]);
}

#[test]
fn fedadam_trajectory_matches_recurrence() {
    for (seed, p) in [
        (1u64, StrategyParams::default()),
        (2, StrategyParams { eta: 0.5, beta1: 0.5, beta2: 0.9, tau: 1e-3 }),
        (3, StrategyParams { eta: 0.01, beta1: 0.0, beta2: 0.0, tau: 1e-6 }),
    ] {
        let err = fedadam_trajectory_error(seed, p, 10);
        assert!(err <= 1e-10, "seed {seed}: relative error {err:e}");
    }
}

/// Mini-batch gradient descent on 0.5 (w.x - y)^2, recomputed from scratch.
fn oracle_fit(w0: &[f64], data: &SiteData, epochs: u32, lr: f64, batch: usize) -> Vec<f64> {
    let n = data.train_x.len();
    let batch = if batch == 0 { n } else { batch.min(n) };
    let mut w = w0.to_vec();
    for _ in 0..epochs {
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let mut g = vec![0.0; w.len()];
            for i in start..end {
                let pred: f64 = w.iter().zip(&data.train_x[i]).map(|(a, b)| a * b).sum();
                let r = pred - data.train_y[i];
                for k in 0..w.len() {
                    g[k] += r * data.train_x[i][k];
                }
            }
            for k in 0..w.len() {
                w[k] -= lr * g[k] / (end - start) as f64;
            }
            start = end;
        }
    }
    w
}

fn oracle_eval(w: &[f64], data: &SiteData) -> (f64, f64) {
    let mut loss = 0.0;
    let mut hits = 0;
    for (x, y) in data.test_x.iter().zip(&data.test_y) {
        let pred: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        loss += (pred - y).powi(2);
        hits += ((pred >= 0.0) == (*y >= 0.0)) as usize;
    }
    let n = data.test_x.len() as f64;
    (loss / n, hits as f64 / n)
}

/// The whole training loop recomputed outside the guest framework.
fn oracle_history(app: &AppConfig) -> Vec<(f64, f64)> {
    let wt = true_weights(app.task_seed, app.dimension);
    let shards: Vec<SiteData> =
        app.clients.values().map(|c| SiteData::generate(&wt, c.seed, c.n_train, c.n_test, app.noise_std)).collect();
    let mut global = initial_weights(app.server.seed, app.dimension).weights;
    let mut adam =
        AdamOracle { m: vec![0.0; app.dimension], v: vec![0.0; app.dimension], p: app.server.strategy_params };
    let mut history = Vec::new();
    for _ in 0..app.server.num_rounds {
        let raw: Vec<(Vec<f64>, u64)> = shards
            .iter()
            .map(|d| (oracle_fit(&global, d, app.epochs, app.lr, app.batch_size), d.train_x.len() as u64))
            .collect();
        let avg = oracle_fedavg(&raw);
        global = match app.server.strategy {
            StrategyKind::Fedavg => avg,
            StrategyKind::Fedadam => adam.step(&global, &avg),
        };
        let evals: Vec<(f64, f64, f64)> = shards
            .iter()
            .map(|d| {
                let (l, a) = oracle_eval(&global, d);
                (l, a, d.test_x.len() as f64)
            })
            .collect();
        let total: f64 = evals.iter().map(|e| e.2).sum();
        history.push((evals.iter().map(|e| e.0 * e.2 / total).sum(), evals.iter().map(|e| e.1 * e.2 / total).sum()));
    }
    history
}

#[test]
fn direct_run_matches_pipeline_oracle() {
    for strategy in [StrategyKind::Fedavg, StrategyKind::Fedadam] {
        for sites in [&["site-1"][..], &["site-1", "site-2"], &["a", "b", "c"]] {
            let mut app = AppConfig::quickstart(sites);
            app.server.strategy = strategy;
            let run = run_direct(&app).unwrap();
            assert!(run.failure.is_none());
            let want = oracle_history(&app);
            assert_eq!(run.history.len(), want.len());
            for (r, (rec, (loss, acc))) in run.history.iter().zip(&want).enumerate() {
                assert_eq!(rec.round as usize, r + 1);
                assert!(
                    rel_err(rec.loss, *loss, 0.0) <= 1e-10,
                    "{strategy:?} {sites:?} round {}: {} vs {loss}",
                    r + 1,
                    rec.loss
                );
                assert!((rec.accuracy - acc).abs() <= 1e-12);
            }
        }
    }
}

/// Bit patterns of the quickstart history (2 clients, 3 rounds, FedAvg),
/// frozen from the first run that agreed with the pipeline oracle.
const GOLDEN: [(u64, u64); 3] = [
    (4621611438659213089, 4606056518893174784),
    (4617870435998952282, 4606337993869885440),
    (4614646098406488778, 4606337993869885440),
];

#[test]
fn quickstart_history_golden() {
    let run = run_direct(&AppConfig::quickstart(&["site-1", "site-2"])).unwrap();
    let bits: Vec<(u64, u64)> = run.history.iter().map(|r| (r.loss.to_bits(), r.accuracy.to_bits())).collect();
    assert_eq!(bits, GOLDEN, "{:?}", run.history);
}

#[test]
fn repeated_direct_runs_are_bit_identical() {
    let app = AppConfig::quickstart(&["site-1", "site-2"]);
    let a = fedrelay::guestfl::history_json(&run_direct(&app).unwrap().history);
    let b = fedrelay::guestfl::history_json(&run_direct(&app).unwrap().history);
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn fedavg_is_order_invariant(seed in any::<u64>(), clients in 1usize..8, perm_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_instance(&mut rng, clients, 8);
        let mut shuffled = raw.clone();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, prng.gen_range(0..=i));
        }
        let a = aggregate_fedavg(&fit_results(&raw)).unwrap();
        let b = aggregate_fedavg(&fit_results(&shuffled)).unwrap();
        for j in 0..8 {
            let scale = raw.iter().map(|r| r.0[j].abs()).fold(0.0, f64::max);
            prop_assert!(rel_err(a.weights[j], b.weights[j], scale) <= 1e-12);
        }
    }

    #[test]
    fn fedavg_conserves_identical_updates(w in prop::collection::vec(-1e6f64..1e6, 1..20), ns in prop::collection::vec(1u64..10_000, 1..10)) {
        let raw: Vec<(Vec<f64>, u64)> = ns.iter().map(|n| (w.clone(), *n)).collect();
        prop_assert_eq!(aggregate_fedavg(&fit_results(&raw)).unwrap().weights, w);
    }
}
