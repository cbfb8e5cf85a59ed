use std::collections::BTreeMap;

use super::{EvalResult, FitResult, GuestError, ModelVector, SiteData};
use crate::tracking::ScalarSink;

/// A client app: local gradient descent on squared error, plus evaluation.
#[derive(Clone, Debug)]
pub struct ClientApp {
    data: SiteData,
    epochs: u32,
    lr: f64,
    batch_size: usize,
    train_step: u64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ClientApp {
    pub fn new(data: SiteData, epochs: u32, lr: f64, batch_size: usize) -> Self {
        ClientApp { data, epochs, lr, batch_size, train_step: 0 }
    }

    pub fn data(&self) -> &SiteData {
        &self.data
    }

    fn check(&self, global: &ModelVector) -> Result<(), GuestError> {
        if global.dim() != self.data.dim() {
            return Err(GuestError::DimensionMismatch { expected: self.data.dim(), got: global.dim() });
        }
        if global.weights.iter().any(|w| !w.is_finite()) {
            return Err(GuestError::NonFinite("global weights"));
        }
        Ok(())
    }

    /// Runs `epochs` passes of mini-batch gradient descent on
    /// `0.5 * (w.x - y)^2` starting from `global`. Each epoch's mean batch
    /// loss is reported to `sink` as `train_loss` under a step counter that
    /// keeps counting across rounds. `config` may override `epochs` and `lr`.
    pub fn fit(
        &mut self,
        global: &ModelVector,
        config: &BTreeMap<String, f64>,
        sink: &mut dyn ScalarSink,
    ) -> Result<FitResult, GuestError> {
        self.check(global)?;
        let epochs = config.get("epochs").map_or(self.epochs, |e| *e as u32);
        let lr = config.get("lr").copied().unwrap_or(self.lr);
        let n = self.data.train_x.len();
        let batch = if self.batch_size == 0 { n } else { self.batch_size.min(n) };
        let mut w = global.weights.clone();
        let mut grad = vec![0.0; w.len()];
        let mut last_loss = 0.0;
        for _ in 0..epochs {
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for start in (0..n).step_by(batch) {
                let end = (start + batch).min(n);
                grad.iter_mut().for_each(|g| *g = 0.0);
                let mut loss = 0.0;
                for i in start..end {
                    let x = &self.data.train_x[i];
                    let r = dot(&w, x) - self.data.train_y[i];
                    loss += r * r;
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi;
                    }
                }
                let m = (end - start) as f64;
                for (wi, g) in w.iter_mut().zip(&grad) {
                    *wi -= lr * (g / m);
                }
                loss_sum += loss / m;
                batches += 1;
            }
            last_loss = loss_sum / batches as f64;
            if let Err(e) = sink.add_scalar("train_loss", last_loss, self.train_step) {
                log::warn!("train_loss not tracked: {e}");
            }
            self.train_step += 1;
        }
        let weights = ModelVector::new(w, global.version + 1)?;
        Ok(FitResult {
            weights,
            num_examples: n as u64,
            metrics: BTreeMap::from([("train_loss".to_string(), last_loss)]),
        })
    }

    /// Mean squared error on the held-out shard, and sign agreement between
    /// prediction and target as accuracy.
    pub fn evaluate(&self, global: &ModelVector) -> Result<EvalResult, GuestError> {
        self.check(global)?;
        let n = self.data.test_x.len();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, &y) in self.data.test_x.iter().zip(&self.data.test_y) {
            let pred = dot(&global.weights, x);
            loss += (pred - y) * (pred - y);
            if (pred >= 0.0) == (y >= 0.0) {
                correct += 1;
            }
        }
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(GuestError::NonFinite("evaluation loss"));
        }
        Ok(EvalResult {
            loss,
            num_examples: n as u64,
            metrics: BTreeMap::from([("accuracy".to_string(), correct as f64 / n as f64)]),
        })
    }
}
