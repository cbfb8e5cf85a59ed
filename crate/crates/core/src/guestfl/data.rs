use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Generating weights of the synthetic task, shared by every site.
pub fn true_weights(task_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// One site's shard: `y = w* . x + noise`, with `x ~ N(0, I)` and
/// `noise ~ N(0, noise_std^2)`. The first `n_train` rows train, the rest test.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteData {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<f64>,
}

impl SiteData {
    pub fn generate(w_true: &[f64], site_seed: u64, n_train: usize, n_test: usize, noise_std: f64) -> Self {
        Self::generate_with_dim(w_true, w_true.len(), site_seed, n_train, n_test, noise_std)
    }

    /// Like [`SiteData::generate`] but with `dim` features; extra features
    /// beyond the generating weights carry no signal.
    pub fn generate_with_dim(
        w_true: &[f64],
        dim: usize,
        site_seed: u64,
        n_train: usize,
        n_test: usize,
        noise_std: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(site_seed);
        let mut xs = Vec::with_capacity(n_train + n_test);
        let mut ys = Vec::with_capacity(n_train + n_test);
        for _ in 0..n_train + n_test {
            let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let signal: f64 = x.iter().zip(w_true).map(|(a, b)| a * b).sum();
            ys.push(signal + noise_std * noise);
            xs.push(x);
        }
        let test_x = xs.split_off(n_train);
        let test_y = ys.split_off(n_train);
        SiteData { train_x: xs, train_y: ys, test_x, test_y }
    }

    pub fn dim(&self) -> usize {
        self.train_x.first().map_or(0, Vec::len)
    }
}
