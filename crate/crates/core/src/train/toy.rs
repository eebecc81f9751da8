//! A 2-D GAN on a ring of eight Gaussians, small enough to check training
//! dynamics (mode coverage) in seconds.

use std::f64::consts::PI;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::state::sample_z;
use super::steps::adversarial_update;
use crate::error::{Error, Result};
use crate::losses::GeneratorLoss;
use crate::nets::{derive_seed, role, Arch, Model, ToySpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

pub const MODES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub radius: f64,
    /// Standard deviation of each mode.
    pub sigma: f64,
    pub hidden: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 5000,
            batch_size: 256,
            learning_rate: 5e-4,
            radius: 2.0,
            sigma: 0.1,
            hidden: 128,
        }
    }
}

pub fn ring_centers(radius: f64) -> Vec<[f64; 2]> {
    (0..MODES)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / MODES as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// `n` points drawn from the ring mixture, shape `(n, 2)`.
pub fn sample_ring(rng: &mut ChaCha8Rng, n: usize, radius: f64, sigma: f64) -> Tensor<f32> {
    let centers = ring_centers(radius);
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rand::Rng::random_range(rng, 0..MODES)];
        data.push((c[0] + noise.sample(rng)) as f32);
        data.push((c[1] + noise.sample(rng)) as f32);
    }
    Tensor::from_vec(&[n, 2], data)
}

/// Modes holding at least 2% of `points` within three standard deviations
/// of their center.
pub fn mode_coverage(points: &Tensor<f32>, radius: f64, sigma: f64) -> usize {
    let n = points.batch();
    let mut counts = [0usize; MODES];
    for p in points.data().chunks(2) {
        for (k, c) in ring_centers(radius).iter().enumerate() {
            let d = ((p[0] as f64 - c[0]).powi(2) + (p[1] as f64 - c[1]).powi(2)).sqrt();
            if d <= 3.0 * sigma {
                counts[k] += 1;
            }
        }
    }
    counts.iter().filter(|&&c| c as f64 >= 0.02 * n as f64).count()
}

/// Trains the toy GAN and returns the final model.
pub fn train_toy(config: &ToyConfig) -> Result<Model<f32>> {
    if config.batch_size < 2 || config.sigma <= 0.0 {
        return Err(Error::Config("toy batch_size must be >= 2 and sigma > 0".into()));
    }
    let spec = ToySpec {
        z_dim: 2,
        hidden: config.hidden,
    };
    let mut model = Model::build(Arch::Toy(spec), derive_seed(config.seed, 0))?;
    let kind = OptimizerKind::Adam { beta1: 0.5, beta2: 0.999 };
    let mut opts: IndexMap<String, Optimizer> = [("disc", role::D), ("gen", role::G)]
        .into_iter()
        .map(|(n, r)| (n.to_string(), Optimizer::new(kind, model.group(r), &model.params)))
        .collect();
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut z_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    for t in 0..config.steps {
        let real = sample_ring(&mut data_rng, config.batch_size, config.radius, config.sigma);
        let z = sample_z(&mut z_rng, config.batch_size, 2);
        adversarial_update(
            &mut model,
            &mut opts,
            config.learning_rate,
            GeneratorLoss::NonSaturating,
            t,
            (role::G, role::D),
            &real,
            &z,
        )?;
    }
    Ok(model)
}

/// Modes covered by 1000 generator samples.
pub fn evaluate_toy(model: &Model<f32>, config: &ToyConfig) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3));
    let z = sample_z(&mut rng, 1000, 2);
    let points = model.generate(&z, None)?;
    Ok(mode_coverage(&points, config.radius, config.sigma))
}
