//! Small 2-D setups shared by the acceptance tests, the ablation command
//! and the benches.

use crate::datakit::{Component, MixtureSpec, SampleSet};
use crate::error::Result;
use crate::gan::{pretrain, GanArch, GanModel, TrainConfig};

/// Eight modes on a circle of radius 2.
pub fn ring() -> MixtureSpec {
    MixtureSpec::ring(8, 2.0, 0.01).expect("valid ring")
}

/// Training settings that reliably cover all ring modes.
pub fn ring_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        lr_generator: 1e-3,
        lr_critic: 1e-3,
        iterations: 3000,
        seed,
        ..TrainConfig::default()
    }
}

pub fn ring_source(seed: u64) -> Result<GanModel> {
    pretrain(&ring_config(seed), &GanArch::default(), &ring(), &mut |_| {})
}

/// One mode of `spec` as its own distribution.
pub fn single_mode(spec: &MixtureSpec, mode: usize) -> Result<MixtureSpec> {
    let c = &spec.components()[mode];
    MixtureSpec::new(vec![Component {
        weight: 1.0,
        mean: c.mean.clone(),
        var: c.var.clone(),
    }])
}

/// Isotropic 2-D Gaussian.
pub fn blob(x: f64, y: f64, var: f64) -> MixtureSpec {
    MixtureSpec::gaussian(vec![x, y], var).expect("valid blob")
}

/// Centers of the disjoint clusters used for multi-source experiments.
pub const CLUSTERS: [[f64; 2]; 4] = [[-1.5, 0.0], [1.5, 0.0], [0.0, 3.0], [0.0, -3.0]];
pub const CLUSTER_VAR: f64 = 0.02;

/// Settings for pretraining a source on a single cluster.
pub fn cluster_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 600,
        lr_generator: 1e-3,
        lr_critic: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

/// One generator per entry of `clusters`, each trained only on its cluster.
pub fn cluster_sources(clusters: &[[f64; 2]], seed: u64) -> Result<Vec<GanModel>> {
    clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cfg = cluster_config(crate::derive_seed(seed, i as u64));
            pretrain(&cfg, &GanArch::default(), &blob(c[0], c[1], CLUSTER_VAR), &mut |_| {})
        })
        .collect()
}

/// Mixture over `clusters` with the given weights.
pub fn cluster_mixture(clusters: &[[f64; 2]], weights: &[f64]) -> Result<MixtureSpec> {
    MixtureSpec::new(
        clusters
            .iter()
            .zip(weights)
            .map(|(c, &w)| Component {
                weight: w,
                mean: c.to_vec(),
                var: vec![CLUSTER_VAR; 2],
            })
            .collect(),
    )
}

/// Target in the empty gap halfway between ring modes 0 and 1.
pub fn off_manifold() -> MixtureSpec {
    let a = std::f64::consts::PI / 8.0;
    blob(2.0 * a.cos(), 2.0 * a.sin(), 0.01)
}

/// Mining and finetuning iterations of the short transfer schedule; a
/// scratch baseline gets their sum.
pub const SHORT_SCHEDULE: (usize, usize) = (180, 120);

/// `n` target samples drawn with `seed`.
pub fn target(spec: &MixtureSpec, n: usize, seed: u64) -> Result<SampleSet> {
    spec.sample(n, seed)
}
