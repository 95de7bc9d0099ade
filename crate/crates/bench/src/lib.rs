//! Fixtures shared by the benchmarks under `benches/`.

use latentmine::gan::GanArch;
use latentmine::miner::MinerNetwork;
use latentmine::{GanModel, Result, Tensor};

/// Default-sized source model with a miner in front of it.
pub fn mining_fixture(seed: u64) -> Result<(GanModel, MinerNetwork)> {
    let mut rng = latentmine::rng(seed);
    let model = GanModel::init(&GanArch::default(), 2, &mut rng)?;
    let miner = MinerNetwork::new(model.latent_dim(), 2, model.latent_dim(), &mut rng)?;
    Ok((model, miner))
}

/// Standard normal cloud, with the second set shifted by one unit.
pub fn cloud_pair(n: usize, d: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = latentmine::rng(seed);
    let a = Tensor::randn(n, d, 1.0, &mut rng);
    let b = Tensor::randn(n, d, 1.0, &mut rng).map(|v| v + 1.0);
    (a, b)
}
