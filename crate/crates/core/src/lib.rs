//! Latent-space mining for pretrained GANs on low-dimensional data.
//!
//! A small miner network learns to push the prior of a frozen generator
//! toward a handful of target samples; with several generators a selector
//! learns which of them to draw from. Everything runs on dense `f64`
//! tensors with a hand-written reverse-mode autodiff.

pub mod autodiff;
pub mod condmine;
pub mod datakit;
pub mod error;
pub mod eval;
pub mod gan;
pub mod miner;
pub mod multimine;
pub mod scenarios;
pub mod tensor;

pub use autodiff::{AdamConfig, AdamState, DenseNetwork, Graph, NodeId};
pub use datakit::{Checkpoint, MixtureSpec, RunConfig, SampleSet, SampleSource, Selection};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use gan::{GanModel, PriorSpec, TrainConfig};
pub use miner::{MinerNetwork, TransferRun};
pub use multimine::{GeneratorFamily, SelectorState, Supersample};
pub use tensor::Tensor;

/// The random generator used for every draw in the crate.
pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    Rng64::seed_from_u64(seed)
}

/// Mixes `stream` into `seed` so independent phases of a run get
/// uncorrelated generators (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
