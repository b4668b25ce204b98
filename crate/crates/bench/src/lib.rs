//! Deterministic fixtures shared by the benchmarks.

use optic4f_core::field::SpatialField;
use optic4f_core::model::{Hyperparams, Network};
use optic4f_core::rng::RngStream;

/// Uniform [0, 1) image of side `n`.
pub fn image(n: usize, seed: u64) -> SpatialField {
    let mut rng = RngStream::new(seed);
    SpatialField::from_fn(n, |_, _| rng.uniform(0.0, 1.0)).expect("n is even")
}

/// Freshly initialised network with `kernels` full-size kernels.
pub fn network(n: usize, kernels: usize, seed: u64) -> Network {
    let hp = Hyperparams { kernels, ..Hyperparams::default() };
    Network::init(hp, n, &mut RngStream::new(seed)).expect("valid hyperparameters")
}
