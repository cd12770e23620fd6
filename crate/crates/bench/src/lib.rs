//! Shared fixtures for the criterion benches.

use infinilab_core::model::{DecoderWeights, ModelConfig};
use infinilab_core::Scalar;

/// Deterministic token stream without pulling an RNG into the fixture.
pub fn token_cycle(len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|i| (i.wrapping_mul(31) + 7) % vocab).collect()
}

/// The shape every bench trains or evaluates: the desk model.
pub fn desk_weights<S: Scalar>() -> (ModelConfig, DecoderWeights<S>) {
    let cfg = ModelConfig::desk();
    let w = DecoderWeights::init(&cfg, 7).expect("desk config is valid");
    (cfg, w)
}
