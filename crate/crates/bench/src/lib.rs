//! Fixtures shared by the benchmarks.

use nalgebra::Vector3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semba_core::SceneConfig;

/// A scene small enough that one solver iteration stays well under a second.
pub fn scene_config() -> SceneConfig {
    SceneConfig {
        num_keyframes: 6,
        ..SceneConfig::default()
    }
}

/// `n` points uniform in the unit cube.
pub fn random_cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
        .collect()
}
