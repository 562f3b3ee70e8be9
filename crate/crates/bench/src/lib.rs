//! Fixtures shared by the benchmarks.

use alacarte_core::prompt::PromptLayout;
use alacarte_core::{BackboneConfig, BackboneParams, SourcePromptSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Frozen randomly initialised backbone of the default experiment size.
pub fn backbone() -> BackboneParams<f32> {
    BackboneParams::init(&BackboneConfig::default(), 0).unwrap().freeze()
}

pub fn prompts(bb: &BackboneParams<f32>, k: usize) -> Vec<SourcePromptSet<f32>> {
    (0..k)
        .map(|i| {
            SourcePromptSet::init(
                format!("b{i}"),
                &PromptLayout::default(),
                bb.config(),
                vec![0, 1],
                bb.fingerprint(),
                i as u64,
            )
            .unwrap()
        })
        .collect()
}

pub fn image(bb: &BackboneParams<f32>, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..bb.config().image_bytes()).map(|_| rng.random()).collect()
}

/// `n` points of dimension `d` around `clusters` centres.
pub fn clustered_points(n: usize, d: usize, clusters: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    (0..n)
        .map(|i| {
            centres[i % clusters]
                .iter()
                .map(|c| c + rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect()
}
