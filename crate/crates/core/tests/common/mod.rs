#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracle;

use alacarte_core::prompt::PromptLayout;
use alacarte_core::{BackboneConfig, BackboneParams, PromptVariant, Scalar, SourcePromptSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn small_config(n_layers: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        d_model: 16,
        n_layers,
        n_heads: 2,
        mlp_ratio: 2,
        n_classes_proxy: 3,
    }
}

/// Fresh weights with every tensor (biases and norm parameters included)
/// jittered, so no parameter sits at a trivial value.
pub fn jittered_backbone<S: Scalar>(config: &BackboneConfig, seed: u64) -> BackboneParams<S> {
    let mut bb = BackboneParams::<S>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    for t in bb.tensors_mut().unwrap() {
        for v in t.data_mut() {
            *v = S::of(v.as_f64() + noise.sample(&mut rng));
        }
    }
    bb.freeze()
}

pub fn random_image(config: &BackboneConfig, rng: &mut impl Rng) -> Vec<u8> {
    (0..config.image_bytes()).map(|_| rng.random()).collect()
}

pub fn layout(variant: PromptVariant, prompt_tokens: usize) -> PromptLayout {
    PromptLayout {
        variant,
        prompt_tokens,
        ..PromptLayout::default()
    }
}

/// `n` sources cycling through the variants, every third one with two
/// prompt tokens.
pub fn mixed_sets<S: Scalar>(bb: &BackboneParams<S>, n: usize, n_classes: usize, seed: u64) -> Vec<SourcePromptSet<S>> {
    let variants = [PromptVariant::Deep, PromptVariant::DeepShared, PromptVariant::Shallow];
    (0..n)
        .map(|i| {
            let l = layout(variants[i % 3], if i % 3 == 2 { 2 } else { 1 });
            SourcePromptSet::init(
                format!("s{i}"),
                &l,
                bb.config(),
                (0..n_classes).collect(),
                bb.fingerprint(),
                seed + i as u64,
            )
            .unwrap()
        })
        .collect()
}
