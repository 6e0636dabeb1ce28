#![allow(dead_code)]

use std::sync::OnceLock;

use fusion_core::dataset::{collect_episodes, Dataset};
use fusion_core::env::Split;
use fusion_core::model::{FusionModel, ModelConfig};
use fusion_core::policy::default_policy_mix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 4,
        dropout: 0.0,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
    .with_stats(&small_dataset().manifest.stats)
}

pub fn small_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| collect_episodes(6, Split::Train, &default_policy_mix(), 11).unwrap())
}

/// A model whose every parameter, zero-initialised heads included, carries
/// random weight, so that outputs depend on every input.
pub fn scrambled(cfg: ModelConfig, seed: u64) -> FusionModel {
    let mut m = FusionModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let n = Normal::new(0.0, 0.3).unwrap();
    for p in m.params.values_mut() {
        for v in p.data_mut() {
            *v += n.sample(&mut rng);
        }
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
