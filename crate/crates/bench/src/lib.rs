//! Fixtures shared by the benchmarks.

use highmmt_core::modality::{large_setting_registry, standardize};
use highmmt_core::model::{large_setting_tasks, Model, ModelConfig, SharingConfig};
use highmmt_core::{StandardizedBatch, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn large_model() -> Model {
    Model::new(
        ModelConfig::large(),
        SharingConfig::default(),
        large_setting_registry(),
        large_setting_tasks(),
    )
    .expect("preset model builds")
}

/// A standardized `mosei` batch (three 50-step sequences) of `n` samples.
pub fn mosei_batch(n: usize) -> Vec<StandardizedBatch> {
    let reg = large_setting_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    ["mosei.image", "mosei.audio", "mosei.text"]
        .iter()
        .map(|name| {
            let spec = reg.spec_by_name(name).expect("registered");
            let raw = Tensor::randn(&[n, 50, spec.channel_size], 1.0, &mut rng);
            standardize(&raw, spec, &reg, "mosei").expect("shapes match")
        })
        .collect()
}

pub fn avmnist_image(n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    Tensor::randn(&[n, 28, 28, 1], 1.0, &mut rng)
}
