//! Shared fixtures for the criterion benchmarks.

use lhs_core::gmm::{subsample_features, train_gmm_on_samples};
use lhs_core::synth::{default_classes, synth_images};
use lhs_core::{GmmModel, GrayImage, SamplingMode, TrainConfig, WhiteningStats};

/// A deterministic textured image of the given side length.
pub fn texture(size: usize, seed: u64) -> GrayImage {
    let classes = default_classes(2);
    synth_images(&classes, 1, size, seed).expect("synthetic image").remove(0).0
}

/// A small mixture and whitening statistics fitted on a few textures.
pub fn fitted_model(components: usize, mode: SamplingMode) -> (GmmModel, WhiteningStats) {
    let images: Vec<GrayImage> = (0..4).map(|s| texture(64, s)).collect();
    let cfg = TrainConfig {
        components,
        max_samples: 20_000,
        ..TrainConfig::default()
    };
    let samples = subsample_features(&images, mode, &cfg).expect("samples");
    let model = train_gmm_on_samples(&samples, mode, &cfg).expect("mixture").model;
    let stats = lhs_core::encoder::compute_whitening(&model, &samples).expect("whitening");
    (model, stats)
}
