#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tamperscope::datagen::{
    generate_masks, generate_scenes, generate_tampered, presets, DatasetManifest, Inpainter,
    PseudoInpainter, StubProposer, StubSegmenter,
};
use tamperscope::training::TrainConfig;

/// Scenes, stub masks and tampered images from the first `k` presets,
/// written under `dir`. Returns the manifest and its base directory.
pub fn build_dataset(
    dir: &Path,
    count: usize,
    size: u32,
    k: usize,
    seed: u64,
) -> (DatasetManifest, PathBuf) {
    let images = generate_scenes(&dir.join("images"), count, size, size, seed).unwrap();
    let masks = generate_masks(&images, dir, &StubProposer, &StubSegmenter { seed }, seed).unwrap();
    let inpainters: Vec<PseudoInpainter> = presets()
        .into_iter()
        .take(k)
        .map(|p| PseudoInpainter::new(p).unwrap())
        .collect();
    let refs: Vec<&dyn Inpainter> = inpainters.iter().map(|p| p as &dyn Inpainter).collect();
    let out = generate_tampered(&masks.manifest, dir, &refs, dir, false, seed).unwrap();
    assert!(out.failures.is_empty());
    (out.manifest, dir.to_path_buf())
}

/// A configuration small enough for unit-scale training runs.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size_groups: 2,
        learning_rate: 1e-3,
        input_size: 32,
        patch_size: 8,
        feature_dim: 16,
        num_heads: 2,
        mlp_hidden: 32,
        embed_dim: 8,
        projection_hidden: 16,
        scl_cap: 64,
        val_fraction: 0.25,
        ..TrainConfig::default()
    }
}
