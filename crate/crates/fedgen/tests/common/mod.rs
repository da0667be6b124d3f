//! Shared helpers for integration tests: a tiny on-disk dataset and a
//! desk-of-the-desk experiment configuration that finishes in seconds.

use std::path::Path;

use fedgen::datasets::{dataset_dir, LabeledImageDataset};
use fedgen::harness::{ExperimentConfig, Method};
use fedgen::models::ModelSize;

/// Two-class 8x8 toy set: class 0 dark with a bright top-left corner, class 1
/// bright with a dark bottom-right corner; small deterministic per-sample
/// jitter so images are distinct.
pub fn toy_dataset(count: usize, seed_offset: usize) -> LabeledImageDataset {
    let mut images = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 2;
        let jitter = ((i + seed_offset) % 7) as f32 * 0.01;
        for y in 0..8 {
            for x in 0..8 {
                let base = if class == 0 { 0.2 } else { 0.8 };
                let corner = if class == 0 {
                    if x < 3 && y < 3 { 0.6 } else { 0.0 }
                } else if x >= 5 && y >= 5 {
                    -0.6
                } else {
                    0.0
                };
                images.push((base + corner + jitter).clamp(0.0, 1.0));
            }
        }
        labels.push(class as u32);
    }
    LabeledImageDataset::new("custom", images, 8, 8, 1, labels, 2).unwrap()
}

/// Write toy train/test splits under `root/custom/{train,test}`.
pub fn write_toy_dataset(root: &Path, train_count: usize, test_count: usize) {
    toy_dataset(train_count, 0)
        .save(&dataset_dir(root, "custom", "train"))
        .unwrap();
    toy_dataset(test_count, 3)
        .save(&dataset_dir(root, "custom", "test"))
        .unwrap();
}

/// Minimal-runtime experiment configuration over the toy dataset.
pub fn tiny_config(root: &Path, output: &Path, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        dataset: "custom".to_string(),
        data_root: Some(root.to_path_buf()),
        train_subset: None,
        client_count: 2,
        alpha: 1.0,
        method,
        local_epochs: 2,
        global_epochs: 2,
        seeds: vec![0],
        privacy: None,
        fmf: None,
        timesteps: 8,
        sampling_steps: 4,
        model_size: ModelSize::Small,
        batch_size: 16,
        output_dir: output.to_path_buf(),
        ..ExperimentConfig::default()
    }
}
