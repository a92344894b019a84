#![allow(dead_code)]

use std::path::Path;

use edtc::harness::{AblationMode, TrainConfig};
use edtc::synthdata::{generate_dataset, Dataset, LatentSpec};

/// A generator small enough for many training runs per test.
pub fn tiny_spec(seed: u64) -> LatentSpec {
    LatentSpec {
        latent_dim: 6,
        time: 4,
        dim: 16,
        num_symbols: 6,
        vocab_size: 16,
        seed,
        sigma: 0.05,
        distinct_views: true,
    }
}

pub fn tiny_data(seed: u64, count: usize, start_id: u64) -> Dataset {
    generate_dataset(&tiny_spec(seed), count, start_id).unwrap()
}

/// A model matching [`tiny_spec`]: one layer everywhere, batch 4.
pub fn tiny_cfg(mode: AblationMode, run_dir: &Path) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        dim: 16,
        time: 4,
        num_heads: 2,
        fuser_layers: 1,
        translator_m: 1,
        translator_n: 1,
        decoder_layers: 1,
        max_epochs: 2,
        evals_per_epoch: 2,
        ablation_mode: mode,
        seed: 11,
        run_dir: run_dir.to_path_buf(),
        ..TrainConfig::desk()
    }
}

/// Parsed lines of a run's `metrics.jsonl`.
pub fn metrics(run_dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(run_dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
