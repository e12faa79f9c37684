#![allow(dead_code)]

use std::path::PathBuf;

use svtune::model::ModelConfig;
use svtune::train::{DataConfig, OptimConfig, RunConfig};

/// A model small enough to train for a few steps inside a unit test.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        mlp_hidden: 32,
        prompt_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        decoder_mlp_hidden: 32,
        upscale_channels: 4,
        ..ModelConfig::toy()
    }
}

pub fn tiny_run(steps: usize, out: PathBuf) -> RunConfig {
    let optim = OptimConfig {
        lr: 1e-3,
        steps,
        batch_size: 4,
        warmup_steps: 0,
    };
    RunConfig {
        model: tiny(),
        pretrain: optim.clone(),
        adapt: optim,
        data: DataConfig {
            train_images: 6,
            eval_images: 4,
            image_size: 16,
            train_dir: None,
            eval_dir: None,
        },
        eval_batch_size: 8,
        out_dir: out,
        ..RunConfig::default()
    }
}
