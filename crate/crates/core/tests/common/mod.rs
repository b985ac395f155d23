#![allow(dead_code)]

use std::path::Path;

use arlon_core::ar_model::ArConfig;
use arlon_core::dit::DitConfig;
use arlon_core::latent_vqvae::VqConfig;
use arlon_core::pipeline::{RunConfig, StageBudget};
use arlon_core::synth_data::CorpusConfig;
use arlon_core::video_vae::VideoVaeConfig;

/// A full system small enough to train and sample in well under a second
/// per stage: 8 frames of 16 px, latent `[4, 4, 4, 4]`, fine grid `[2, 2, 2]`.
pub fn tiny_config(root: &Path) -> RunConfig {
    let budget = StageBudget::new(2, 2, 1e-3, 0);
    let mut cfg = RunConfig {
        dataset_root: root.join("data"),
        out_dir: root.join("run"),
        data: CorpusConfig {
            per_motion: 1,
            heldout_per_motion: 1,
            frames: 8,
            size: 16,
            ..Default::default()
        },
        vae: VideoVaeConfig {
            widths: vec![4, 4],
            latent_channels: 4,
            ..Default::default()
        },
        vq_fine: VqConfig {
            hidden: 8,
            code_dim: 8,
            codebook_size: 8,
            heads: 2,
            ..VqConfig::fine(4)
        },
        vq_coarse: VqConfig {
            hidden: 8,
            code_dim: 8,
            codebook_size: 8,
            heads: 2,
            ..VqConfig::coarse(4)
        },
        ar: ArConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ffn: 32,
            max_len: 24,
            codebook_size: 8,
            ..Default::default()
        },
        dit: DitConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            ffn_mult: 2,
            latent_channels: 4,
            diffusion_steps: 50,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.train.vae = budget.clone();
    cfg.train.vqvae = budget.clone();
    cfg.train.ar = budget.clone();
    cfg.train.dit = budget.clone();
    cfg.train.injection = budget;
    cfg.generation.segment_len = 4;
    cfg.generation.overlap = 1;
    cfg.generation.ddim_steps = 3;
    cfg.eval.prompts = 2;
    cfg.eval.sweep_prompts = 1;
    cfg.eval.long_runs = 1;
    cfg.eval.long_frames = 10;
    cfg.eval.step_counts = vec![2, 3];
    cfg.validate().expect("tiny config is valid");
    cfg
}
