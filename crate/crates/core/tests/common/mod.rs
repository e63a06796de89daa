#![allow(dead_code)]

use mico::config::RunConfig;
use mico::data::{generate_all, PairDataset, SyntheticSpec};
use mico::modality::ModalityShapes;

/// A model and world small enough for finite differences and exhaustive checks.
pub fn tiny_config(width: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.categories = 4;
    cfg.data.latent_dim = 3;
    cfg.data.levels = 4;
    cfg.data.pair_size = 24;
    cfg.data.joint_size = 24;
    cfg.data.eval_size = 12;
    cfg.model.width = width;
    cfg.model.proj_dim = width;
    cfg.model.heads = 2;
    cfg.model.mlp_ratio = 2;
    cfg.model.patch = 2;
    cfg.model.shapes = ModalityShapes {
        image: [1, 4, 4],
        audio: [4, 4],
        video: [2, 1, 4, 4],
        depth: [1, 4, 4],
        normal: [1, 4, 4],
    };
    cfg.model.max_text_len = 8;
    cfg.model.vocab = SyntheticSpec::from_config(&cfg).vocabulary().size();
    cfg.train.batch_size = 4;
    cfg.train.steps = 6;
    cfg.train.warmup = 2;
    cfg.train.lr = 1e-3;
    cfg.train.wall_clock = false;
    cfg
}

pub fn datasets(cfg: &RunConfig) -> (Vec<PairDataset>, Vec<PairDataset>) {
    generate_all(&SyntheticSpec::from_config(cfg)).unwrap()
}

pub fn refs(sets: &[PairDataset]) -> Vec<&PairDataset> {
    sets.iter().collect()
}
