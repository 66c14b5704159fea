#![allow(dead_code)]

use gf3d_core::config::RunConfig;
use gf3d_core::model::PreparedScene;
use gf3d_core::synthdata::generate_scene;

pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        num_queries: 16,
        channels: 16,
        image_channels: 8,
        heads: 2,
        acmt_layers: 1,
        num_points: 400,
        batch_size: 2,
        lr: 2e-3,
        lr_milestones: vec![],
        epochs: 1000,
        seed,
        ..RunConfig::default()
    }
}

pub fn scenes(cfg: &RunConfig, ids: std::ops::Range<u64>) -> Vec<PreparedScene> {
    ids.map(|id| PreparedScene::new(&generate_scene(id, &cfg.scene_spec()).unwrap(), cfg).unwrap())
        .collect()
}
