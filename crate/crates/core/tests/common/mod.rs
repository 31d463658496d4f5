#![allow(dead_code)]

use std::path::Path;

use granule_rating::purity_net::PurityTopology;
use granule_rating::scene_sim::{generate_dataset, Dataset, GeneratorConfig};
use granule_rating::trainer::TrainConfig;

pub const SIZE: usize = 32;
pub const STIRS: usize = 4;

/// Eleven 4-image samples of 32×32 px: one sample per group.
pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        image_size: SIZE,
        stirs: STIRS,
        samples: 11,
        granule_count: [40, 50],
        granule_radius_px: [3.0, 5.0],
        ..GeneratorConfig::default()
    }
}

pub fn tiny_dataset(dir: &Path) -> Dataset {
    generate_dataset(&tiny_generator(), dir, false).unwrap();
    Dataset::open(dir).unwrap()
}

/// A few quick epochs per phase on full 32×32 frames.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.phase1.epochs = 3;
    cfg.phase1.crop_size = None;
    cfg.phase1.batch_size = 4;
    cfg.phase1.eval_every = 1;
    cfg.phase2.epochs = 3;
    cfg.phase3.epochs = 3;
    cfg.purity = PurityTopology {
        n: STIRS,
        image_size: SIZE,
        ..PurityTopology::default()
    };
    cfg
}
