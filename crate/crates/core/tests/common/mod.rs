#![allow(dead_code)]

use chartless::harness::ExperimentConfig;
use chartless::world::SurfacePatch;

/// A plane experiment small enough to run in a few seconds.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let placement = cfg.world.surface.placement.clone();
    cfg.world.surface = SurfacePatch::plane();
    cfg.world.surface.placement = placement;
    cfg.probes.grid = 4;
    for m in [&mut cfg.machine_a, &mut cfg.machine_b] {
        m.segments = 4000;
        m.embedding.max_training = 400;
        m.statistics.cells = 12;
    }
    cfg.machine_b.segments = 3500;
    cfg
}
