#![allow(dead_code)]

use std::path::Path;

use candle_core::Device;
use medflowseg::data::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use medflowseg::fa_attention::FaConfig;
use medflowseg::networks::{BackboneConfig, ModelConfig};

/// Smallest configuration that still exercises every block.
pub fn tiny_model(resolution: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: vec![4, 8],
            time_dim: 8,
            ..Default::default()
        },
        fa: FaConfig {
            patch: 2,
            depth: 1,
            modulator_depth: 1,
            heads: 2,
            dim: 8,
            use_modulator: true,
        },
        resolution,
        ..Default::default()
    }
}

pub fn synthetic_dataset(dir: &Path, count: usize, resolution: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        count,
        resolution,
        seed,
        ..Default::default()
    };
    generate_synthetic(&spec, dir).unwrap();
    load_dataset(dir, resolution, &Device::Cpu).unwrap()
}
