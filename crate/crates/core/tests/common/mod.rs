#![allow(dead_code)]

use dvaegan_core::data::{synthesize, PairedDataset, SynthParams};
use dvaegan_core::loss::LossWeights;
use dvaegan_core::model::{Arch, ModelBundle, Net};
use dvaegan_core::train::TrainConfig;

pub fn tiny_data(n_train: usize, n_test: usize) -> PairedDataset {
    let p = SynthParams { d_x: 64, image_size: 16, n_train, n_test, ..SynthParams::default() };
    synthesize(&p, 3).unwrap()
}

pub fn tiny_arch() -> Arch {
    Arch {
        d_x: 64,
        d_z: 8,
        image_size: 16,
        conv_channels: [4, 8, 8],
        cog_hidden: 32,
        vis_hidden: 32,
        ..Arch::default()
    }
}

pub fn tiny_config(epochs: [usize; 3]) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs,
        seed: 11,
        weights: LossWeights { rec: 100.0, prior: 1.0 },
        ..TrainConfig::default()
    }
}

pub fn snapshot(b: &ModelBundle, n: Net) -> Vec<Vec<f32>> {
    b.net(n).params_flat().map(|t| t.data().to_vec()).collect()
}
