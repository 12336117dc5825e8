//! Benchmark inputs shared by the criterion targets.

use sttv_core::codec::{EntropyTables, Model};
use sttv_core::config::ModelConfig;
use sttv_core::frame::PixelFrame;
use sttv_core::nn::Params;

/// A freshly initialized toy model with frozen tables.
pub fn toy_codec(seed: u64) -> (Model, Params, EntropyTables) {
    let mut p = Params::default();
    let m = Model::new(&mut p, ModelConfig::toy(), seed).expect("toy config is valid");
    let t = EntropyTables::freeze(&m, &p);
    (m, p, t)
}

pub fn clip(width: usize, height: usize, frames: usize) -> Vec<PixelFrame> {
    sttv_core::data::moving_texture(width, height, frames, 7)
}
