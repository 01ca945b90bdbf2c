#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spaco_core::{FeatureGrid, LabelMap, RngState, ScoreTensor, Tensor};

pub fn rng(path: &[u64]) -> ChaCha8Rng {
    RngState::new(20_240_601).stream(path)
}

/// Scores with values on a coarse grid, so exact ties occur regularly.
pub fn random_scores(h: usize, w: usize, l: usize, r: &mut ChaCha8Rng) -> ScoreTensor {
    let data = (0..h * w * l).map(|_| r.random_range(0..16) as f64 / 16.0).collect();
    ScoreTensor::new(Tensor::new(vec![h, w, l], data).unwrap()).unwrap()
}

pub fn random_grid(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> FeatureGrid {
    FeatureGrid::new(Tensor::randn(&[h, w, c], 1.0, r), 16).unwrap()
}

pub fn random_labels(h: usize, w: usize, l: usize, r: &mut ChaCha8Rng) -> LabelMap {
    let data = (0..h * w).map(|_| r.random_range(0..l) as u16).collect();
    LabelMap::new(h, w, l, data).unwrap()
}
