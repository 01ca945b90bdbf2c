//! Deterministic inputs shared by the benchmarks.

use spaco_core::gldm::{Gldm, GldmConfig};
use spaco_core::nn::Conv2d;
use spaco_core::{FeatureGrid, LabelMap, RngState, ScoreTensor, SemanticSequence, Tensor};

pub const SEED: u64 = 17;

/// `H×W×l` scores whose cells are random distributions.
pub fn scores(h: usize, w: usize, l: usize) -> ScoreTensor {
    let mut t = Tensor::randn(&[h, w, l], 2.0, &mut RngState::new(SEED).stream(&[0]));
    for cell in t.data_mut().chunks_mut(l) {
        let m = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        cell.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z: f64 = cell.iter().sum();
        cell.iter_mut().for_each(|v| *v /= z);
    }
    ScoreTensor::new(t).expect("fixture scores are well formed")
}

pub fn grid(h: usize, w: usize, c: usize, downsample: usize) -> FeatureGrid {
    let t = Tensor::randn(&[h, w, c], 1.0, &mut RngState::new(SEED).stream(&[1]));
    FeatureGrid::new(t, downsample).expect("fixture grid is well formed")
}

/// Labels cycling through `0..l` in row-major order.
pub fn labels(h: usize, w: usize, l: usize) -> LabelMap {
    LabelMap::new(h, w, l, (0..h * w).map(|i| (i % l) as u16).collect()).expect("labels in range")
}

pub fn conv(k: usize, cin: usize, cout: usize, stride: usize) -> Conv2d {
    Conv2d::new(k, cin, cout, stride, 2.0, &mut RngState::new(SEED).stream(&[2]))
}

pub fn input(shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, &mut RngState::new(SEED).stream(&[3]))
}

pub fn gldm(channels: usize, objects: usize) -> Gldm {
    let cfg = GldmConfig { channels, heads: 4, mlp_ratio: 4, objects, decoder: true };
    Gldm::new(&cfg, &mut RngState::new(SEED).stream(&[4])).expect("fixture config is valid")
}

pub fn sequence(objects: usize, channels: usize) -> SemanticSequence {
    let t = Tensor::randn(&[objects, channels], 1.0, &mut RngState::new(SEED).stream(&[5]));
    SemanticSequence::new(t, vec![true; objects]).expect("fixture sequence is well formed")
}
