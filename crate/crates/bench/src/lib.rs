//! Fixtures shared by the criterion benchmarks.

use projnet_core::netbuild::ParamStore;
use projnet_core::rng::SplitMix64;
use projnet_core::{build, ArchConfig, InputExtent, NetGraph, Tensor, Variant};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).expect("length matches shape")
}

/// Random binary mask with roughly `fraction` foreground.
pub fn random_mask(h: usize, w: usize, fraction: f64, seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    let data = (0..h * w).map(|_| (rng.next_f64() < fraction) as u8 as f32).collect();
    Tensor::new(vec![h, w], data).expect("length matches shape")
}

/// Three-level 3D-to-2D network with its initial parameters.
pub fn network(variant: Variant, base_channels: usize, extent: &[usize]) -> (NetGraph, ParamStore<f32>) {
    let cfg = ArchConfig::new(3, 2, base_channels, vec![1; 3], variant);
    let graph = build(&cfg, &InputExtent(extent.to_vec())).expect("valid benchmark network");
    let params = ParamStore::init(&graph, 0);
    (graph, params)
}
