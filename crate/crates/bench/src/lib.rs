//! Shared fixtures for the benchmarks.

use mfaranet::asfm::prune_graph;
use mfaranet::eval::fold_bn;
use mfaranet::graph::{ModelGraph, ParamSet};
use mfaranet::model::{build_mfaranet, inference_graph, MfaranetConfig};
use mfaranet::tensor::{Dims, Tensor};

/// Deterministic values in `[-1, 1)` from a multiplicative hash.
pub fn pattern(d: Dims, salt: u64) -> Tensor<f32> {
    let mut i = salt;
    Tensor::from_fn(d, |_| {
        i = i.wrapping_add(1);
        let h = i.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40;
        h as f32 / (1u64 << 23) as f32 - 1.0
    })
}

/// Inference variants of one model sharing initialized parameters.
pub struct Variants {
    pub full: (ModelGraph, ParamSet<f32>),
    pub pruned: (ModelGraph, ParamSet<f32>),
    pub folded: (ModelGraph, ParamSet<f32>),
}

pub fn variants(cfg: &MfaranetConfig, keep: &[usize]) -> Variants {
    let g = inference_graph(&build_mfaranet(cfg).expect("model builds")).expect("inference graph");
    let p = ParamSet::init(&g, 0);
    let pg = prune_graph(&g, keep).expect("prune");
    let pp = p.restricted_to(&pg).expect("restrict");
    let folded = fold_bn(&g, &p).expect("fold");
    Variants {
        full: (g, p),
        pruned: (pg, pp),
        folded,
    }
}
