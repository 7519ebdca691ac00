//! Per-scale heads, adaptive score fusion and scale pruning.

mod fusion;
mod prune;

pub use fusion::{fuse, fuse_backward, fuse_forward, FuseState, FusionMode};
pub use prune::prune_graph;

use crate::error::{Error, Result};
use crate::graph::{run_graph, GraphBuilder, ModelGraph, NodeId, NodeOp, ParamSet, RunOptions};
use crate::labels::Labels;
use crate::tensor::{argmax_channels, bilinear_resize, ConvSpec, Element, ResizeConvention, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AsfmConfig {
    pub classes: usize,
    pub dch: usize,
    pub fusion: FusionMode,
    /// Softmax the attention logits over scales; raw weights otherwise.
    pub normalize: bool,
    /// Boundary logits per scale, used only by the training loss.
    pub boundary_heads: bool,
}

impl Default for AsfmConfig {
    fn default() -> Self {
        AsfmConfig {
            classes: 19,
            dch: 128,
            fusion: FusionMode::Attention,
            normalize: true,
            boundary_heads: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsfmNodes {
    pub scores: Vec<NodeId>,
    /// Attention logits; empty outside attention mode.
    pub weights: Vec<NodeId>,
    pub boundary: Vec<NodeId>,
    pub fused: NodeId,
}

fn seg_head_node(b: &mut GraphBuilder<'_>, cfg: &AsfmConfig, n: usize, p: NodeId) -> Result<NodeId> {
    b.conv(
        &format!("asfm.seg.{n}"),
        p,
        ConvSpec::new(cfg.dch, cfg.classes, 1).bias(true),
    )
}

fn attention_head_node(b: &mut GraphBuilder<'_>, cfg: &AsfmConfig, n: usize, p: NodeId) -> Result<NodeId> {
    let c = b.conv(&format!("asfm.att.{n}.conv"), p, ConvSpec::new(cfg.dch, cfg.dch, 3))?;
    let c = b.bn(&format!("asfm.att.{n}.bn"), c, cfg.dch)?;
    let c = b.relu(&format!("asfm.att.{n}.relu"), c)?;
    b.conv(&format!("asfm.att.{n}.out"), c, ConvSpec::new(cfg.dch, 1, 1).bias(true))
}

/// Appends the heads for aligned features `p` (level 1 first) and the fusion.
pub fn build_asfm(graph: &mut ModelGraph, cfg: &AsfmConfig, p: &[NodeId]) -> Result<AsfmNodes> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    let mut b = GraphBuilder::new(graph);
    let mut scores = Vec::new();
    let mut weights = Vec::new();
    let mut boundary = Vec::new();
    for (k, &pk) in p.iter().enumerate() {
        let n = k + 1;
        scores.push(seg_head_node(&mut b, cfg, n, pk)?);
        if cfg.fusion == FusionMode::Attention {
            weights.push(attention_head_node(&mut b, cfg, n, pk)?);
        }
        if cfg.boundary_heads {
            let spec = ConvSpec::new(cfg.dch, 1, 1).bias(true);
            boundary.push(b.conv(&format!("asfm.boundary.{n}"), pk, spec)?);
        }
    }
    let inputs: Vec<NodeId> = scores.iter().chain(&weights).copied().collect();
    let fused = b.graph.add(
        "asfm.fuse",
        NodeOp::Fuse {
            mode: cfg.fusion,
            normalize: cfg.normalize,
            scales: (1..=p.len()).collect(),
        },
        &inputs,
    )?;
    Ok(AsfmNodes {
        scores,
        weights,
        boundary,
        fused,
    })
}

fn single_head<T: Element>(
    params: &ParamSet<T>,
    p: &Tensor<T>,
    build: impl FnOnce(&mut GraphBuilder<'_>, NodeId) -> Result<NodeId>,
) -> Result<Tensor<T>> {
    let mut g = ModelGraph::new();
    let x = g.input("P", p.dims().c)?;
    let out = build(&mut GraphBuilder::new(&mut g), x)?;
    g.set_output("out", out);
    let mut r = run_graph(&g, params, &[("P", p.clone())], RunOptions::default())?;
    Ok(r.outputs.remove("out").expect("output"))
}

/// 1×1 conv `Dch → classes` on aligned feature `P_n`.
pub fn seg_head<T: Element>(cfg: &AsfmConfig, params: &ParamSet<T>, n: usize, p: &Tensor<T>) -> Result<Tensor<T>> {
    single_head(params, p, |b, x| seg_head_node(b, cfg, n, x))
}

/// 3×3 conv + BN + relu, then 1×1 conv to one logit channel.
pub fn attention_head<T: Element>(
    cfg: &AsfmConfig,
    params: &ParamSet<T>,
    n: usize,
    p: &Tensor<T>,
) -> Result<Tensor<T>> {
    single_head(params, p, |b, x| attention_head_node(b, cfg, n, x))
}

/// Upsamples scores to `(out_h, out_w)` and takes the per-pixel argmax.
pub fn final_predict<T: Element>(fused: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Labels> {
    let d = fused.dims();
    if d.c > 255 {
        return Err(Error::Config(format!("{} classes do not fit 8-bit ids", d.c)));
    }
    let up = bilinear_resize(fused, out_h, out_w, ResizeConvention::HalfPixel)?;
    let ids = argmax_channels(&up).into_iter().map(|i| i as u8).collect();
    Labels::new(d.n, out_h, out_w, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn zero_weight_seg_head_emits_bias() {
        let cfg = AsfmConfig {
            classes: 3,
            dch: 4,
            ..Default::default()
        };
        let mut params = ParamSet::<f32>::new();
        params.insert("asfm.seg.1.weight", Tensor::zeros(Dims::new(3, 4, 1, 1)));
        params.insert("asfm.seg.1.bias", Tensor::vector(vec![0.5, -1.0, 2.0]));
        let p = Tensor::from_fn(Dims::new(1, 4, 2, 3), |[_, c, y, x]| (c + y + x) as f32);
        let s = seg_head(&cfg, &params, 1, &p).unwrap();
        for (i, v) in s.data().iter().enumerate() {
            assert_eq!(*v, [0.5, -1.0, 2.0][i / 6]);
        }
    }

    #[test]
    fn one_hot_scores_predict_the_hot_class() {
        let s = Tensor::<f32>::from_fn(Dims::new(1, 3, 2, 2), |[_, c, _, _]| if c == 2 { 1.0 } else { 0.0 });
        let l = final_predict(&s, 8, 8).unwrap();
        assert!(l.data().iter().all(|&v| v == 2));
    }
}
