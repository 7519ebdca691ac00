//! Full network assembly: encoder, aggregation, alignment and fused heads.

use crate::asfm::{build_asfm, final_predict, AsfmConfig, FusionMode};
use crate::backbone::{build_backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::graph::{run_graph, GraphBuilder, ModelGraph, ParamSet, RunOptions};
use crate::labels::Labels;
use crate::mfam::{build_fpn, build_mfam, MfamConfig};
use crate::ram::{build_ram, AlignMode, RamConfig};
use crate::tensor::{ConvSpec, Dims, Tensor};

/// Network downsampling factor between input and the coarsest level.
pub const OUTPUT_STRIDE: usize = 32;
/// Factor between input and the level-1 score maps.
pub const SCORE_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MfaranetConfig {
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub mfam: MfamConfig,
    pub align: AlignMode,
    pub fusion: FusionMode,
    pub normalize_attention: bool,
}

impl MfaranetConfig {
    /// ResNet-18 widths, decoder width 128.
    pub fn standard(classes: usize) -> Self {
        MfaranetConfig {
            classes,
            backbone: BackboneConfig::default(),
            mfam: MfamConfig::default(),
            align: AlignMode::Recursive,
            fusion: FusionMode::Attention,
            normalize_attention: true,
        }
    }

    /// Quarter-width variant for desk-scale training.
    pub fn toy(classes: usize) -> Self {
        MfaranetConfig {
            backbone: BackboneConfig::narrowed(4),
            mfam: MfamConfig {
                dch: 32,
                ..MfamConfig::default()
            },
            ..MfaranetConfig::standard(classes)
        }
    }

    pub fn dch(&self) -> usize {
        self.mfam.dch
    }

    pub fn levels(&self) -> usize {
        4
    }

    fn asfm(&self, boundary_heads: bool) -> AsfmConfig {
        AsfmConfig {
            classes: self.classes,
            dch: self.mfam.dch,
            fusion: self.fusion,
            normalize: self.normalize_attention,
            boundary_heads,
        }
    }

    fn ram(&self) -> RamConfig {
        RamConfig {
            mode: self.align,
            dch: self.mfam.dch,
            convention: self.mfam.convention,
        }
    }
}

/// Rejects images whose sides are not positive multiples of 32.
pub fn check_input(dims: Dims, channels: usize) -> Result<()> {
    if dims.c != channels {
        return Err(Error::dim("image", "channels", channels, dims.c));
    }
    if dims.h < OUTPUT_STRIDE
        || dims.w < OUTPUT_STRIDE
        || !dims.h.is_multiple_of(OUTPUT_STRIDE)
        || !dims.w.is_multiple_of(OUTPUT_STRIDE)
    {
        return Err(Error::InputSize {
            h: dims.h,
            w: dims.w,
            reason: format!("sides must be positive multiples of {OUTPUT_STRIDE}"),
        });
    }
    Ok(())
}

fn encoder(g: &mut ModelGraph, cfg: &MfaranetConfig) -> Result<Vec<(crate::graph::NodeId, usize)>> {
    let image = g.input("image", cfg.backbone.in_channels)?;
    let taps = build_backbone(g, &cfg.backbone, image)?;
    for (k, t) in taps.iter().enumerate() {
        g.set_output(format!("S{}", k + 1), *t);
    }
    Ok(taps.iter().copied().zip(cfg.backbone.stage_channels).collect())
}

/// Training graph. Outputs: `fused`, `score.K`, `weight.K` (attention mode)
/// and `boundary.K` for K in 1..=4.
pub fn build_mfaranet(cfg: &MfaranetConfig) -> Result<ModelGraph> {
    let mut g = ModelGraph::new();
    let s = encoder(&mut g, cfg)?;
    let pyr = build_mfam(&mut g, &cfg.mfam, &s)?;
    let p = build_ram(&mut g, &cfg.ram(), &pyr.f)?;
    let heads = build_asfm(&mut g, &cfg.asfm(true), &p)?;
    for k in 0..p.len() {
        let n = k + 1;
        g.set_output(format!("score.{n}"), heads.scores[k]);
        g.set_output(format!("boundary.{n}"), heads.boundary[k]);
        if let Some(w) = heads.weights.get(k) {
            g.set_output(format!("weight.{n}"), *w);
        }
    }
    g.set_output("fused", heads.fused);
    Ok(g)
}

/// Drops the training-only outputs (boundary heads, encoder taps).
pub fn inference_graph(train: &ModelGraph) -> Result<ModelGraph> {
    let keep: Vec<&str> = train
        .outputs()
        .keys()
        .map(String::as_str)
        .filter(|n| *n == "fused" || n.starts_with("score.") || n.starts_with("weight."))
        .collect();
    train.retain_outputs(&keep)
}

/// FPN-like baseline model with a single segmentation head; output `fused`.
pub fn build_fpn_model(cfg: &MfaranetConfig) -> Result<ModelGraph> {
    let mut g = ModelGraph::new();
    let s = encoder(&mut g, cfg)?;
    let f = build_fpn(&mut g, &cfg.mfam, &s)?;
    let seg = GraphBuilder::new(&mut g).conv("fpn.seg", f, ConvSpec::new(cfg.dch(), cfg.classes, 1).bias(true))?;
    g.set_output("fused", seg);
    let keep = ["fused"];
    g.retain_outputs(&keep)
}
/// Inference forward on one normalized `(N, 3, H, W)` batch, returning
/// full-resolution ids from the `fused` output.
pub fn predict(graph: &ModelGraph, params: &ParamSet<f32>, image: &Tensor<f32>) -> Result<Labels> {
    let d = image.dims();
    let r = run_graph(graph, params, &[("image", image.clone())], RunOptions::default())?;
    final_predict(r.output("fused")?, d.h, d.w)
}
