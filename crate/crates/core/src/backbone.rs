//! ResNet-18 encoder with dilated late stages.
//!
//! Parameter names: `stem.conv`, `stem.bn`, then for stage `K` in 1..=4 and
//! block `B` from 0: `stageK.blockB.conv{1,2}`, `stageK.blockB.bn{1,2}` and,
//! where the shortcut projects, `stageK.blockB.downsample.{conv,bn}`.

use crate::error::{Error, Result};
use crate::graph::{run_graph, GraphBuilder, ModelGraph, NodeId, NodeOp, ParamSet, RunOptions};
use crate::io::Fixture;
use crate::tensor::{ConvSpec, Element, Tensor};

/// Which 3×3 convolutions of a dilated stage receive the stage dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DilationScope {
    #[default]
    AllConvs,
    /// Only the first 3×3 conv of the stage's first block.
    FirstConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub stage_strides: [usize; 4],
    pub stage_dilations: [usize; 4],
    pub dilation_scope: DilationScope,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            stage_strides: [1, 2, 2, 2],
            stage_dilations: [1, 1, 2, 4],
            dilation_scope: DilationScope::AllConvs,
        }
    }
}

impl BackboneConfig {
    /// Same topology with every width divided by `div`.
    pub fn narrowed(div: usize) -> Self {
        let d = BackboneConfig::default();
        BackboneConfig {
            stem_channels: d.stem_channels / div,
            stage_channels: d.stage_channels.map(|c| c / div),
            ..d
        }
    }

    pub fn undilated(mut self) -> Self {
        self.stage_dilations = [1; 4];
        self
    }

    /// Input sides must leave the last stage at least one pixel wide.
    pub fn min_input(&self) -> usize {
        32
    }
}

fn conv_bn(b: &mut GraphBuilder<'_>, conv: &str, bn: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
    let c = b.conv(conv, x, spec)?;
    b.bn(bn, c, spec.out_channels)
}

/// Appends the encoder to `graph`, returning the S1..S4 taps.
pub fn build_backbone(graph: &mut ModelGraph, cfg: &BackboneConfig, image: NodeId) -> Result<[NodeId; 4]> {
    let mut b = GraphBuilder::new(graph);
    let stem = ConvSpec::new(cfg.in_channels, cfg.stem_channels, 7)
        .stride(2)
        .padding(3);
    let x = conv_bn(&mut b, "stem.conv", "stem.bn", image, stem)?;
    let x = b.relu("stem.relu", x)?;
    let mut x = b.graph.add("stem.pool", NodeOp::MaxPool, &[x])?;
    let mut cin = cfg.stem_channels;
    let mut taps = [NodeId(0); 4];
    for s in 0..4 {
        let cout = cfg.stage_channels[s];
        let d = cfg.stage_dilations[s];
        for blk in 0..cfg.blocks_per_stage[s] {
            let p = format!("stage{}.block{blk}", s + 1);
            let stride = if blk == 0 { cfg.stage_strides[s] } else { 1 };
            let (d1, d2) = match cfg.dilation_scope {
                DilationScope::AllConvs => (d, d),
                DilationScope::FirstConv if blk == 0 => (d, 1),
                DilationScope::FirstConv => (1, 1),
            };
            let c1 = ConvSpec::new(cin, cout, 3).stride(stride).dilated(d1);
            let h = conv_bn(&mut b, &format!("{p}.conv1"), &format!("{p}.bn1"), x, c1)?;
            let h = b.relu(&format!("{p}.relu1"), h)?;
            let c2 = ConvSpec::new(cout, cout, 3).dilated(d2);
            let h = conv_bn(&mut b, &format!("{p}.conv2"), &format!("{p}.bn2"), h, c2)?;
            let shortcut = if stride != 1 || cin != cout {
                let ds = ConvSpec::new(cin, cout, 1).stride(stride);
                conv_bn(
                    &mut b,
                    &format!("{p}.downsample.conv"),
                    &format!("{p}.downsample.bn"),
                    x,
                    ds,
                )?
            } else {
                x
            };
            let sum = b.add(&format!("{p}.add"), h, shortcut)?;
            x = b.relu(&format!("{p}.relu"), sum)?;
            cin = cout;
        }
        taps[s] = x;
    }
    Ok(taps)
}

/// A graph holding only the encoder, with outputs `S1`..`S4`.
pub fn backbone_graph(cfg: &BackboneConfig) -> Result<ModelGraph> {
    let mut g = ModelGraph::new();
    let image = g.input("image", cfg.in_channels)?;
    let taps = build_backbone(&mut g, cfg, image)?;
    for (i, t) in taps.iter().enumerate() {
        g.set_output(format!("S{}", i + 1), *t);
    }
    Ok(g)
}

/// Encoder graph with bound parameters: either freshly initialized or taken
/// from `params`, which must cover every name with matching dims.
pub fn build_resnet18<T: Element>(
    cfg: &BackboneConfig,
    params: Option<&ParamSet<T>>,
    seed: u64,
) -> Result<(ModelGraph, ParamSet<T>)> {
    let g = backbone_graph(cfg)?;
    let p = match params {
        Some(p) => {
            p.validate(&g)?;
            p.restricted_to(&g)?
        }
        None => ParamSet::init(&g, seed),
    };
    Ok((g, p))
}

#[derive(Debug, Clone)]
pub struct StageOutputs<T: Element> {
    pub s: [Tensor<T>; 4],
}

pub fn check_image<T: Element>(image: &Tensor<T>, channels: usize, min: usize) -> Result<()> {
    let d = image.dims();
    if d.c != channels {
        return Err(Error::dim("image", "channels", channels, d.c));
    }
    if d.h < min || d.w < min {
        return Err(Error::InputSize {
            h: d.h,
            w: d.w,
            reason: format!("minimum input is {min}x{min}"),
        });
    }
    Ok(())
}

/// Inference-mode encoder taps.
pub fn forward_stages<T: Element>(
    graph: &ModelGraph,
    params: &ParamSet<T>,
    image: &Tensor<T>,
) -> Result<StageOutputs<T>> {
    check_image(image, 3, 32)?;
    let mut r = run_graph(graph, params, &[("image", image.clone())], RunOptions::default())?;
    let mut take = |k: &str| {
        r.outputs
            .remove(k)
            .ok_or_else(|| Error::Structure(format!("missing output {k}")))
    };
    Ok(StageOutputs {
        s: [take("S1")?, take("S2")?, take("S3")?, take("S4")?],
    })
}

impl<T: Element> StageOutputs<T> {
    /// Per-channel means over batch and space, as stages `S1`..`S4`.
    pub fn stage_means(&self) -> Fixture {
        let stages = self
            .s
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let d = t.dims();
                let count = (d.n * d.plane()) as f64;
                let means = (0..d.c)
                    .map(|c| {
                        let mut acc = 0.0;
                        for n in 0..d.n {
                            acc += t.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        acc / count
                    })
                    .collect();
                (format!("S{}", k + 1), means)
            })
            .collect();
        Fixture { stages }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn stride_schedule_at_96() {
        let g = backbone_graph(&BackboneConfig::default()).unwrap();
        let dims = g.infer_shapes(&[("image", Dims::new(1, 3, 96, 96))]).unwrap();
        let got: Vec<Dims> = ["S1", "S2", "S3", "S4"]
            .iter()
            .map(|k| dims[g.output(k).unwrap().0])
            .collect();
        assert_eq!(
            got,
            [
                Dims::new(1, 64, 24, 24),
                Dims::new(1, 128, 12, 12),
                Dims::new(1, 256, 6, 6),
                Dims::new(1, 512, 3, 3)
            ]
        );
    }

    #[test]
    fn small_inputs_are_rejected() {
        let cfg = BackboneConfig::narrowed(16);
        let (g, p) = build_resnet18::<f32>(&cfg, None, 0).unwrap();
        let img = Tensor::zeros(Dims::new(1, 3, 16, 40));
        assert!(matches!(forward_stages(&g, &p, &img), Err(Error::InputSize { .. })));
    }

    #[test]
    fn missing_parameter_is_named() {
        let cfg = BackboneConfig::narrowed(16);
        let (_, mut p) = build_resnet18::<f32>(&cfg, None, 0).unwrap();
        p.remove("stage3.block1.conv2.weight");
        match build_resnet18(&cfg, Some(&p), 0) {
            Err(Error::Param { name, .. }) => assert_eq!(name, "stage3.block1.conv2.weight"),
            other => panic!("{other:?}"),
        }
    }
}
