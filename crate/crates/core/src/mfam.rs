//! Multi-level feature aggregation: a top-down and a bottom-up path over the
//! encoder taps joined by lateral fusions, plus the FPN-like baseline.
//!
//! Builders accept any number of levels `L >= 2`; level 1 is the finest.

use crate::error::{Error, Result};
use crate::graph::{run_graph, GraphBuilder, ModelGraph, NodeId, ParamSet, RunOptions};
use crate::tensor::{ConvSpec, Element, ResizeConvention, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MfamConfig {
    pub dch: usize,
    /// One 1×1 projection per level shared by both paths.
    pub share_projections: bool,
    /// BN + relu after each 3×3 fusion conv; otherwise the conv carries a bias.
    pub fusion_bn: bool,
    pub convention: ResizeConvention,
}

impl Default for MfamConfig {
    fn default() -> Self {
        MfamConfig {
            dch: 128,
            share_projections: false,
            fusion_bn: true,
            convention: ResizeConvention::HalfPixel,
        }
    }
}

/// Node ids of the aggregated pyramid, index 0 = level 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidNodes {
    pub u: Vec<NodeId>,
    pub d: Vec<NodeId>,
    pub f: Vec<NodeId>,
}

/// Feature values of the pyramid, index 0 = level 1.
#[derive(Debug, Clone)]
pub struct PyramidFeatures<T: Element> {
    pub s: Vec<Tensor<T>>,
    pub u: Vec<Tensor<T>>,
    pub d: Vec<Tensor<T>>,
    pub f: Vec<Tensor<T>>,
}

/// 3×3 Dch→Dch conv, optionally followed by BN + relu.
pub(crate) fn fusion_unit(b: &mut GraphBuilder<'_>, name: &str, x: NodeId, dch: usize, bn: bool) -> Result<NodeId> {
    let c = b.conv(name, x, ConvSpec::new(dch, dch, 3).bias(!bn))?;
    if !bn {
        return Ok(c);
    }
    let n = b.bn(&format!("{name}.bn"), c, dch)?;
    b.relu(&format!("{name}.relu"), n)
}

fn check_levels(s: &[(NodeId, usize)]) -> Result<()> {
    if s.len() < 2 {
        return Err(Error::Config(format!(
            "aggregation needs at least 2 levels, got {}",
            s.len()
        )));
    }
    Ok(())
}

/// Appends both paths and the lateral fusions. `s` lists each encoder tap
/// with its channel count.
pub fn build_mfam(graph: &mut ModelGraph, cfg: &MfamConfig, s: &[(NodeId, usize)]) -> Result<PyramidNodes> {
    check_levels(s)?;
    let l = s.len();
    let dch = cfg.dch;
    let mut b = GraphBuilder::new(graph);
    let proj = |b: &mut GraphBuilder<'_>, path: &str, k: usize| -> Result<NodeId> {
        let (node, c) = s[k];
        let name = if cfg.share_projections {
            format!("mfam.proj.{}", k + 1)
        } else {
            format!("mfam.proj.{path}.{}", k + 1)
        };
        if let Some(id) = b.graph.find(&name) {
            return Ok(id);
        }
        b.conv(&name, node, ConvSpec::new(c, dch, 1).bias(true))
    };

    let mut u = vec![NodeId(0); l];
    u[l - 1] = proj(&mut b, "td", l - 1)?;
    for k in (0..l - 1).rev() {
        let n = k + 1;
        let up = b.resize(&format!("mfam.topdown.{n}.up"), u[k + 1], 2, 1, cfg.convention)?;
        let p = proj(&mut b, "td", k)?;
        let sum = b.add(&format!("mfam.topdown.{n}.add"), up, p)?;
        u[k] = fusion_unit(&mut b, &format!("mfam.topdown.{n}"), sum, dch, cfg.fusion_bn)?;
    }

    let mut d = vec![NodeId(0); l];
    d[0] = proj(&mut b, "bu", 0)?;
    for k in 1..l {
        let n = k + 1;
        let down = b.resize(&format!("mfam.bottomup.{n}.down"), d[k - 1], 1, 2, cfg.convention)?;
        let p = proj(&mut b, "bu", k)?;
        let sum = b.add(&format!("mfam.bottomup.{n}.add"), down, p)?;
        d[k] = fusion_unit(&mut b, &format!("mfam.bottomup.{n}"), sum, dch, cfg.fusion_bn)?;
    }

    let mut f = vec![NodeId(0); l];
    f[0] = u[0];
    f[l - 1] = d[l - 1];
    for k in 1..l - 1 {
        let n = k + 1;
        let sum = b.add(&format!("mfam.lateral.{n}.add"), d[k], u[k])?;
        f[k] = fusion_unit(&mut b, &format!("mfam.lateral.{n}"), sum, dch, cfg.fusion_bn)?;
    }
    Ok(PyramidNodes { u, d, f })
}

/// Standalone aggregation graph over inputs `S1..SL` with outputs `U*`,
/// `D*` and `F*`.
pub fn mfam_graph(cfg: &MfamConfig, s_channels: &[usize]) -> Result<ModelGraph> {
    let mut g = ModelGraph::new();
    let mut s = Vec::new();
    for (k, &c) in s_channels.iter().enumerate() {
        s.push((g.input(format!("S{}", k + 1), c)?, c));
    }
    let p = build_mfam(&mut g, cfg, &s)?;
    for k in 0..s.len() {
        g.set_output(format!("U{}", k + 1), p.u[k]);
        g.set_output(format!("D{}", k + 1), p.d[k]);
        g.set_output(format!("F{}", k + 1), p.f[k]);
    }
    Ok(g)
}

fn run_prefix<T: Element>(
    cfg: &MfamConfig,
    params: &ParamSet<T>,
    s: &[Tensor<T>],
    prefix: &str,
) -> Result<Vec<Tensor<T>>> {
    let chans: Vec<usize> = s.iter().map(|t| t.dims().c).collect();
    let full = mfam_graph(cfg, &chans)?;
    let names: Vec<String> = (1..=s.len()).map(|k| format!("{prefix}{k}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let g = full.retain_outputs(&refs)?;
    let in_names: Vec<String> = (1..=s.len()).map(|k| format!("S{k}")).collect();
    let inputs: Vec<(&str, Tensor<T>)> = in_names.iter().map(String::as_str).zip(s.iter().cloned()).collect();
    let mut r = run_graph(&g, params, &inputs, RunOptions::default())?;
    Ok(names.iter().map(|n| r.outputs.remove(n).expect("retained")).collect())
}

/// `U_L = proj(S_L)`, `U_n = fuse(Up(U_{n+1}) + proj(S_n))`.
pub fn top_down<T: Element>(cfg: &MfamConfig, params: &ParamSet<T>, s: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    run_prefix(cfg, params, s, "U")
}

/// `D_1 = proj(S_1)`, `D_n = fuse(Down(D_{n-1}) + proj(S_n))`.
pub fn bottom_up<T: Element>(cfg: &MfamConfig, params: &ParamSet<T>, s: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    run_prefix(cfg, params, s, "D")
}

/// All four feature sets of the pyramid.
pub fn aggregate<T: Element>(cfg: &MfamConfig, params: &ParamSet<T>, s: &[Tensor<T>]) -> Result<PyramidFeatures<T>> {
    Ok(PyramidFeatures {
        s: s.to_vec(),
        u: run_prefix(cfg, params, s, "U")?,
        d: run_prefix(cfg, params, s, "D")?,
        f: run_prefix(cfg, params, s, "F")?,
    })
}

/// `F_n = fuse(D_n + U_n)` for inner levels, `F_1 = U_1`, `F_L = D_L`.
pub fn lateral_fuse<T: Element>(
    cfg: &MfamConfig,
    params: &ParamSet<T>,
    u: &[Tensor<T>],
    d: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let l = u.len();
    if d.len() != l || l < 2 {
        return Err(Error::dim("lateral_fuse", "levels", l, d.len()));
    }
    let mut f = Vec::with_capacity(l);
    f.push(u[0].clone());
    for k in 1..l - 1 {
        let mut g = ModelGraph::new();
        let ui = g.input("U", cfg.dch)?;
        let di = g.input("D", cfg.dch)?;
        let mut b = GraphBuilder::new(&mut g);
        let sum = b.add(&format!("mfam.lateral.{}.add", k + 1), di, ui)?;
        let out = fusion_unit(&mut b, &format!("mfam.lateral.{}", k + 1), sum, cfg.dch, cfg.fusion_bn)?;
        g.set_output("F", out);
        let mut r = run_graph(
            &g,
            params,
            &[("U", u[k].clone()), ("D", d[k].clone())],
            RunOptions::default(),
        )?;
        f.push(r.outputs.remove("F").expect("output"));
    }
    f.push(d[l - 1].clone());
    Ok(f)
}

/// FPN-like baseline: top-down sums of 1×1 laterals, every level upsampled
/// to level 1 and smoothed by a 3×3 conv, concatenated and fused by a final
/// 3×3 conv. Returns the fused level-1 feature.
pub fn build_fpn(graph: &mut ModelGraph, cfg: &MfamConfig, s: &[(NodeId, usize)]) -> Result<NodeId> {
    check_levels(s)?;
    let l = s.len();
    let dch = cfg.dch;
    let mut b = GraphBuilder::new(graph);
    let mut p = vec![NodeId(0); l];
    p[l - 1] = b.conv(
        &format!("fpn.lateral.{l}"),
        s[l - 1].0,
        ConvSpec::new(s[l - 1].1, dch, 1).bias(true),
    )?;
    for k in (0..l - 1).rev() {
        let n = k + 1;
        let lat = b.conv(
            &format!("fpn.lateral.{n}"),
            s[k].0,
            ConvSpec::new(s[k].1, dch, 1).bias(true),
        )?;
        let up = b.resize(&format!("fpn.topdown.{n}.up"), p[k + 1], 2, 1, cfg.convention)?;
        p[k] = b.add(&format!("fpn.topdown.{n}.add"), up, lat)?;
    }
    let mut parts = Vec::with_capacity(l);
    for (k, &pk) in p.iter().enumerate() {
        let n = k + 1;
        let x = if k == 0 {
            pk
        } else {
            b.resize(&format!("fpn.smooth.{n}.up"), pk, 1 << k, 1, cfg.convention)?
        };
        parts.push(fusion_unit(&mut b, &format!("fpn.smooth.{n}"), x, dch, cfg.fusion_bn)?);
    }
    let cat = b.concat("fpn.concat", &parts)?;
    let spec = ConvSpec::new(l * dch, dch, 3).bias(!cfg.fusion_bn);
    let c = b.conv("fpn.fuse", cat, spec)?;
    if !cfg.fusion_bn {
        return Ok(c);
    }
    let n = b.bn("fpn.fuse.bn", c, dch)?;
    b.relu("fpn.fuse.relu", n)
}
