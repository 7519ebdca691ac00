//! Recursive alignment of coarse features onto the finest grid.
//!
//! Offsets are learned once between each pair of adjacent levels and shared
//! by every warp chain that crosses that pair.

use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::graph::{run_graph, GraphBuilder, Init, ModelGraph, NodeId, NodeOp, ParamSet, RunOptions};
use crate::tensor::{grid_sample, ConvSpec, Element, ResizeConvention, SampleGrid, Tensor};

/// A `(n, 2, h, w)` displacement field: channel 0 is x, channel 1 is y, in
/// pixels of the finer grid.
pub type OffsetField<T> = Tensor<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Adjacent-scale warps applied in sequence.
    #[default]
    Recursive,
    /// One long-range warp per level straight onto level 1.
    Straightforward,
    /// Plain bilinear upsampling, no learned offsets.
    Bilinear,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(AlignMode::Recursive),
            "straightforward" => Ok(AlignMode::Straightforward),
            "bilinear" => Ok(AlignMode::Bilinear),
            other => Err(Error::Config(format!("unknown align mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AlignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignMode::Recursive => "recursive",
            AlignMode::Straightforward => "straightforward",
            AlignMode::Bilinear => "bilinear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamConfig {
    pub mode: AlignMode,
    pub dch: usize,
    /// Resampling used for the `Up` inside the offset input and for the
    /// bilinear ablation.
    pub convention: ResizeConvention,
}

impl Default for RamConfig {
    fn default() -> Self {
        RamConfig {
            mode: AlignMode::Recursive,
            dch: 128,
            convention: ResizeConvention::HalfPixel,
        }
    }
}

/// Sample coordinates `(g + delta(g)) / divisor`, where `g` runs over the
/// integer pixel indices of the fine grid.
pub fn warp_grid<T: Element>(delta: &Tensor<T>, divisor: T) -> Result<SampleGrid<T>> {
    let d = delta.dims();
    if d.c != 2 {
        return Err(Error::dim("warp_grid", "channels", 2, d.c));
    }
    let mut coords = delta.clone();
    let p = d.plane();
    for (i, v) in coords.data_mut().iter_mut().enumerate() {
        let px = i % p;
        let g = if (i / p).is_multiple_of(2) { px % d.w } else { px / d.w };
        *v = (T::from_usize(g).unwrap() + *v) / divisor;
    }
    SampleGrid::new(coords)
}

/// Warps a coarse map onto the grid of `delta`, which must be exactly twice
/// as fine.
pub fn warp_step<T: Element>(coarse: &Tensor<T>, delta: &OffsetField<T>) -> Result<Tensor<T>> {
    let (c, d) = (coarse.dims(), delta.dims());
    if d.h != 2 * c.h {
        return Err(Error::dim("warp_step", "height", 2 * c.h, d.h));
    }
    if d.w != 2 * c.w {
        return Err(Error::dim("warp_step", "width", 2 * c.w, d.w));
    }
    grid_sample(coarse, &warp_grid(delta, T::from_f64_lossy(2.0))?)
}

/// `P_1 = F_1`; `P_n` warps `F_n` through `Δ_{n-1}, …, Δ_1` in turn.
pub fn align_recursive<T: Element>(f: &[Tensor<T>], offsets: &[OffsetField<T>]) -> Result<Vec<Tensor<T>>> {
    if offsets.len() + 1 != f.len() {
        return Err(Error::dim("align_recursive", "levels", f.len() - 1, offsets.len()));
    }
    let mut p = vec![f[0].clone()];
    for n in 1..f.len() {
        let mut x = f[n].clone();
        for i in (0..n).rev() {
            x = warp_step(&x, &offsets[i])?;
        }
        p.push(x);
    }
    Ok(p)
}

fn offset_conv(b: &mut GraphBuilder<'_>, name: &str, x: NodeId, dch: usize) -> Result<NodeId> {
    b.conv_init(name, x, ConvSpec::new(2 * dch, 2, 3).bias(true), Init::Zero)
}

/// Appends the alignment stage for pyramid nodes `f` (level 1 first) and
/// returns `P_1..P_L`, all at level-1 resolution.
pub fn build_ram(graph: &mut ModelGraph, cfg: &RamConfig, f: &[NodeId]) -> Result<Vec<NodeId>> {
    let l = f.len();
    let mut b = GraphBuilder::new(graph);
    let mut p = vec![f[0]];
    match cfg.mode {
        AlignMode::Recursive => {
            let mut grids = Vec::with_capacity(l - 1);
            for k in 0..l - 1 {
                let n = k + 1;
                let up = b.resize(&format!("ram.offset.{n}.up"), f[k + 1], 2, 1, cfg.convention)?;
                let cat = b.concat(&format!("ram.offset.{n}.concat"), &[f[k], up])?;
                let delta = offset_conv(&mut b, &format!("ram.offset.{n}"), cat, cfg.dch)?;
                grids.push(
                    b.graph
                        .add(format!("ram.grid.{n}"), NodeOp::WarpGrid { divisor: 2 }, &[delta])?,
                );
            }
            for k in 1..l {
                let mut x = f[k];
                for i in (0..k).rev() {
                    x = b.graph.add(
                        format!("ram.warp.{}.{}", k + 1, i + 1),
                        NodeOp::GridSample,
                        &[x, grids[i]],
                    )?;
                }
                p.push(x);
            }
        }
        AlignMode::Straightforward => {
            for (k, &fk) in f.iter().enumerate().skip(1) {
                let n = k + 1;
                let factor = 1 << k;
                let up = b.resize(&format!("ram.sa.{n}.up"), fk, factor, 1, cfg.convention)?;
                let cat = b.concat(&format!("ram.sa.{n}.concat"), &[f[0], up])?;
                let delta = offset_conv(&mut b, &format!("ram.sa.offset.{n}"), cat, cfg.dch)?;
                let grid = b.graph.add(
                    format!("ram.sa.grid.{n}"),
                    NodeOp::WarpGrid { divisor: factor },
                    &[delta],
                )?;
                p.push(
                    b.graph
                        .add(format!("ram.sa.warp.{n}"), NodeOp::GridSample, &[fk, grid])?,
                );
            }
        }
        AlignMode::Bilinear => {
            for (k, &fk) in f.iter().enumerate().skip(1) {
                p.push(b.resize(&format!("ram.up.{}", k + 1), fk, 1 << k, 1, cfg.convention)?);
            }
        }
    }
    Ok(p)
}

fn ram_graph(cfg: &RamConfig, levels: usize) -> Result<ModelGraph> {
    let mut g = ModelGraph::new();
    let f: Vec<NodeId> = (0..levels)
        .map(|k| g.input(format!("F{}", k + 1), cfg.dch))
        .collect::<Result<_>>()?;
    let p = build_ram(&mut g, cfg, &f)?;
    for (k, id) in p.iter().enumerate() {
        g.set_output(format!("P{}", k + 1), *id);
    }
    if cfg.mode == AlignMode::Recursive {
        for k in 0..levels - 1 {
            let id = g.find(&format!("ram.offset.{}", k + 1)).expect("built");
            g.set_output(format!("delta{}", k + 1), id);
        }
    }
    Ok(g)
}

fn run_ram<T: Element>(
    cfg: &RamConfig,
    params: &ParamSet<T>,
    f: &[Tensor<T>],
    outputs: &[String],
) -> Result<Vec<Tensor<T>>> {
    let g = ram_graph(cfg, f.len())?;
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    let g = g.retain_outputs(&refs)?;
    let names: Vec<String> = (1..=f.len()).map(|k| format!("F{k}")).collect();
    let ins: Vec<(&str, Tensor<T>)> = names
        .iter()
        .map(String::as_str)
        .zip(f.iter().cloned())
        .filter(|(n, _)| g.find(n).is_some())
        .collect();
    let mut r = run_graph(&g, params, &ins, RunOptions::default())?;
    Ok(outputs.iter().map(|n| r.outputs.remove(n).expect("retained")).collect())
}

/// `Δ_n = conv3×3(concat(F_n, Up(F_{n+1})))` for `n = 1..L-1`.
pub fn compute_offsets<T: Element>(
    cfg: &RamConfig,
    params: &ParamSet<T>,
    f: &[Tensor<T>],
) -> Result<Vec<OffsetField<T>>> {
    let cfg = RamConfig {
        mode: AlignMode::Recursive,
        ..cfg.clone()
    };
    let outs: Vec<String> = (1..f.len()).map(|k| format!("delta{k}")).collect();
    run_ram(&cfg, params, f, &outs)
}

/// One learned warp per level straight onto the level-1 grid, with
/// coordinates `(g + Δ) / 2^{n-1}`.
pub fn align_straightforward<T: Element>(
    cfg: &RamConfig,
    params: &ParamSet<T>,
    f: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let cfg = RamConfig {
        mode: AlignMode::Straightforward,
        ..cfg.clone()
    };
    let outs: Vec<String> = (1..=f.len()).map(|k| format!("P{k}")).collect();
    run_ram(&cfg, params, f, &outs)
}

/// MAC totals of the offset-computation convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffsetFlops {
    pub ram_macs: u128,
    pub sa_macs: u128,
    pub ratio: Ratio<u128>,
}

/// Offset-conv cost with `(w3, h3)` the dims of `F_3` and `c` the channel
/// width: recursive alignment pays `9WHC²` at levels 3, 2, 1 (area ×1, ×4,
/// ×16); straightforward alignment pays three convs at level-1 area.
pub fn offset_flops(c: u64, h3: u64, w3: u64) -> OffsetFlops {
    let unit = 9 * u128::from(w3) * u128::from(h3) * u128::from(c) * u128::from(c);
    let ram = unit + 4 * unit + 16 * unit;
    let sa = 3 * 16 * unit;
    OffsetFlops {
        ram_macs: ram,
        sa_macs: sa,
        ratio: Ratio::new(ram, sa),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{bilinear_resize, Dims};

    #[test]
    fn unit_substitution() {
        let f = offset_flops(1, 1, 1);
        assert_eq!((f.ram_macs, f.sa_macs), (189, 432));
        assert_eq!(f.ratio, Ratio::new(7, 16));
    }

    #[test]
    fn zero_offset_warp_is_eq7_upsampling() {
        let coarse = Tensor::<f32>::from_fn(Dims::new(1, 2, 3, 4), |[_, c, y, x]| (c * 12 + y * 4 + x) as f32);
        let delta = Tensor::zeros(Dims::new(1, 2, 6, 8));
        let w = warp_step(&coarse, &delta).unwrap();
        let r = bilinear_resize(&coarse, 6, 8, ResizeConvention::Eq7Origin).unwrap();
        assert!(w.max_abs_diff(&r) <= 1e-6);
    }

    #[test]
    fn non_adjacent_ratio_is_rejected() {
        let coarse = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2));
        let delta = Tensor::zeros(Dims::new(1, 2, 8, 8));
        assert!(matches!(warp_step(&coarse, &delta), Err(Error::Dimension { .. })));
    }
}
