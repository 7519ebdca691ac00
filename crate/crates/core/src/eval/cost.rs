use std::fmt;

use crate::asfm::FusionMode;
use crate::error::Result;
use crate::graph::{ModelGraph, NodeOp, ParamKind};
use crate::tensor::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlopsConvention {
    /// One multiply-accumulate counts as one operation.
    #[default]
    Macs,
    TwoXMacs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    /// Trainable elements (weights, biases, BN gamma/beta).
    pub params: u64,
    /// BN running statistics.
    pub buffers: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub convention: FlopsConvention,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_buffers(&self) -> u64 {
        self.entries.iter().map(|e| e.buffers).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        match self.convention {
            FlopsConvention::Macs => self.total_macs(),
            FlopsConvention::TwoXMacs => 2 * self.total_macs(),
        }
    }

    /// Sum of `macs` over entries whose name satisfies `pred`.
    pub fn macs_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.entries.iter().filter(|e| pred(&e.name)).map(|e| e.macs).sum()
    }

    pub fn params_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.entries.iter().filter(|e| pred(&e.name)).map(|e| e.params).sum()
    }

    /// Machine-readable `name params macs` lines, totals last.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{} {} {}\n", e.name, e.params, e.macs));
        }
        s.push_str(&format!("total {} {}\n", self.total_params(), self.total_macs()));
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$} {:>12} {:>16}", "node", "params", "macs")?;
        for e in self.entries.iter().filter(|e| e.params > 0 || e.macs > 0) {
            writeln!(f, "{:<width$} {:>12} {:>16}", e.name, e.params, e.macs)?;
        }
        writeln!(
            f,
            "{:<width$} {:>12} {:>16}",
            "total",
            self.total_params(),
            self.total_macs()
        )?;
        writeln!(f, "buffers {}", self.total_buffers())?;
        let unit = match self.convention {
            FlopsConvention::Macs => "GMACs",
            FlopsConvention::TwoXMacs => "GFLOPs",
        };
        write!(
            f,
            "params {:.3}M, {:.3} {unit}",
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9
        )
    }
}

fn param_entries(graph: &ModelGraph) -> Vec<CostEntry> {
    let specs = graph.param_specs();
    graph
        .nodes()
        .iter()
        .map(|n| {
            let prefix = format!("{}.", n.name);
            let (mut params, mut buffers) = (0, 0);
            for s in specs
                .iter()
                .filter(|s| s.name.starts_with(&prefix) && !s.name[prefix.len()..].contains('.'))
            {
                let len = s.dims.len() as u64;
                match s.kind {
                    ParamKind::RunningMean | ParamKind::RunningVar => buffers += len,
                    _ => params += len,
                }
            }
            CostEntry {
                name: n.name.clone(),
                params,
                buffers,
                macs: 0,
            }
        })
        .collect()
}

/// Parameter and buffer counts per node; MACs left at zero.
pub fn count_params(graph: &ModelGraph) -> CostReport {
    CostReport {
        entries: param_entries(graph),
        convention: FlopsConvention::Macs,
    }
}

/// Parameters plus MACs for the given input dims. Convolutions count
/// `outH·outW·Cout·Cin·kh·kw`; elementwise nodes count per output element
/// (bilinear sampling 4, max pool 9, fusion one per scale).
pub fn count_flops(graph: &ModelGraph, inputs: &[(&str, Dims)], convention: FlopsConvention) -> Result<CostReport> {
    let dims = graph.infer_shapes(inputs)?;
    let mut entries = param_entries(graph);
    for (i, n) in graph.nodes().iter().enumerate() {
        let out = dims[i];
        let elems = out.len() as u64;
        entries[i].macs = match &n.op {
            NodeOp::Input { .. } | NodeOp::Concat => 0,
            NodeOp::Conv { spec, .. } => elems * (spec.in_channels * spec.kernel.0 * spec.kernel.1) as u64,
            NodeOp::BatchNorm { .. } | NodeOp::Relu | NodeOp::Add | NodeOp::WarpGrid { .. } => elems,
            NodeOp::MaxPool => 9 * elems,
            NodeOp::Resize { .. } | NodeOp::GridSample => 4 * elems,
            NodeOp::Fuse { scales, mode, .. } => {
                let k = scales.len() as u64;
                if *mode == FusionMode::Attention {
                    k * elems + 2 * k * (out.n * out.h * out.w) as u64
                } else {
                    k * elems
                }
            }
        };
    }
    Ok(CostReport { entries, convention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ModelGraph};
    use crate::tensor::ConvSpec;

    #[test]
    fn conv_counts() {
        let mut g = ModelGraph::new();
        let x = g.input("x", 2).unwrap();
        let c = GraphBuilder::new(&mut g)
            .conv("c", x, ConvSpec::new(2, 4, 3).bias(true))
            .unwrap();
        g.set_output("y", c);
        assert_eq!(count_params(&g).total_params(), 76);
        let r = count_flops(&g, &[("x", Dims::new(1, 2, 5, 6))], FlopsConvention::Macs).unwrap();
        assert_eq!(r.macs_where(|n| n == "c"), 9 * 5 * 6 * 2 * 4);
        assert!(r.to_lines().ends_with("total 76 2160\n"));
    }
}
