//! Static computation graph: named nodes with parameter bindings, shape
//! inference and reachability pruning.

mod exec;
mod params;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

pub use exec::{record_graph, run_graph, update_running_stats, RunOptions, RunResult, TapedRun, TrainMode};
pub use params::{Init, ParamKind, ParamSet, ParamSpec};

use crate::asfm::FusionMode;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Dims, ResizeConvention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Operation of a graph node. Parameterized nodes own the names
/// `<node>.weight`, `<node>.bias`, `<node>.{gamma,beta,running_mean,running_var}`.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    Input {
        channels: usize,
    },
    Conv {
        spec: ConvSpec,
        init: Init,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Add,
    MaxPool,
    /// Output size `in * num / den` per axis; must divide exactly.
    Resize {
        num: usize,
        den: usize,
        convention: ResizeConvention,
    },
    Concat,
    /// `[delta]` to sample coordinates `(g + delta) / divisor`.
    WarpGrid {
        divisor: usize,
    },
    /// `[x, grid]`.
    GridSample,
    /// `[scores.., logits..]`; `scales` lists the 1-based scale of each score.
    Fuse {
        mode: FusionMode,
        normalize: bool,
        scales: Vec<usize>,
    },
}

impl NodeOp {
    pub fn kind(&self) -> &'static str {
        match self {
            NodeOp::Input { .. } => "input",
            NodeOp::Conv { .. } => "conv",
            NodeOp::BatchNorm { .. } => "batch_norm",
            NodeOp::Relu => "relu",
            NodeOp::Add => "add",
            NodeOp::MaxPool => "max_pool",
            NodeOp::Resize { .. } => "resize",
            NodeOp::Concat => "concat",
            NodeOp::WarpGrid { .. } => "warp_grid",
            NodeOp::GridSample => "grid_sample",
            NodeOp::Fuse { .. } => "fuse",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            NodeOp::Input { .. } => Some(0),
            NodeOp::Conv { .. } | NodeOp::BatchNorm { .. } | NodeOp::Relu | NodeOp::MaxPool => Some(1),
            NodeOp::Resize { .. } | NodeOp::WarpGrid { .. } => Some(1),
            NodeOp::Add | NodeOp::GridSample => Some(2),
            NodeOp::Concat => None,
            NodeOp::Fuse { mode, scales, .. } => Some(if *mode == FusionMode::Attention {
                2 * scales.len()
            } else {
                scales.len()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
}

/// A DAG whose nodes are stored in topological order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<GraphNode>,
    by_name: HashMap<String, NodeId>,
    inputs: Vec<NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl ModelGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn input_nodes(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn input(&mut self, name: impl Into<String>, channels: usize) -> Result<NodeId> {
        let id = self.add(name, NodeOp::Input { channels }, &[])?;
        self.inputs.push(id);
        Ok(id)
    }

    pub fn add(&mut self, name: impl Into<String>, op: NodeOp, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Structure(format!("duplicate node name `{name}`")));
        }
        if let Some(a) = op.arity() {
            if a != inputs.len() {
                return Err(Error::Structure(format!(
                    "node `{name}` ({}) takes {a} inputs, got {}",
                    op.kind(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::Structure(format!("node `{name}` needs at least one input")));
        }
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::Structure(format!("node `{name}` refers to unknown {bad}")));
        }
        let id = NodeId(self.nodes.len());
        self.by_name.insert(name.clone(), id);
        self.nodes.push(GraphNode {
            name,
            op,
            inputs: inputs.to_vec(),
        });
        Ok(id)
    }

    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn remove_output(&mut self, name: &str) -> Option<NodeId> {
        self.outputs.remove(name)
    }

    /// Parameter tensors the graph binds, in node order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                NodeOp::Conv { spec, init } => {
                    out.push(ParamSpec {
                        name: format!("{}.weight", node.name),
                        dims: spec.weight_dims(),
                        kind: ParamKind::Weight,
                        init: *init,
                    });
                    if spec.has_bias {
                        out.push(ParamSpec {
                            name: format!("{}.bias", node.name),
                            dims: Dims::new(spec.out_channels, 1, 1, 1),
                            kind: ParamKind::Bias,
                            init: Init::Zero,
                        });
                    }
                }
                NodeOp::BatchNorm { channels } => {
                    let d = Dims::new(*channels, 1, 1, 1);
                    for (suffix, kind, init) in [
                        ("gamma", ParamKind::Gamma, Init::One),
                        ("beta", ParamKind::Beta, Init::Zero),
                        ("running_mean", ParamKind::RunningMean, Init::Zero),
                        ("running_var", ParamKind::RunningVar, Init::One),
                    ] {
                        out.push(ParamSpec {
                            name: format!("{}.{suffix}", node.name),
                            dims: d,
                            kind,
                            init,
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Output dims of every node for the given input dims (keyed by input
    /// node name).
    pub fn infer_shapes(&self, inputs: &[(&str, Dims)]) -> Result<Vec<Dims>> {
        let mut dims: Vec<Dims> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Dims> = node.inputs.iter().map(|i| dims[i.0]).collect();
            let d = match &node.op {
                NodeOp::Input { channels } => {
                    let d = inputs
                        .iter()
                        .find(|(n, _)| *n == node.name)
                        .map(|(_, d)| *d)
                        .ok_or_else(|| Error::Config(format!("missing graph input `{}`", node.name)))?;
                    if d.c != *channels {
                        return Err(Error::dim("input", "channels", *channels, d.c));
                    }
                    d
                }
                NodeOp::Conv { spec, .. } => spec.output_dims(ins[0])?,
                NodeOp::BatchNorm { channels } => {
                    if ins[0].c != *channels {
                        return Err(Error::dim("batch_norm", "channels", *channels, ins[0].c));
                    }
                    ins[0]
                }
                NodeOp::Relu => ins[0],
                NodeOp::Add => {
                    crate::tensor::check_same("add", ins[0], ins[1])?;
                    ins[0]
                }
                NodeOp::MaxPool => {
                    let o = |v: usize| (v + 2 - 3) / 2 + 1;
                    ins[0].with_hw(o(ins[0].h), o(ins[0].w))
                }
                NodeOp::Resize { num, den, .. } => {
                    let (h, w) = (ins[0].h, ins[0].w);
                    if (h * num) % den != 0 || (w * num) % den != 0 {
                        return Err(Error::InputSize {
                            h,
                            w,
                            reason: format!("`{}` cannot scale by {num}/{den} exactly", node.name),
                        });
                    }
                    ins[0].with_hw(h * num / den, w * num / den)
                }
                NodeOp::Concat => {
                    let first = ins[0];
                    let mut c = 0;
                    for d in &ins {
                        if d.n != first.n || d.h != first.h || d.w != first.w {
                            crate::tensor::check_same("concat", first.with_c(d.c), *d)?;
                        }
                        c += d.c;
                    }
                    first.with_c(c)
                }
                NodeOp::WarpGrid { .. } => {
                    if ins[0].c != 2 {
                        return Err(Error::dim("warp_grid", "channels", 2, ins[0].c));
                    }
                    ins[0]
                }
                NodeOp::GridSample => {
                    if ins[1].c != 2 {
                        return Err(Error::dim("grid_sample", "channels", 2, ins[1].c));
                    }
                    Dims::new(ins[0].n, ins[0].c, ins[1].h, ins[1].w)
                }
                NodeOp::Fuse { scales, mode, .. } => {
                    let k = scales.len();
                    for d in &ins[..k] {
                        crate::tensor::check_same("fuse", ins[0], *d)?;
                    }
                    if *mode == FusionMode::Attention {
                        for d in &ins[k..] {
                            crate::tensor::check_same("fuse", ins[0].with_c(1), *d)?;
                        }
                    }
                    ins[0]
                }
            };
            dims.push(d);
        }
        Ok(dims)
    }

    /// Nodes reachable backwards from the given outputs.
    pub fn reachable(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        for o in outputs {
            live[o.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if live[i] {
                for p in &self.nodes[i].inputs {
                    live[p.0] = true;
                }
            }
        }
        live
    }

    /// Dead-code elimination: keeps only the named outputs and the nodes they
    /// reach. Node order, names and ops are preserved.
    pub fn retain_outputs(&self, names: &[&str]) -> Result<ModelGraph> {
        let mut keep = BTreeMap::new();
        for &n in names {
            let id = self
                .output(n)
                .ok_or_else(|| Error::Config(format!("unknown graph output `{n}`")))?;
            keep.insert(n.to_string(), id);
        }
        let roots: Vec<NodeId> = keep.values().copied().collect();
        let live = self.reachable(&roots);
        let mut remap = vec![None; self.nodes.len()];
        let mut g = ModelGraph::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !live[i] {
                continue;
            }
            let inputs: Vec<NodeId> = node.inputs.iter().map(|p| remap[p.0].expect("topological")).collect();
            let id = g.add(node.name.clone(), node.op.clone(), &inputs)?;
            if matches!(node.op, NodeOp::Input { .. }) {
                g.inputs.push(id);
            }
            remap[i] = Some(id);
        }
        for (name, id) in keep {
            g.outputs.insert(name, remap[id.0].expect("live"));
        }
        Ok(g)
    }

    /// Consumers of every node.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for p in &n.inputs {
                out[p.0].push(NodeId(i));
            }
        }
        out
    }

    /// Rebuilds the graph applying `edit` to each node; returning `None`
    /// removes a node and forwards its first input to all consumers.
    pub(crate) fn rewrite(&self, mut edit: impl FnMut(NodeId, &GraphNode) -> Option<GraphNode>) -> Result<ModelGraph> {
        let mut remap: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        let mut g = ModelGraph::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match edit(NodeId(i), node) {
                Some(mut n) => {
                    n.inputs = n.inputs.iter().map(|p| remap[p.0]).collect();
                    let is_input = matches!(n.op, NodeOp::Input { .. });
                    let id = g.add(n.name, n.op, &n.inputs)?;
                    if is_input {
                        g.inputs.push(id);
                    }
                    remap.push(id);
                }
                None => {
                    let first = node
                        .inputs
                        .first()
                        .ok_or_else(|| Error::Structure(format!("cannot remove source node `{}`", node.name)))?;
                    remap.push(remap[first.0]);
                }
            }
        }
        for (name, id) in &self.outputs {
            g.outputs.insert(name.clone(), remap[id.0]);
        }
        Ok(g)
    }

    /// Node names, for set comparisons.
    pub fn node_names(&self) -> std::collections::BTreeSet<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }
}

/// Convenience layer for building graphs with prefixed names.
pub struct GraphBuilder<'g> {
    pub graph: &'g mut ModelGraph,
}

impl<'g> GraphBuilder<'g> {
    pub fn new(graph: &'g mut ModelGraph) -> Self {
        GraphBuilder { graph }
    }

    pub fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        self.graph.add(
            name,
            NodeOp::Conv {
                spec,
                init: Init::Kaiming,
            },
            &[x],
        )
    }

    pub fn conv_init(&mut self, name: &str, x: NodeId, spec: ConvSpec, init: Init) -> Result<NodeId> {
        self.graph.add(name, NodeOp::Conv { spec, init }, &[x])
    }

    pub fn bn(&mut self, name: &str, x: NodeId, channels: usize) -> Result<NodeId> {
        self.graph.add(name, NodeOp::BatchNorm { channels }, &[x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.graph.add(name, NodeOp::Relu, &[x])
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.graph.add(name, NodeOp::Add, &[a, b])
    }

    pub fn resize(
        &mut self,
        name: &str,
        x: NodeId,
        num: usize,
        den: usize,
        convention: ResizeConvention,
    ) -> Result<NodeId> {
        self.graph.add(name, NodeOp::Resize { num, den, convention }, &[x])
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        self.graph.add(name, NodeOp::Concat, parts)
    }
}
