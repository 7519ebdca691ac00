use std::collections::BTreeMap;

use super::{ModelGraph, NodeId, NodeOp, ParamSet};
use crate::asfm::{fuse_forward, FusionMode};
use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::ram::warp_grid;
use crate::tensor::{
    batch_norm_eval, bilinear_resize, concat_channels, conv2d, grid_sample, max_pool2d, relu, BnParams, Element,
    SampleGrid, Tensor,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every intermediate value instead of freeing after last use.
    pub retain_all: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult<T: Element> {
    pub outputs: BTreeMap<String, Tensor<T>>,
    /// Per-node values; populated only with `retain_all`.
    pub values: Vec<Option<Tensor<T>>>,
    /// Nodes in execution order.
    pub executed: Vec<NodeId>,
}

impl<T: Element> RunResult<T> {
    pub fn output(&self, name: &str) -> Result<&Tensor<T>> {
        self.outputs
            .get(name)
            .ok_or_else(|| Error::Config(format!("graph has no output `{name}`")))
    }

    /// Retained value of a node by name.
    pub fn value<'a>(&'a self, graph: &ModelGraph, name: &str) -> Option<&'a Tensor<T>> {
        graph
            .find(name)
            .and_then(|id| self.values.get(id.0).and_then(Option::as_ref))
    }

    /// Executed nodes whose name satisfies `pred`.
    pub fn executed_count(&self, graph: &ModelGraph, pred: impl Fn(&str) -> bool) -> usize {
        self.executed.iter().filter(|id| pred(&graph.node(**id).name)).count()
    }
}

pub(crate) fn bn_params<T: Element>(params: &ParamSet<T>, prefix: &str) -> Result<BnParams<T>> {
    let v = |s: &str| -> Result<Vec<T>> { Ok(params.require(&format!("{prefix}.{s}"))?.data().to_vec()) };
    Ok(BnParams {
        gamma: v("gamma")?,
        beta: v("beta")?,
        running_mean: v("running_mean")?,
        running_var: v("running_var")?,
        eps: T::from_f64_lossy(crate::tensor::BN_EPS),
        momentum: T::from_f64_lossy(crate::tensor::BN_MOMENTUM),
    })
}

fn bind_inputs<T: Element>(graph: &ModelGraph, inputs: &[(&str, Tensor<T>)]) -> Result<Vec<Option<Tensor<T>>>> {
    let mut values: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    for &id in graph.input_nodes() {
        let node = graph.node(id);
        let NodeOp::Input { channels } = node.op else {
            unreachable!()
        };
        let t = inputs
            .iter()
            .find(|(n, _)| *n == node.name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Config(format!("missing graph input `{}`", node.name)))?;
        if t.dims().c != channels {
            return Err(Error::dim("input", "channels", channels, t.dims().c));
        }
        values[id.0] = Some(t);
    }
    Ok(values)
}

fn resized_hw(name: &str, h: usize, w: usize, num: usize, den: usize) -> Result<(usize, usize)> {
    if !(h * num).is_multiple_of(den) || !(w * num).is_multiple_of(den) {
        return Err(Error::InputSize {
            h,
            w,
            reason: format!("`{name}` cannot scale by {num}/{den} exactly"),
        });
    }
    Ok((h * num / den, w * num / den))
}

/// Inference-mode forward pass.
pub fn run_graph<T: Element>(
    graph: &ModelGraph,
    params: &ParamSet<T>,
    inputs: &[(&str, Tensor<T>)],
    opts: RunOptions,
) -> Result<RunResult<T>> {
    params.validate(graph)?;
    let mut values = bind_inputs(graph, inputs)?;
    let mut last_use = vec![0usize; graph.len()];
    for (i, n) in graph.nodes().iter().enumerate() {
        for p in &n.inputs {
            last_use[p.0] = i;
        }
    }
    let mut pinned = vec![opts.retain_all; graph.len()];
    for id in graph.outputs().values() {
        pinned[id.0] = true;
    }
    let mut executed = Vec::with_capacity(graph.len());

    for (i, node) in graph.nodes().iter().enumerate() {
        if matches!(node.op, NodeOp::Input { .. }) {
            executed.push(NodeId(i));
            continue;
        }
        let x = |k: usize| values[node.inputs[k].0].as_ref().expect("topological order");
        let w = |s: &str| params.require(&format!("{}.{s}", node.name));
        let out = match &node.op {
            NodeOp::Input { .. } => unreachable!(),
            NodeOp::Conv { spec, .. } => {
                let bias = if spec.has_bias { Some(w("bias")?.data()) } else { None };
                conv2d(x(0), w("weight")?, bias, spec)?
            }
            NodeOp::BatchNorm { .. } => batch_norm_eval(x(0), &bn_params(params, &node.name)?)?,
            NodeOp::Relu => relu(x(0)),
            NodeOp::Add => {
                crate::tensor::check_same("add", x(0).dims(), x(1).dims())?;
                let mut t = x(0).clone();
                t.accumulate(x(1));
                t
            }
            NodeOp::MaxPool => max_pool2d(x(0))?.output,
            NodeOp::Resize { num, den, convention } => {
                let d = x(0).dims();
                let (h, w) = resized_hw(&node.name, d.h, d.w, *num, *den)?;
                bilinear_resize(x(0), h, w, *convention)?
            }
            NodeOp::Concat => {
                let parts: Vec<&Tensor<T>> = (0..node.inputs.len()).map(x).collect();
                concat_channels(&parts)?
            }
            NodeOp::WarpGrid { divisor } => warp_grid(x(0), T::from_usize(*divisor).unwrap())?.into_inner(),
            NodeOp::GridSample => grid_sample(x(0), &SampleGrid::new(x(1).clone())?)?,
            NodeOp::Fuse {
                mode,
                normalize,
                scales,
            } => {
                let k = scales.len();
                let s: Vec<&Tensor<T>> = (0..k).map(x).collect();
                let z: Vec<&Tensor<T>> = if *mode == FusionMode::Attention {
                    (k..2 * k).map(x).collect()
                } else {
                    Vec::new()
                };
                fuse_forward(&s, &z, *mode, *normalize)?.0
            }
        };
        values[i] = Some(out);
        executed.push(NodeId(i));
        for p in &node.inputs {
            if last_use[p.0] == i && !pinned[p.0] {
                values[p.0] = None;
            }
        }
    }

    let outputs = graph
        .outputs()
        .iter()
        .map(|(name, id)| (name.clone(), values[id.0].clone().expect("pinned")))
        .collect();
    if !opts.retain_all {
        values.iter_mut().for_each(|v| *v = None);
    }
    Ok(RunResult {
        outputs,
        values,
        executed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Handles of a graph forward recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapedRun {
    pub vars: Vec<Option<Var>>,
    /// Trainable parameters registered as named leaves.
    pub params: BTreeMap<String, Var>,
    pub mode: TrainMode,
}

impl TapedRun {
    pub fn output(&self, graph: &ModelGraph, name: &str) -> Result<Var> {
        let id = graph
            .output(name)
            .ok_or_else(|| Error::Config(format!("graph has no output `{name}`")))?;
        Ok(self.vars[id.0].expect("recorded"))
    }

    pub fn node(&self, graph: &ModelGraph, name: &str) -> Option<Var> {
        graph.find(name).and_then(|id| self.vars[id.0])
    }
}

/// Records a forward pass on `tape`.
pub fn record_graph<T: Element>(
    graph: &ModelGraph,
    params: &ParamSet<T>,
    inputs: &[(&str, Tensor<T>)],
    tape: &mut Tape<T>,
    mode: TrainMode,
) -> Result<TapedRun> {
    params.validate(graph)?;
    let bound = bind_inputs(graph, inputs)?;
    let mut leaves = BTreeMap::new();
    for spec in graph.param_specs() {
        if spec.kind.trainable() {
            let v = tape.param(spec.name.clone(), params.require(&spec.name)?.clone());
            leaves.insert(spec.name, v);
        }
    }
    let mut vars: Vec<Option<Var>> = vec![None; graph.len()];
    for (i, node) in graph.nodes().iter().enumerate() {
        let ins: Vec<Var> = node
            .inputs
            .iter()
            .map(|p| vars[p.0].expect("topological order"))
            .collect();
        let leaf = |s: &str| leaves[&format!("{}.{s}", node.name)];
        let v = match &node.op {
            NodeOp::Input { .. } => tape.leaf(bound[i].clone().expect("bound")),
            NodeOp::Conv { spec, .. } => {
                let mut args = vec![ins[0], leaf("weight")];
                if spec.has_bias {
                    args.push(leaf("bias"));
                }
                tape.record(Op::Conv2d(*spec), &args)?
            }
            NodeOp::BatchNorm { .. } => {
                let args = [ins[0], leaf("gamma"), leaf("beta")];
                let eps = T::from_f64_lossy(crate::tensor::BN_EPS);
                match mode {
                    TrainMode::Train => tape.record(Op::BatchNormTrain { eps }, &args)?,
                    TrainMode::Eval => {
                        let p = bn_params(params, &node.name)?;
                        let op = Op::BatchNormEval {
                            mean: p.running_mean,
                            var: p.running_var,
                            eps,
                        };
                        tape.record(op, &args)?
                    }
                }
            }
            NodeOp::Relu => tape.record(Op::Relu, &ins)?,
            NodeOp::Add => tape.record(Op::Add, &ins)?,
            NodeOp::MaxPool => tape.record(Op::MaxPool, &ins)?,
            NodeOp::Resize { num, den, convention } => {
                let d = tape.value(ins[0]).dims();
                let (h, w) = resized_hw(&node.name, d.h, d.w, *num, *den)?;
                tape.record(
                    Op::Resize {
                        h,
                        w,
                        convention: *convention,
                    },
                    &ins,
                )?
            }
            NodeOp::Concat => tape.record(Op::Concat, &ins)?,
            NodeOp::WarpGrid { divisor } => tape.record(
                Op::WarpGrid {
                    divisor: T::from_usize(*divisor).unwrap(),
                },
                &ins,
            )?,
            NodeOp::GridSample => tape.record(Op::GridSample, &ins)?,
            NodeOp::Fuse {
                mode,
                normalize,
                scales,
            } => tape.record(
                Op::Fuse {
                    mode: *mode,
                    normalize: *normalize,
                    scales: scales.len(),
                },
                &ins,
            )?,
        };
        vars[i] = Some(v);
    }
    Ok(TapedRun {
        vars,
        params: leaves,
        mode,
    })
}

/// Folds the batch statistics of a training-mode run into the running
/// buffers.
pub fn update_running_stats<T: Element>(
    graph: &ModelGraph,
    params: &mut ParamSet<T>,
    tape: &Tape<T>,
    run: &TapedRun,
) -> Result<()> {
    if run.mode != TrainMode::Train {
        return Ok(());
    }
    for (i, node) in graph.nodes().iter().enumerate() {
        if !matches!(node.op, NodeOp::BatchNorm { .. }) {
            continue;
        }
        let Some(var) = run.vars[i] else { continue };
        let stats = tape
            .batch_stats(var)
            .ok_or_else(|| Error::Structure(format!("`{}` recorded without batch statistics", node.name)))?;
        let mut p = bn_params(params, &node.name)?;
        p.update_running(stats);
        for (suffix, v) in [("running_mean", p.running_mean), ("running_var", p.running_var)] {
            let name = format!("{}.{suffix}", node.name);
            let slot = params.get_mut(&name).ok_or_else(|| Error::param(&name, "missing"))?;
            slot.data_mut().copy_from_slice(&v);
        }
    }
    Ok(())
}
