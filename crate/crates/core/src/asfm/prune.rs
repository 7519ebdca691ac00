use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{GraphNode, ModelGraph, NodeId, NodeOp};

/// Keeps only the requested scales for inference.
///
/// With one scale the fused output becomes that scale's score map and the
/// attention heads disappear; otherwise the fusion is rebuilt over the kept
/// scales. Everything no longer reachable is dropped.
pub fn prune_graph(graph: &ModelGraph, keep: &[usize]) -> Result<ModelGraph> {
    let keep: BTreeSet<usize> = keep.iter().copied().collect();
    if keep.is_empty() {
        return Err(Error::Config("keep_scales must not be empty".into()));
    }
    let fuse_id = graph
        .output("fused")
        .filter(|id| matches!(graph.node(*id).op, NodeOp::Fuse { .. }))
        .ok_or_else(|| Error::Structure("graph has no fused output to prune".into()))?;
    let GraphNode { op, inputs, .. } = graph.node(fuse_id).clone();
    let NodeOp::Fuse {
        mode,
        normalize,
        scales,
    } = op
    else {
        unreachable!()
    };
    if let Some(bad) = keep.iter().find(|k| !scales.contains(k)) {
        return Err(Error::Config(format!("scale {bad} not in {scales:?}")));
    }
    if keep.len() == scales.len() {
        return Ok(graph.clone());
    }

    let k = scales.len();
    let pos: Vec<usize> = keep
        .iter()
        .map(|s| scales.iter().position(|x| x == s).unwrap())
        .collect();
    let mut out_names: Vec<String> = vec!["fused".into()];
    for s in &keep {
        for prefix in ["score", "weight"] {
            let n = format!("{prefix}.{s}");
            if graph.output(&n).is_some() {
                out_names.push(n);
            }
        }
    }

    let edited = if keep.len() == 1 {
        let mut g = graph.clone();
        g.set_output("fused", inputs[pos[0]]);
        g
    } else {
        let attention = inputs.len() == 2 * k;
        let mut new_inputs: Vec<NodeId> = pos.iter().map(|&i| inputs[i]).collect();
        if attention {
            new_inputs.extend(pos.iter().map(|&i| inputs[k + i]));
        }
        let op = NodeOp::Fuse {
            mode,
            normalize,
            scales: keep.iter().copied().collect(),
        };
        graph.rewrite(|id, node| {
            if id == fuse_id {
                Some(GraphNode {
                    name: node.name.clone(),
                    op: op.clone(),
                    inputs: new_inputs.clone(),
                })
            } else {
                Some(node.clone())
            }
        })?
    };
    let refs: Vec<&str> = out_names.iter().map(String::as_str).collect();
    edited.retain_outputs(&refs)
}
