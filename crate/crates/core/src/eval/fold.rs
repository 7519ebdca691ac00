use crate::error::{Error, Result};
use crate::graph::{GraphNode, ModelGraph, NodeOp, ParamSet};
use crate::tensor::{Element, Tensor, BN_EPS};

/// Absorbs every batch norm into the convolution feeding it:
/// `w' = w·γ/√(σ²+ε)`, `b' = (b−μ)·γ/√(σ²+ε)+β`.
pub fn fold_bn<T: Element>(graph: &ModelGraph, params: &ParamSet<T>) -> Result<(ModelGraph, ParamSet<T>)> {
    params.validate(graph)?;
    let consumers = graph.consumers();
    let mut folded_into = vec![false; graph.len()];
    let outputs: Vec<usize> = graph.outputs().values().map(|id| id.0).collect();
    for node in graph.nodes() {
        if !matches!(node.op, NodeOp::BatchNorm { .. }) {
            continue;
        }
        let src = node.inputs[0];
        let ok = matches!(graph.node(src).op, NodeOp::Conv { .. })
            && consumers[src.0].len() == 1
            && !outputs.contains(&src.0);
        if !ok {
            return Err(Error::Structure(format!(
                "batch norm `{}` is not the sole consumer of a convolution",
                node.name
            )));
        }
        folded_into[src.0] = true;
    }

    let mut out = params.clone();
    let eps = BN_EPS;
    for node in graph.nodes() {
        let NodeOp::BatchNorm { .. } = node.op else { continue };
        let conv = graph.node(node.inputs[0]);
        let NodeOp::Conv { spec, .. } = conv.op else {
            unreachable!()
        };
        let v = |s: &str| -> Result<Vec<f64>> {
            Ok(params
                .require(&format!("{}.{s}", node.name))?
                .data()
                .iter()
                .map(|x| x.as_f64())
                .collect())
        };
        let (gamma, beta, mean, var) = (v("gamma")?, v("beta")?, v("running_mean")?, v("running_var")?);
        let wname = format!("{}.weight", conv.name);
        let bname = format!("{}.bias", conv.name);
        let w = params.require(&wname)?;
        let per_out = w.len() / spec.out_channels;
        let scale: Vec<f64> = (0..spec.out_channels)
            .map(|c| gamma[c] / (var[c] + eps).sqrt())
            .collect();
        let wdata = w
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| T::from_f64_lossy(x.as_f64() * scale[k / per_out]))
            .collect();
        let old_b: Vec<f64> = match params.get(&bname) {
            Some(b) if spec.has_bias => b.data().iter().map(|x| x.as_f64()).collect(),
            _ => vec![0.0; spec.out_channels],
        };
        let bias = (0..spec.out_channels)
            .map(|c| T::from_f64_lossy((old_b[c] - mean[c]) * scale[c] + beta[c]))
            .collect();
        out.insert(wname, Tensor::from_vec(w.dims(), wdata)?);
        out.insert(bname, Tensor::vector(bias));
        for s in ["gamma", "beta", "running_mean", "running_var"] {
            out.remove(&format!("{}.{s}", node.name));
        }
    }

    let g = graph.rewrite(|id, node| match &node.op {
        NodeOp::BatchNorm { .. } => None,
        NodeOp::Conv { spec, init } if folded_into[id.0] => Some(GraphNode {
            name: node.name.clone(),
            op: NodeOp::Conv {
                spec: spec.bias(true),
                init: *init,
            },
            inputs: node.inputs.clone(),
        }),
        _ => Some(node.clone()),
    })?;
    Ok((g, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{run_graph, GraphBuilder, RunOptions};
    use crate::tensor::{ConvSpec, Dims};

    #[test]
    fn bn_after_relu_is_a_structure_error() {
        let mut g = ModelGraph::new();
        let x = g.input("x", 1).unwrap();
        let mut b = GraphBuilder::new(&mut g);
        let c = b.conv("c", x, ConvSpec::new(1, 1, 1)).unwrap();
        let r = b.relu("r", c).unwrap();
        let n = b.bn("n", r, 1).unwrap();
        g.set_output("y", n);
        let p = ParamSet::<f32>::init(&g, 0);
        assert!(matches!(fold_bn(&g, &p), Err(Error::Structure(_))));
    }

    #[test]
    fn identity_bn_leaves_weights() {
        let mut g = ModelGraph::new();
        let x = g.input("x", 2).unwrap();
        let mut b = GraphBuilder::new(&mut g);
        let c = b.conv("c", x, ConvSpec::new(2, 3, 3)).unwrap();
        let n = b.bn("n", c, 3).unwrap();
        g.set_output("y", n);
        let mut p = ParamSet::<f32>::init(&g, 1);
        p.insert("n.running_var", Tensor::vector(vec![1.0 - BN_EPS as f32; 3]));
        let (fg, fp) = fold_bn(&g, &p).unwrap();
        assert_eq!(fg.len(), 2);
        assert!(fp.get("c.weight").unwrap().max_abs_diff(p.get("c.weight").unwrap()) <= 1e-7);
        let input = Tensor::from_fn(Dims::new(1, 2, 4, 4), |[_, c, y, x]| (c + y * x) as f32 * 0.1);
        let a = run_graph(&g, &p, &[("x", input.clone())], RunOptions::default()).unwrap();
        let b = run_graph(&fg, &fp, &[("x", input)], RunOptions::default()).unwrap();
        assert!(a.output("y").unwrap().max_abs_diff(b.output("y").unwrap()) <= 1e-5);
    }
}
