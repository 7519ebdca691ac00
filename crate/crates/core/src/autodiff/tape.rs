use std::collections::BTreeMap;
use std::sync::Arc;

use crate::asfm::{fuse_backward, fuse_forward, FuseState, FusionMode};
use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::ram::warp_grid;
use crate::supervision::losses::{
    balanced_bce, balanced_bce_backward, boundary_reg, ce_ohem, ce_weighted_backward, BceOutput, OhemParams,
};
use crate::tensor::{
    batch_norm_backward_eval, batch_norm_backward_train, batch_norm_eval, batch_norm_train, bilinear_resize,
    bilinear_resize_backward, concat_channels, conv2d, conv2d_backward, grid_sample, grid_sample_backward,
    log_softmax_channels, max_pool2d, max_pool2d_backward, relu, relu_backward, softmax_channels, split_channels,
    BatchStats, BnParams, ConvSpec, Dims, Element, ResizeConvention, SampleGrid, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations the tape can record. Vector operands (bias, gamma, beta) are
/// `(C,1,1,1)` tensors.
#[derive(Debug, Clone)]
pub enum Op<T: Element> {
    /// `[x, w]` or `[x, w, b]`.
    Conv2d(ConvSpec),
    /// `[x, gamma, beta]`, normalized with batch statistics.
    BatchNormTrain {
        eps: T,
    },
    /// `[x, gamma, beta]`, normalized with fixed statistics.
    BatchNormEval {
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    Relu,
    Add,
    Mul,
    Scale(T),
    MaxPool,
    Resize {
        h: usize,
        w: usize,
        convention: ResizeConvention,
    },
    /// `[x, grid]`.
    GridSample,
    /// `[delta]` to the coordinates `(g + delta) / divisor`.
    WarpGrid {
        divisor: T,
    },
    Concat,
    Softmax,
    LogSoftmax,
    /// `[s_1..s_k, z_1..z_k]` in attention mode, `[s_1..s_k]` otherwise.
    Fuse {
        mode: FusionMode,
        normalize: bool,
        scales: usize,
    },
    /// `[scores]` to the OHEM cross entropy.
    CrossEntropyOhem {
        labels: Arc<Labels>,
        params: OhemParams,
    },
    /// `[logits]` against a fixed binary target.
    BalancedBce {
        target: Arc<Tensor<T>>,
    },
    /// `[scores, boundary_logits]`.
    BoundaryReg {
        labels: Arc<Labels>,
        ths: f64,
        ignore: Option<u8>,
    },
    /// `Σ c_i x_i` over scalar inputs.
    WeightedSum(Vec<T>),
    /// Per-pixel class id; has no adjoint.
    Argmax,
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MaxPool => "max_pool2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::GridSample => "grid_sample",
            Op::WarpGrid { .. } => "warp_grid",
            Op::Concat => "concat",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Fuse { .. } => "fuse",
            Op::CrossEntropyOhem { .. } => "ce_ohem",
            Op::BalancedBce { .. } => "balanced_bce",
            Op::BoundaryReg { .. } => "boundary_reg",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Argmax => "argmax",
        }
    }
}

#[derive(Debug, Clone)]
enum Saved<T: Element> {
    None,
    Bn(BatchStats<T>),
    Pool(Vec<u32>),
    Fuse(FuseState<T>),
    PixelWeight(Vec<T>),
    Bce(BceOutput<T>),
}

#[derive(Debug, Clone)]
enum Kind<T: Element> {
    Leaf,
    Op(Op<T>),
}

#[derive(Debug, Clone)]
struct Node<T: Element> {
    kind: Kind<T>,
    parents: Vec<usize>,
    value: Tensor<T>,
    saved: Saved<T>,
    name: Option<String>,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of every recorded value.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Dims>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.dims[v.0]))
    }
}

/// Named-leaf gradients; untouched leaves map to zeros.
pub type GradientMap<T = f32> = BTreeMap<String, Tensor<T>>;

fn vec_of<T: Element>(t: &Tensor<T>) -> &[T] {
    t.data()
}

fn col<T: Element>(v: Vec<T>) -> Tensor<T> {
    Tensor::vector(v)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: Kind<T>, parents: Vec<usize>, value: Tensor<T>, saved: Saved<T>) -> Var {
        self.nodes.push(Node {
            kind,
            parents,
            value,
            saved,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an anonymous leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Kind::Leaf, Vec::new(), value, Saved::None)
    }

    /// Registers a named leaf whose gradient appears in [`Tape::gradient_map`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].parents.iter().map(|&p| Var(p)).collect()
    }

    /// Op name of a node, `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        match &self.nodes[v.0].kind {
            Kind::Leaf => None,
            Kind::Op(op) => Some(op.name()),
        }
    }

    /// Batch statistics of a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].saved {
            Saved::Bn(s) => Some(s),
            _ => None,
        }
    }

    pub fn record(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::Structure(format!("{}: input {} not on tape", op.name(), v.0)));
            }
        }
        let (value, saved) = self.forward(&op, inputs)?;
        Ok(self.push(Kind::Op(op), inputs.iter().map(|v| v.0).collect(), value, saved))
    }

    fn arity(op: &Op<T>, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::dim(op.name(), "inputs", expected, got));
        }
        Ok(())
    }

    fn forward(&self, op: &Op<T>, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let x = |i: usize| &self.nodes[inputs[i].0].value;
        let none = |t: Tensor<T>| Ok((t, Saved::None));
        match op {
            Op::Conv2d(spec) => {
                Self::arity(op, inputs.len(), if spec.has_bias { 3 } else { 2 })?;
                let bias = spec.has_bias.then(|| vec_of(x(2)));
                none(conv2d(x(0), x(1), bias, spec)?)
            }
            Op::BatchNormTrain { eps } => {
                Self::arity(op, inputs.len(), 3)?;
                let p = self.bn_params(x(1), x(2), None, *eps);
                let (out, stats) = batch_norm_train(x(0), &p)?;
                Ok((out, Saved::Bn(stats)))
            }
            Op::BatchNormEval { mean, var, eps } => {
                Self::arity(op, inputs.len(), 3)?;
                let p = self.bn_params(x(1), x(2), Some((mean, var)), *eps);
                none(batch_norm_eval(x(0), &p)?)
            }
            Op::Relu => {
                Self::arity(op, inputs.len(), 1)?;
                none(relu(x(0)))
            }
            Op::Add | Op::Mul => {
                Self::arity(op, inputs.len(), 2)?;
                crate::tensor::check_same(op.name(), x(0).dims(), x(1).dims())?;
                let f = |a: T, b: T| if matches!(op, Op::Add) { a + b } else { a * b };
                let data = x(0).data().iter().zip(x(1).data()).map(|(&a, &b)| f(a, b)).collect();
                none(Tensor::from_vec(x(0).dims(), data)?)
            }
            Op::Scale(c) => {
                Self::arity(op, inputs.len(), 1)?;
                let c = *c;
                none(x(0).map(|v| v * c))
            }
            Op::MaxPool => {
                Self::arity(op, inputs.len(), 1)?;
                let out = max_pool2d(x(0))?;
                Ok((out.output, Saved::Pool(out.argmax)))
            }
            Op::Resize { h, w, convention } => {
                Self::arity(op, inputs.len(), 1)?;
                none(bilinear_resize(x(0), *h, *w, *convention)?)
            }
            Op::GridSample => {
                Self::arity(op, inputs.len(), 2)?;
                let grid = SampleGrid::new(x(1).clone())?;
                none(grid_sample(x(0), &grid)?)
            }
            Op::WarpGrid { divisor } => {
                Self::arity(op, inputs.len(), 1)?;
                none(warp_grid(x(0), *divisor)?.into_inner())
            }
            Op::Concat => {
                let parts: Vec<&Tensor<T>> = (0..inputs.len()).map(x).collect();
                none(concat_channels(&parts)?)
            }
            Op::Softmax => {
                Self::arity(op, inputs.len(), 1)?;
                none(softmax_channels(x(0)))
            }
            Op::LogSoftmax => {
                Self::arity(op, inputs.len(), 1)?;
                none(log_softmax_channels(x(0)))
            }
            Op::Fuse {
                mode,
                normalize,
                scales,
            } => {
                let expected = if *mode == FusionMode::Attention {
                    2 * scales
                } else {
                    *scales
                };
                Self::arity(op, inputs.len(), expected)?;
                let s: Vec<&Tensor<T>> = (0..*scales).map(x).collect();
                let z: Vec<&Tensor<T>> = (*scales..inputs.len()).map(x).collect();
                let (out, state) = fuse_forward(&s, &z, *mode, *normalize)?;
                Ok((out, Saved::Fuse(state)))
            }
            Op::CrossEntropyOhem { labels, params } => {
                Self::arity(op, inputs.len(), 1)?;
                let out = ce_ohem(x(0), labels, params)?;
                Ok((Tensor::scalar(out.loss), Saved::PixelWeight(out.pixel_weight)))
            }
            Op::BalancedBce { target } => {
                Self::arity(op, inputs.len(), 1)?;
                let out = balanced_bce(x(0), target)?;
                Ok((Tensor::scalar(out.loss), Saved::Bce(out)))
            }
            Op::BoundaryReg { labels, ths, ignore } => {
                Self::arity(op, inputs.len(), 2)?;
                let out = boundary_reg(x(0), x(1), labels, *ths, *ignore)?;
                Ok((Tensor::scalar(out.loss), Saved::PixelWeight(out.pixel_weight)))
            }
            Op::WeightedSum(c) => {
                Self::arity(op, inputs.len(), c.len())?;
                let mut acc = T::zero();
                for (i, &ci) in c.iter().enumerate() {
                    let v = x(i);
                    if v.len() != 1 {
                        return Err(Error::dim("weighted_sum", "elements", 1, v.len()));
                    }
                    acc = acc + ci * v.data()[0];
                }
                none(Tensor::scalar(acc))
            }
            Op::Argmax => Err(Error::Unsupported("argmax has no registered adjoint".into())),
        }
    }

    fn bn_params(&self, gamma: &Tensor<T>, beta: &Tensor<T>, stats: Option<(&Vec<T>, &Vec<T>)>, eps: T) -> BnParams<T> {
        let c = gamma.len();
        let (mean, var) = match stats {
            Some((m, v)) => (m.clone(), v.clone()),
            None => (vec![T::zero(); c], vec![T::one(); c]),
        };
        BnParams {
            gamma: gamma.data().to_vec(),
            beta: beta.data().to_vec(),
            running_mean: mean,
            running_var: var,
            eps,
            momentum: T::from_f64_lossy(crate::tensor::BN_MOMENTUM),
        }
    }

    /// Re-executes every op from the recorded leaf values.
    pub fn replay(&self) -> Result<Tape<T>> {
        let mut out = Tape::new();
        for node in &self.nodes {
            match &node.kind {
                Kind::Leaf => {
                    let v = out.leaf(node.value.clone());
                    out.nodes[v.0].name = node.name.clone();
                }
                Kind::Op(op) => {
                    let parents: Vec<Var> = node.parents.iter().map(|&p| Var(p)).collect();
                    out.record(op.clone(), &parents)?;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates adjoints from `output` back to the leaves.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let od = self.nodes[output.0].value.dims();
        crate::tensor::check_same("backward", od, seed.dims())?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Kind::Op(op) = &node.kind {
                let pg = self.adjoint(op, node, &g)?;
                for (&p, gp) in node.parents.iter().zip(pg) {
                    if let Some(gp) = gp {
                        match &mut grads[p] {
                            Some(acc) => acc.accumulate(&gp),
                            slot => *slot = Some(gp),
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims()).collect(),
        })
    }

    /// Gradients of all named leaves.
    pub fn gradient_map(&self, grads: &Gradients<T>) -> GradientMap<T> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.as_ref().map(|name| (name.clone(), grads.wrt(Var(i)))))
            .collect()
    }

    /// Named leaves in recording order.
    pub fn named_leaves(&self) -> Vec<(String, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.as_ref().map(|name| (name.clone(), Var(i))))
            .collect()
    }

    fn adjoint(&self, op: &Op<T>, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = |i: usize| &self.nodes[node.parents[i]].value;
        let scalar_seed = || g.data()[0];
        Ok(match op {
            Op::Conv2d(spec) => {
                let cg = conv2d_backward(x(0), x(1), g, spec)?;
                let mut out = vec![Some(cg.input), Some(cg.weight)];
                if let Some(b) = cg.bias {
                    out.push(Some(col(b)));
                }
                out
            }
            Op::BatchNormTrain { eps } => {
                let Saved::Bn(stats) = &node.saved else { unreachable!() };
                let p = self.bn_params(x(1), x(2), None, *eps);
                let bg = batch_norm_backward_train(x(0), &p, stats, g)?;
                vec![Some(bg.input), Some(col(bg.gamma)), Some(col(bg.beta))]
            }
            Op::BatchNormEval { mean, var, eps } => {
                let p = self.bn_params(x(1), x(2), Some((mean, var)), *eps);
                let bg = batch_norm_backward_eval(x(0), &p, g)?;
                vec![Some(bg.input), Some(col(bg.gamma)), Some(col(bg.beta))]
            }
            Op::Relu => vec![Some(relu_backward(x(0), g))],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul => {
                let mul = |a: &Tensor<T>| {
                    let data = a.data().iter().zip(g.data()).map(|(&u, &v)| u * v).collect();
                    Tensor::from_vec(a.dims(), data)
                };
                vec![Some(mul(x(1))?), Some(mul(x(0))?)]
            }
            Op::Scale(c) => {
                let c = *c;
                vec![Some(g.map(|v| v * c))]
            }
            Op::MaxPool => {
                let Saved::Pool(arg) = &node.saved else { unreachable!() };
                vec![Some(max_pool2d_backward(x(0).dims(), arg, g))]
            }
            Op::Resize { convention, .. } => vec![Some(bilinear_resize_backward(x(0).dims(), g, *convention))],
            Op::GridSample => {
                let grid = SampleGrid::new(x(1).clone())?;
                let (gi, gg) = grid_sample_backward(x(0), &grid, g)?;
                vec![Some(gi), Some(gg)]
            }
            Op::WarpGrid { divisor } => {
                let d = *divisor;
                vec![Some(g.map(|v| v / d))]
            }
            Op::Concat => {
                let widths: Vec<usize> = node.parents.iter().map(|&p| self.nodes[p].value.dims().c).collect();
                split_channels(g, &widths)?.into_iter().map(Some).collect()
            }
            Op::Softmax => {
                let p = &node.value;
                vec![Some(per_pixel_adjoint(
                    p,
                    g,
                    |pv, gv, dot| pv * (gv - dot),
                    |pv, gv| pv * gv,
                ))]
            }
            Op::LogSoftmax => {
                let p = softmax_channels(x(0));
                vec![Some(per_pixel_adjoint(&p, g, |pv, gv, sum| gv - pv * sum, |_, gv| gv))]
            }
            Op::Fuse { normalize, scales, .. } => {
                let Saved::Fuse(state) = &node.saved else {
                    unreachable!()
                };
                let s: Vec<&Tensor<T>> = (0..*scales).map(x).collect();
                let (gs, gz) = fuse_backward(&s, state, *normalize, g);
                let mut out: Vec<Option<Tensor<T>>> = gs.into_iter().map(Some).collect();
                out.extend(gz.into_iter().map(Some));
                out
            }
            Op::CrossEntropyOhem { labels, .. } => {
                let Saved::PixelWeight(w) = &node.saved else {
                    unreachable!()
                };
                vec![Some(ce_weighted_backward(x(0), labels, w, scalar_seed()))]
            }
            Op::BalancedBce { target } => {
                let Saved::Bce(out) = &node.saved else { unreachable!() };
                vec![Some(balanced_bce_backward(x(0), target, out, scalar_seed()))]
            }
            Op::BoundaryReg { labels, .. } => {
                let Saved::PixelWeight(w) = &node.saved else {
                    unreachable!()
                };
                // the boundary mask is a constant: no gradient to the logits
                vec![Some(ce_weighted_backward(x(0), labels, w, scalar_seed())), None]
            }
            Op::WeightedSum(c) => c.iter().map(|&ci| Some(Tensor::scalar(ci * scalar_seed()))).collect(),
            Op::Argmax => return Err(Error::Unsupported("argmax has no registered adjoint".into())),
        })
    }
}

/// Channel-wise adjoint of the softmax family: `reduce` builds the per-pixel
/// sum, `f(p, g, sum)` the result.
fn per_pixel_adjoint<T: Element>(
    p: &Tensor<T>,
    g: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
    reduce: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let d = p.dims();
    let plane = d.plane();
    let mut out = g.clone();
    for n in 0..d.n {
        for i in 0..plane {
            let idx = |c: usize| (n * d.c + c) * plane + i;
            let mut sum = T::zero();
            for c in 0..d.c {
                sum = sum + reduce(p.data()[idx(c)], g.data()[idx(c)]);
            }
            for c in 0..d.c {
                out.data_mut()[idx(c)] = f(p.data()[idx(c)], g.data()[idx(c)], sum);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn recorded_add_matches_direct_kernel() {
        let d = Dims::new(1, 2, 3, 3);
        let a = Tensor::<f32>::from_fn(d, |[_, c, y, x]| (c * 9 + y * 3 + x) as f32 * 0.1);
        let b = a.map(|v| v.sin());
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let s = t.record(Op::Add, &[va, vb]).unwrap();
        let direct = crate::tensor::pointwise(
            crate::tensor::Pointwise::Add,
            &a,
            crate::tensor::PointwiseArg::Tensor(&b),
        )
        .unwrap();
        assert!(t.value(s).bitwise_eq(&direct));
    }

    #[test]
    fn chained_relus_are_topological() {
        let mut t = Tape::<f32>::new();
        let mut v = t.leaf(Tensor::scalar(1.0));
        let mut ids = Vec::new();
        for _ in 0..3 {
            v = t.record(Op::Relu, &[v]).unwrap();
            ids.push(v);
        }
        assert_eq!(t.len(), 4);
        for w in ids.windows(2) {
            assert!(t.parents(w[1])[0] < w[1]);
            assert_eq!(t.parents(w[1])[0], w[0]);
        }
    }

    #[test]
    fn scale_and_relu_gradients() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(Dims::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.record(Op::Scale(3.0), &[x]).unwrap();
        let r = t.record(Op::Relu, &[y]).unwrap();
        let g = t.backward(r, &Tensor::filled(Dims::new(1, 1, 1, 3), 1.0)).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn argmax_is_unsupported_and_seed_is_checked() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(Dims::new(1, 2, 2, 2)));
        assert!(matches!(t.record(Op::Argmax, &[x]), Err(Error::Unsupported(_))));
        assert!(matches!(
            t.backward(x, &Tensor::scalar(1.0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn untouched_named_leaf_gets_zeros() {
        let mut t = Tape::<f32>::new();
        let a = t.param("a", Tensor::scalar(2.0));
        let _b = t.param("b", Tensor::zeros(Dims::new(1, 3, 1, 1)));
        let y = t.record(Op::Scale(5.0), &[a]).unwrap();
        let g = t.backward(y, &Tensor::scalar(1.0)).unwrap();
        let map = t.gradient_map(&g);
        assert_eq!(map["a"].data(), &[5.0]);
        assert_eq!(map["b"].data(), &[0.0; 3]);
    }
}
