//! Registered-op and whole-model finite-difference suites.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::tape::{Op, Tape, Var};
use crate::asfm::FusionMode;
use crate::error::Result;
use crate::graph::{record_graph, ModelGraph, NodeOp, ParamSet, TrainMode};
use crate::labels::Labels;
use crate::model::{build_mfaranet, MfaranetConfig, SCORE_STRIDE};
use crate::supervision::losses::OhemParams;
use crate::supervision::{record_mjs, LossConfig, Targets};
use crate::tensor::{ConvSpec, Dims, ResizeConvention, Tensor};

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One op instance with inputs chosen away from its kinks.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

/// Worst result of one op over all its cases.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSuiteEntry {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OpSuiteEntry {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn uniform(r: &mut ChaCha8Rng, d: Dims, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(d, |_| r.gen_range(lo..hi))
}

/// Magnitudes in `[margin, margin + 1)` with random sign.
fn away_from_zero(r: &mut ChaCha8Rng, d: Dims, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(d, |_| {
        let v = margin + r.gen::<f64>();
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Values pairwise separated by at least 0.08.
fn distinct(r: &mut ChaCha8Rng, d: Dims) -> Tensor<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(r);
    let noise: Vec<f64> = (0..d.len()).map(|_| r.gen_range(0.0..0.02)).collect();
    Tensor::from_fn(d, |[n, c, y, x]| {
        let i = ((n * d.c + c) * d.h + y) * d.w + x;
        order[i] as f64 * 0.1 + noise[i] - 0.05 * d.len() as f64
    })
}

fn vector(r: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    uniform(r, Dims::new(c, 1, 1, 1), lo, hi)
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn single(op: Op<f64>) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {
    move |t, v| t.record(op.clone(), v)
}

/// One randomly shaped case for every op with an adjoint.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
    let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
    let d = Dims::new(n, c, h, w);
    let mut cases = Vec::new();

    let spec = ConvSpec {
        in_channels: c,
        out_channels: r.gen_range(1..=3),
        kernel: {
            let k = r.gen_range(1..=3);
            (k, k)
        },
        stride: {
            let s = r.gen_range(1..=2);
            (s, s)
        },
        padding: {
            let p = r.gen_range(0..=1);
            (p, p)
        },
        dilation: {
            let dl = r.gen_range(1..=2);
            (dl, dl)
        },
        has_bias: true,
    };
    let spec = if spec.output_hw(h, w).is_err() {
        ConvSpec::new(c, spec.out_channels, 1).bias(true)
    } else {
        spec
    };
    cases.push(case(
        "conv2d",
        vec![
            uniform(&mut r, d, -1.0, 1.0),
            uniform(&mut r, spec.weight_dims(), -1.0, 1.0),
            vector(&mut r, spec.out_channels, -1.0, 1.0),
        ],
        single(Op::Conv2d(spec)),
    ));

    let mut bn_in = vec![
        uniform(&mut r, d, -2.0, 2.0),
        vector(&mut r, c, 0.5, 1.5),
        vector(&mut r, c, -0.5, 0.5),
    ];
    if d.n * d.plane() < 2 {
        bn_in[0] = uniform(&mut r, d.with_hw(2, 2), -2.0, 2.0);
    }
    cases.push(case(
        "batch_norm_train",
        bn_in.clone(),
        single(Op::BatchNormTrain { eps: 1e-5 }),
    ));
    let mean = vector(&mut r, c, -0.5, 0.5).into_data();
    let var = vector(&mut r, c, 0.2, 2.0).into_data();
    cases.push(case(
        "batch_norm_eval",
        bn_in,
        single(Op::BatchNormEval { mean, var, eps: 1e-5 }),
    ));

    cases.push(case("relu", vec![away_from_zero(&mut r, d, 0.05)], single(Op::Relu)));
    cases.push(case(
        "add",
        vec![uniform(&mut r, d, -1.0, 1.0), uniform(&mut r, d, -1.0, 1.0)],
        single(Op::Add),
    ));
    cases.push(case(
        "mul",
        vec![uniform(&mut r, d, -1.0, 1.0), uniform(&mut r, d, -1.0, 1.0)],
        single(Op::Mul),
    ));
    let k = r.gen_range(-2.0..2.0);
    cases.push(case("scale", vec![uniform(&mut r, d, -1.0, 1.0)], single(Op::Scale(k))));
    cases.push(case("max_pool2d", vec![distinct(&mut r, d)], single(Op::MaxPool)));

    let convention = if r.gen_bool(0.5) {
        ResizeConvention::HalfPixel
    } else {
        ResizeConvention::Eq7Origin
    };
    let (oh, ow) = (r.gen_range(1..=9), r.gen_range(1..=9));
    cases.push(case(
        "bilinear_resize",
        vec![uniform(&mut r, d, -1.0, 1.0)],
        single(Op::Resize {
            h: oh,
            w: ow,
            convention,
        }),
    ));

    // sample points strictly inside cells, away from lattice lines and borders
    let (gh, gw) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let grid = Tensor::from_fn(Dims::new(n, 2, gh, gw), |[_, ch, _, _]| {
        let len = if ch == 0 { w } else { h };
        r.gen_range(0..len - 1) as f64 + r.gen_range(0.1..0.9)
    });
    cases.push(case(
        "grid_sample",
        vec![uniform(&mut r, d, -1.0, 1.0), grid],
        single(Op::GridSample),
    ));
    cases.push(case(
        "warp_grid",
        vec![uniform(&mut r, Dims::new(n, 2, h, w), -1.0, 1.0)],
        single(Op::WarpGrid { divisor: 2.0 }),
    ));

    let c2 = r.gen_range(1..=3);
    cases.push(case(
        "concat",
        vec![uniform(&mut r, d, -1.0, 1.0), uniform(&mut r, d.with_c(c2), -1.0, 1.0)],
        single(Op::Concat),
    ));
    let classes = c + 1;
    let sd = d.with_c(classes);
    cases.push(case(
        "softmax",
        vec![uniform(&mut r, sd, -3.0, 3.0)],
        single(Op::Softmax),
    ));
    cases.push(case(
        "log_softmax",
        vec![uniform(&mut r, sd, -3.0, 3.0)],
        single(Op::LogSoftmax),
    ));

    let scales = r.gen_range(2..=4);
    let scores: Vec<Tensor<f64>> = (0..scales).map(|_| uniform(&mut r, sd, -2.0, 2.0)).collect();
    let logits: Vec<Tensor<f64>> = (0..scales).map(|_| uniform(&mut r, sd.with_c(1), -2.0, 2.0)).collect();
    for (name, normalize) in [("fuse_attention", true), ("fuse_attention_raw", false)] {
        let inputs = scores.iter().chain(&logits).cloned().collect();
        cases.push(case(
            name,
            inputs,
            single(Op::Fuse {
                mode: FusionMode::Attention,
                normalize,
                scales,
            }),
        ));
    }
    cases.push(case(
        "fuse_average",
        scores.clone(),
        single(Op::Fuse {
            mode: FusionMode::Average,
            normalize: true,
            scales,
        }),
    ));
    // separate every scale by at least 0.08 at each element
    let base = distinct(&mut r, sd.with_n(sd.n * scales));
    let per = sd.len();
    let max_scores: Vec<Tensor<f64>> = (0..scales)
        .map(|k| Tensor::from_vec(sd, base.data()[k * per..(k + 1) * per].to_vec()).unwrap())
        .collect();
    cases.push(case(
        "fuse_max",
        max_scores,
        single(Op::Fuse {
            mode: FusionMode::Max,
            normalize: true,
            scales,
        }),
    ));

    let labels = Arc::new(Labels::from_fn(n, h, w, |_, _, _| r.gen_range(0..classes) as u8));
    let ohem = OhemParams {
        thresh: 0.7,
        min_kept: r.gen_range(1..=n * h * w),
        ignore: None,
    };
    cases.push(case(
        "ce_ohem",
        vec![uniform(&mut r, sd, -3.0, 3.0)],
        single(Op::CrossEntropyOhem {
            labels: labels.clone(),
            params: ohem,
        }),
    ));
    let target = Arc::new(Tensor::from_fn(d.with_c(1), |_| f64::from(u8::from(r.gen_bool(0.3)))));
    cases.push(case(
        "balanced_bce",
        vec![uniform(&mut r, d.with_c(1), -3.0, 3.0)],
        single(Op::BalancedBce { target }),
    ));
    // logit(0.8) ≈ 1.386: keep boundary logits clear of the mask threshold
    let blog = Tensor::from_fn(d.with_c(1), |_| {
        if r.gen_bool(0.5) {
            r.gen_range(1.6..3.0)
        } else {
            r.gen_range(-3.0..1.2)
        }
    });
    cases.push(case(
        "boundary_reg",
        vec![uniform(&mut r, sd, -3.0, 3.0), blog],
        single(Op::BoundaryReg {
            labels,
            ths: 0.8,
            ignore: None,
        }),
    ));
    let coeffs: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let scalars = (0..3).map(|_| Tensor::scalar(r.gen_range(-1.0..1.0))).collect();
    cases.push(case("weighted_sum", scalars, single(Op::WeightedSum(coeffs))));
    cases
}

/// Runs `shapes` random cases per op and keeps the worst error of each.
pub fn run_op_suite(shapes: usize, seed: u64) -> Result<Vec<OpSuiteEntry>> {
    let mut out: Vec<OpSuiteEntry> = Vec::new();
    for s in 0..shapes {
        let s_seed = seed.wrapping_mul(1_000_003).wrapping_add(s as u64);
        for c in op_cases(s_seed) {
            let cfg = GradCheckConfig {
                seed: s_seed,
                ..GradCheckConfig::default()
            };
            let rep = grad_check(&c.build, &c.inputs, &cfg)?;
            match out.iter_mut().find(|e| e.name == c.name) {
                Some(e) => {
                    e.cases += 1;
                    e.max_rel_err = e.max_rel_err.max(rep.max_rel_err);
                }
                None => out.push(OpSuiteEntry {
                    name: c.name,
                    cases: 1,
                    max_rel_err: rep.max_rel_err,
                }),
            }
        }
    }
    Ok(out)
}

/// Sixteenth-width network with decoder width 4, for whole-model checks.
pub fn tiny_config(classes: usize) -> MfaranetConfig {
    let mut cfg = MfaranetConfig::toy(classes);
    cfg.backbone = crate::backbone::BackboneConfig::narrowed(16);
    cfg.mfam.dch = 4;
    cfg
}

struct TinyRun {
    tape: Tape<f64>,
    total: Var,
    leaves: std::collections::BTreeMap<String, Var>,
    /// Smallest `|x|` over every relu input.
    relu_margin: f64,
}

fn tiny_loss(
    g: &ModelGraph,
    params: &ParamSet<f64>,
    image: &Tensor<f64>,
    targets: &Targets<f64>,
    loss: &LossConfig,
) -> Result<TinyRun> {
    let mut tape = Tape::new();
    let run = record_graph(g, params, &[("image", image.clone())], &mut tape, TrainMode::Train)?;
    let scores: Vec<Var> = (1..=4)
        .map(|k| run.output(g, &format!("score.{k}")))
        .collect::<Result<_>>()?;
    let bnd: Vec<Var> = (1..=4)
        .map(|k| run.output(g, &format!("boundary.{k}")))
        .collect::<Result<_>>()?;
    let fused = run.output(g, "fused")?;
    let vars = record_mjs(&mut tape, &scores, &bnd, Some(fused), targets, loss)?;
    let relu_margin = g
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, NodeOp::Relu))
        .filter_map(|n| run.vars[n.inputs[0].0])
        .flat_map(|v| tape.value(v).data().iter().map(|x| x.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min);
    Ok(TinyRun {
        tape,
        total: vars.total,
        leaves: run.params,
        relu_margin,
    })
}

/// Finite differences of the joint objective through the whole tiny model
/// with respect to `coords` sampled parameter entries.
pub fn end_to_end_check(seed: u64, coords: usize, epsilon: f64) -> Result<GradCheckReport> {
    end_to_end_check_with(seed, coords, epsilon, &LossConfig::default())
}

/// [`end_to_end_check`] under an explicit objective configuration.
pub fn end_to_end_check_with(seed: u64, coords: usize, epsilon: f64, loss: &LossConfig) -> Result<GradCheckReport> {
    let cfg = tiny_config(3);
    let g = build_mfaranet(&cfg)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let params: ParamSet<f64> = ParamSet::init(&g, seed);
    // generic offsets: zero-initialized convs would hide the warp adjoint
    let mut params = params;
    let names: Vec<String> = params.names().cloned().collect();
    for n in &names {
        if n.starts_with("ram.") || n.ends_with(".bias") {
            let t = params.get_mut(n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
        }
    }
    let labels = Labels::from_fn(2, 64, 64, |_, y, x| ((x / 20 + y / 24) % 3) as u8);
    let targets = Targets::new(&labels, SCORE_STRIDE, loss.ignore_label)?;
    // redraw the image until no relu sits within reach of a perturbation,
    // where central differences would straddle the kink
    let margin = 10.0 * epsilon;
    let mut attempt = 0;
    let (image, base) = loop {
        let image = Tensor::from_fn(Dims::new(2, 3, 64, 64), |_| r.gen_range(-1.0..1.0));
        let run = tiny_loss(&g, &params, &image, &targets, loss)?;
        attempt += 1;
        if run.relu_margin > margin || attempt == 50 {
            break (image, run);
        }
    };
    let TinyRun {
        tape, total, leaves, ..
    } = base;
    let grads = tape.backward(total, &Tensor::scalar(1.0))?;
    let trainable: Vec<(&String, &Var)> = leaves.iter().collect();
    let sizes: Vec<usize> = trainable.iter().map(|(n, _)| params.get(n).unwrap().len()).collect();
    let all: usize = sizes.iter().sum();
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut r, all, coords.min(all)).into_vec();
    picks.sort_unstable();
    let mut worst = 0.0f64;
    let mut worst_at = None;
    for flat in &picks {
        let (mut k, mut i) = (0, *flat);
        while i >= sizes[k] {
            i -= sizes[k];
            k += 1;
        }
        let (name, var) = trainable[k];
        let analytic = grads.wrt(*var).data()[i];
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += delta;
            let run = tiny_loss(&g, &p, &image, &targets, loss)?;
            Ok(run.tape.value(run.total).data()[0])
        };
        let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
        let e = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        if e > worst {
            worst = e;
            worst_at = Some((k, i));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        checked: picks.len(),
        worst: worst_at,
    })
}
