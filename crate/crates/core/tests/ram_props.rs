mod common;

use mfaranet::autodiff::Tape;
use mfaranet::graph::{record_graph, run_graph, ModelGraph, NodeId, ParamSet, RunOptions, TrainMode};
use mfaranet::ram::{align_recursive, build_ram, compute_offsets, AlignMode, RamConfig};
use mfaranet::tensor::{bilinear_resize, Dims, ResizeConvention, Tensor};
use proptest::prelude::*;

const DCH: usize = 3;

fn cfg(mode: AlignMode) -> RamConfig {
    RamConfig {
        mode,
        dch: DCH,
        ..RamConfig::default()
    }
}

fn graph(mode: AlignMode) -> ModelGraph {
    let mut g = ModelGraph::new();
    let f: Vec<NodeId> = (1..=4).map(|k| g.input(format!("F{k}"), DCH).unwrap()).collect();
    let p = build_ram(&mut g, &cfg(mode), &f).unwrap();
    for (k, id) in p.iter().enumerate() {
        g.set_output(format!("P{}", k + 1), *id);
    }
    g
}

fn pyramid(seed: u64, side: usize) -> Vec<Tensor<f64>> {
    (0..4)
        .map(|k| common::random(Dims::new(1, DCH, side >> k, side >> k), seed + k as u64, 1.0))
        .collect()
}

fn inputs(f: &[Tensor<f64>]) -> Vec<(String, Tensor<f64>)> {
    f.iter()
        .enumerate()
        .map(|(k, t)| (format!("F{}", k + 1), t.clone()))
        .collect()
}

fn run(g: &ModelGraph, p: &ParamSet<f64>, f: &[Tensor<f64>], opts: RunOptions) -> mfaranet::graph::RunResult<f64> {
    let ins = inputs(f);
    let refs: Vec<(&str, Tensor<f64>)> = ins.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    run_graph(g, p, &refs, opts).unwrap()
}

fn random_params(g: &ModelGraph, seed: u64, scale: f64) -> ParamSet<f64> {
    let mut p = ParamSet::<f64>::init(g, seed);
    let names: Vec<String> = p.names().cloned().collect();
    for (i, name) in names.iter().enumerate() {
        let d = p.get(name).unwrap().dims();
        p.insert(name.clone(), common::random(d, seed * 31 + i as u64, scale));
    }
    p
}

fn upsample_chain(t: &Tensor<f64>, times: usize) -> Tensor<f64> {
    let mut x = t.clone();
    for _ in 0..times {
        let d = x.dims();
        x = bilinear_resize(&x, 2 * d.h, 2 * d.w, ResizeConvention::Eq7Origin).unwrap();
    }
    x
}

#[test]
fn zero_offsets_collapse_to_iterated_upsampling() {
    let f = pyramid(3, 32);
    let zeros: Vec<Tensor<f64>> = (0..3)
        .map(|k| Tensor::zeros(Dims::new(1, 2, 32 >> k, 32 >> k)))
        .collect();
    let direct = align_recursive(&f, &zeros).unwrap();
    let g = graph(AlignMode::Recursive);
    let init = ParamSet::init(&g, 0);
    let mut r = run(&g, &init, &f, RunOptions::default());
    for n in 0..4 {
        let want = upsample_chain(&f[n], n);
        assert!(direct[n].max_abs_diff(&want) <= 1e-6, "P{}", n + 1);
        let got = r.outputs.remove(&format!("P{}", n + 1)).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-6, "graph P{}", n + 1);
    }
}

#[test]
fn offsets_are_computed_once_per_level_pair() {
    let g = graph(AlignMode::Recursive);
    let p = random_params(&g, 2, 0.3);
    let r = run(&g, &p, &pyramid(4, 16), RunOptions::default());
    let is_offset = |n: &str| {
        n.strip_prefix("ram.offset.")
            .is_some_and(|k| k.parse::<usize>().is_ok())
    };
    assert_eq!(r.executed_count(&g, is_offset), 3);
    assert_eq!(r.executed_count(&g, |n| n.starts_with("ram.grid.")), 3);
    assert_eq!(r.executed_count(&g, |n| n.starts_with("ram.warp.")), 6);
}

#[test]
fn graph_warps_match_the_functional_chain() {
    let g = graph(AlignMode::Recursive);
    let c = cfg(AlignMode::Recursive);
    let p = random_params(&g, 5, 0.3);
    let f = pyramid(6, 16);
    let deltas = compute_offsets(&c, &p, &f).unwrap();
    let direct = align_recursive(&f, &deltas).unwrap();
    let r = run(&g, &p, &f, RunOptions::default());
    for n in 0..4 {
        assert!(r.outputs[&format!("P{}", n + 1)].max_abs_diff(&direct[n]) <= 1e-12);
    }
}

#[test]
fn offset_convs_receive_gradient() {
    let g = graph(AlignMode::Recursive);
    let p = ParamSet::<f64>::init(&g, 0);
    let f = pyramid(8, 16);
    let ins = inputs(&f);
    let refs: Vec<(&str, Tensor<f64>)> = ins.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    for n in 2..=4 {
        let mut tape = Tape::new();
        let run = record_graph(&g, &p, &refs, &mut tape, TrainMode::Train).unwrap();
        let out = run.output(&g, &format!("P{n}")).unwrap();
        let seed: Tensor<f64> = common::random(tape.value(out).dims(), n as u64, 1.0);
        let grads = tape.gradient_map(&tape.backward(out, &seed).unwrap());
        for k in 1..n {
            let w = &grads[&format!("ram.offset.{k}.weight")];
            let norm: f64 = w.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "no gradient into offset {k} from P{n}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn finest_level_passes_through(seed in 0u64..1000, scale in 0.0f64..3.0, mode in 0usize..3) {
        let mode = [AlignMode::Recursive, AlignMode::Straightforward, AlignMode::Bilinear][mode];
        let g = graph(mode);
        let p = random_params(&g, seed, scale);
        let f = pyramid(seed, 16);
        let r = run(&g, &p, &f, RunOptions::default());
        prop_assert!(r.outputs["P1"].bitwise_eq(&f[0]));
    }
}
