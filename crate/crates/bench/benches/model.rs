use criterion::{criterion_group, criterion_main, Criterion};
use mfaranet::graph::{run_graph, RunOptions};
use mfaranet::model::MfaranetConfig;
use mfaranet::tensor::Dims;
use mfaranet_bench::{pattern, variants};

fn forward(c: &mut Criterion) {
    let image = pattern(Dims::new(1, 3, 96, 96), 9);
    for (label, cfg) in [
        ("toy", MfaranetConfig::toy(6)),
        ("standard", MfaranetConfig::standard(19)),
    ] {
        let v = variants(&cfg, &[2]);
        let mut group = c.benchmark_group(format!("forward {label} 3x96x96"));
        group.sample_size(20);
        for (name, (g, p)) in [("full", &v.full), ("pruned {2}", &v.pruned), ("folded", &v.folded)] {
            group.bench_function(name, |b| {
                b.iter(|| run_graph(g, p, &[("image", image.clone())], RunOptions::default()).unwrap())
            });
        }
        group.finish();
    }
}

criterion_group!(benches, forward);
criterion_main!(benches);
