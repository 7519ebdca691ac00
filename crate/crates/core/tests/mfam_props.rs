mod common;

use mfaranet::graph::ParamSet;
use mfaranet::mfam::{aggregate, bottom_up, lateral_fuse, mfam_graph, top_down, MfamConfig};
use mfaranet::tensor::{Dims, Tensor};
use proptest::prelude::*;

const CHANS: [usize; 4] = [3, 5, 6, 8];

fn cfg() -> MfamConfig {
    MfamConfig {
        dch: 4,
        ..MfamConfig::default()
    }
}

fn taps(seed: u64, side: usize) -> Vec<Tensor<f64>> {
    (0..4)
        .map(|k| common::random(Dims::new(1, CHANS[k], side >> k, side >> k), seed + k as u64, 1.0))
        .collect()
}

fn params(cfg: &MfamConfig, seed: u64) -> ParamSet<f64> {
    ParamSet::init(&mfam_graph(cfg, &CHANS).unwrap(), seed)
}

fn perturbed(s: &[Tensor<f64>], m: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut out = s.to_vec();
    let noise: Tensor<f64> = common::random(s[m].dims(), seed, 0.5);
    out[m].accumulate(&noise);
    out
}

/// Dirac 3×3 fusion kernels, channel-averaging projections, zero biases.
fn identity_params(cfg: &MfamConfig) -> ParamSet<f64> {
    let g = mfam_graph(cfg, &CHANS).unwrap();
    let mut p = ParamSet::<f64>::init(&g, 0);
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        let t = p.get_mut(&name).unwrap();
        let d = t.dims();
        if name.ends_with(".bias") {
            *t = Tensor::zeros(d);
        } else if name.ends_with(".weight") && d.h == 1 {
            *t = Tensor::filled(d, 1.0 / d.c as f64);
        } else if name.ends_with(".weight") {
            *t = Tensor::from_fn(d, |[o, i, y, x]| if o == i && y == 1 && x == 1 { 1.0 } else { 0.0 });
        }
    }
    p
}

fn is_constant(t: &Tensor<f64>, tol: f64) -> bool {
    let d = t.dims();
    (0..d.c).all(|c| {
        let plane = t.plane(0, c);
        plane.iter().all(|v| (v - plane[0]).abs() <= tol)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn top_down_ignores_finer_levels(seed in 0u64..1000, m in 0usize..3) {
        let c = cfg();
        let p = params(&c, seed);
        let s = taps(seed, 16);
        let a = top_down(&c, &p, &s).unwrap();
        let b = top_down(&c, &p, &perturbed(&s, m, seed ^ 77)).unwrap();
        for n in m + 1..4 {
            prop_assert!(a[n].bitwise_eq(&b[n]), "U{} moved when S{} changed", n + 1, m + 1);
        }
        prop_assert!(!a[m].bitwise_eq(&b[m]));
    }

    #[test]
    fn bottom_up_ignores_coarser_levels(seed in 0u64..1000, m in 1usize..4) {
        let c = cfg();
        let p = params(&c, seed);
        let s = taps(seed, 16);
        let a = bottom_up(&c, &p, &s).unwrap();
        let b = bottom_up(&c, &p, &perturbed(&s, m, seed ^ 77)).unwrap();
        for n in 0..m {
            prop_assert!(a[n].bitwise_eq(&b[n]), "D{} moved when S{} changed", n + 1, m + 1);
        }
        prop_assert!(!a[m].bitwise_eq(&b[m]));
    }

    #[test]
    fn middle_levels_see_every_level(seed in 0u64..1000, m in 0usize..4) {
        let c = cfg();
        let p = params(&c, seed);
        let s = taps(seed, 16);
        let a = aggregate(&c, &p, &s).unwrap();
        let b = aggregate(&c, &p, &perturbed(&s, m, seed ^ 77)).unwrap();
        prop_assert!(!a.f[1].bitwise_eq(&b.f[1]), "F2 blind to S{}", m + 1);
        prop_assert!(!a.f[2].bitwise_eq(&b.f[2]), "F3 blind to S{}", m + 1);
    }

    #[test]
    fn constants_are_preserved(c in proptest::collection::vec(0.1f64..2.0, 4), bn in any::<bool>()) {
        let cfg = MfamConfig { fusion_bn: bn, ..cfg() };
        let p = identity_params(&cfg);
        let s: Vec<Tensor<f64>> = (0..4)
            .map(|k| Tensor::filled(Dims::new(1, CHANS[k], 16 >> k, 16 >> k), c[k]))
            .collect();
        let a = aggregate(&cfg, &p, &s).unwrap();
        for t in a.u.iter().chain(&a.d).chain(&a.f) {
            prop_assert!(is_constant(t, 1e-9));
        }
        if !bn {
            // exact partial sums along each path
            for n in 0..4 {
                let up: f64 = c[n..].iter().sum();
                let down: f64 = c[..=n].iter().sum();
                prop_assert!((a.u[n].data()[0] - up).abs() < 1e-9);
                prop_assert!((a.d[n].data()[0] - down).abs() < 1e-9);
            }
            for n in 1..3 {
                prop_assert!((a.f[n].data()[0] - a.u[n].data()[0] - a.d[n].data()[0]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn lateral_fuse_agrees_with_the_graph() {
    let c = cfg();
    let p = params(&c, 5);
    let s = taps(5, 16);
    let a = aggregate(&c, &p, &s).unwrap();
    let f = lateral_fuse(&c, &p, &a.u, &a.d).unwrap();
    for (x, y) in f.iter().zip(&a.f) {
        assert!(x.bitwise_eq(y));
    }
    assert!(a.f[0].bitwise_eq(&a.u[0]));
    assert!(a.f[3].bitwise_eq(&a.d[3]));
}
