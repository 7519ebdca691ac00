mod common;

use mfaranet::backbone::{backbone_graph, build_resnet18, forward_stages, BackboneConfig};
use mfaranet::eval::count_params;
use mfaranet::io::{parse_fixture, write_fixture};
use mfaranet::tensor::{Dims, Tensor};
use proptest::prelude::*;

fn tap_dims(cfg: &BackboneConfig, h: usize, w: usize) -> Vec<Dims> {
    let g = backbone_graph(cfg).unwrap();
    let dims = g.infer_shapes(&[("image", Dims::new(1, 3, h, w))]).unwrap();
    ["S1", "S2", "S3", "S4"]
        .iter()
        .map(|k| dims[g.output(k).unwrap().0])
        .collect()
}

/// Conv and BN-affine element counts for the ResNet-18 layer table, with
/// the classifier kept separate.
fn resnet18_table() -> (u64, u64) {
    let conv = |cin: u64, cout: u64, k: u64| cin * cout * k * k;
    let bn = |c: u64| 2 * c;
    let mut total = conv(3, 64, 7) + bn(64);
    let mut cin = 64;
    for (s, cout) in [64u64, 128, 256, 512].into_iter().enumerate() {
        for b in 0..2 {
            total += conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
            if b == 0 && s > 0 {
                total += conv(cin, cout, 1) + bn(cout);
            }
            cin = cout;
        }
    }
    (total, 512 * 1000 + 1000)
}

#[test]
fn parameter_count_matches_layer_table() {
    let (body, fc) = resnet18_table();
    assert_eq!(body + fc, 11_689_512);
    let g = backbone_graph(&BackboneConfig::default()).unwrap();
    assert_eq!(count_params(&g).total_params(), body);
}

#[test]
fn zero_image_gives_finite_taps() {
    let cfg = BackboneConfig::narrowed(16);
    let (g, p) = build_resnet18::<f32>(&cfg, None, 0).unwrap();
    let out = forward_stages(&g, &p, &Tensor::zeros(Dims::new(1, 3, 64, 64))).unwrap();
    assert!(out.s.iter().all(Tensor::all_finite));
}

#[test]
fn identical_batch_members_give_identical_taps() {
    let cfg = BackboneConfig::narrowed(16);
    let (g, p) = build_resnet18::<f32>(&cfg, None, 1).unwrap();
    let one: Tensor<f32> = common::random(Dims::new(1, 3, 64, 96), 7, 1.0);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let two = Tensor::from_vec(Dims::new(2, 3, 64, 96), two).unwrap();
    let single = forward_stages(&g, &p, &one).unwrap();
    let pair = forward_stages(&g, &p, &two).unwrap();
    for (s, b) in single.s.iter().zip(&pair.s) {
        assert_eq!(b.sample(0), s.data());
        assert_eq!(b.sample(1), s.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn taps_follow_the_stride_schedule(h in 32usize..300, w in 32usize..300) {
        let got = tap_dims(&BackboneConfig::default(), h, w);
        for (k, (d, c)) in got.iter().zip([64, 128, 256, 512]).enumerate() {
            let f = 4 << k;
            prop_assert_eq!(*d, Dims::new(1, c, h.div_ceil(f), w.div_ceil(f)));
        }
    }

    #[test]
    fn dilation_leaves_shapes_unchanged(h in 32usize..300, w in 32usize..300) {
        let cfg = BackboneConfig::default();
        prop_assert_eq!(tap_dims(&cfg, h, w), tap_dims(&cfg.clone().undilated(), h, w));
    }
}

#[test]
fn stage_means_survive_the_fixture_format() {
    let cfg = BackboneConfig::narrowed(16);
    let (g, p) = build_resnet18::<f32>(&cfg, None, 2).unwrap();
    let gray = Tensor::filled(Dims::new(1, 3, 64, 64), 0.5f32);
    let taps = forward_stages(&g, &p, &gray).unwrap();
    let f = taps.stage_means();
    assert_eq!(
        f.stages.iter().map(|(s, v)| (s.as_str(), v.len())).collect::<Vec<_>>(),
        [("S1", 4), ("S2", 8), ("S3", 16), ("S4", 32)]
    );
    let s2 = &taps.s[1];
    let want = s2.plane(0, 3).iter().map(|&v| f64::from(v)).sum::<f64>() / s2.dims().plane() as f64;
    assert!((f.get("S2").unwrap()[3] - want).abs() <= 1e-9);
    let back = parse_fixture(&write_fixture(&f)).unwrap();
    for ((_, a), (_, b)) in f.stages.iter().zip(&back.stages) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-3));
    }
}
