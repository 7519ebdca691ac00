mod common;

use std::collections::BTreeSet;

use mfaranet::autodiff::suite::tiny_config;
use mfaranet::backbone::{backbone_graph, build_resnet18, BackboneConfig};
use mfaranet::graph::ParamSet;
use mfaranet::io::toy::class_color;
use mfaranet::io::{
    gen_toy, load_params, load_weights, parse_fixture, read_dataset, read_image, read_labels, save_params,
    save_weights, write_atomic, write_dataset, write_fixture, write_image, write_labels, Fixture, RgbImage,
    ShapeRecord, WeightEntry, WeightFile,
};
use mfaranet::model::{build_mfaranet, MfaranetConfig};
use mfaranet::Labels;
use proptest::prelude::*;

fn entry() -> impl Strategy<Value = (Vec<usize>, Vec<u32>)> {
    proptest::collection::vec(1usize..5, 1..=4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        (Just(dims), proptest::collection::vec(any::<u32>(), n))
    })
}

fn weight_file() -> impl Strategy<Value = WeightFile> {
    proptest::collection::btree_map("[a-z][a-z0-9_.]{0,20}", entry(), 0..8).prop_map(|m| WeightFile {
        entries: m
            .into_iter()
            .map(|(name, (dims, bits))| WeightEntry {
                name,
                dims,
                data: bits.into_iter().map(f32::from_bits).collect(),
            })
            .collect(),
    })
}

fn bits(f: &WeightFile) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    f.entries
        .iter()
        .map(|e| {
            (
                e.name.clone(),
                e.dims.clone(),
                e.data.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

/// Equilateral triangle, apex up, inscribed in radius `r`, by edge signs.
fn in_triangle(dx: f64, dy: f64, r: f64) -> bool {
    let h = r * 3f64.sqrt() / 2.0;
    let v = [(0.0, -r), (h, r / 2.0), (-h, r / 2.0)];
    (0..3).all(|i| {
        let (a, b) = (v[i], v[(i + 1) % 3]);
        (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0) >= -1e-9
    })
}

fn oracle_member(s: &ShapeRecord, x: usize, y: usize) -> bool {
    let (dx, dy, r) = (x as f64 - s.cx as f64, y as f64 - s.cy as f64, s.radius as f64);
    match (s.class - 1) % 3 {
        0 => dx.hypot(dy) <= r,
        1 => dx.abs().max(dy.abs()) <= r,
        _ => in_triangle(dx, dy, r),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn weight_files_round_trip_bitwise(f in weight_file()) {
        let bytes = save_weights(&f).unwrap();
        let back = load_weights(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&f));
        prop_assert_eq!(save_weights(&back).unwrap(), bytes);
    }

    #[test]
    fn any_flipped_byte_is_detected(f in weight_file(), at in any::<proptest::sample::Index>(), mask in 1u8..=255) {
        let mut bytes = save_weights(&f).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= mask;
        prop_assert!(load_weights(&bytes).is_err());
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let img = RgbImage::new(w, h, (0..w * h * 3).map(|_| r.gen()).collect()).unwrap();
        prop_assert_eq!(read_image(&write_image(&img)).unwrap(), img);
        let lab = Labels::from_fn(1, h, w, |_, _, _| r.gen());
        prop_assert_eq!(read_labels(&write_labels(&lab)).unwrap(), lab);
    }

    #[test]
    fn fixtures_round_trip(stages in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 1..6), 1..5)) {
        let f = Fixture {
            stages: stages.iter().enumerate().map(|(i, v)| (format!("stage{}", i + 1), v.clone())).collect(),
        };
        let back = parse_fixture(&write_fixture(&f)).unwrap();
        for ((na, a), (nb, b)) in f.stages.iter().zip(&back.stages) {
            prop_assert_eq!(na, nb);
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 5e-7);
            }
        }
    }
}

#[test]
fn model_parameters_round_trip_through_the_graph() {
    let g = build_mfaranet(&tiny_config(4)).unwrap();
    let p = ParamSet::<f32>::init(&g, 21);
    let loaded = load_params(&save_params(&p).unwrap(), &g).unwrap();
    assert!(loaded.missing.is_empty() && loaded.unmatched.is_empty());
    assert!(loaded.params.bitwise_eq(&p));
}

#[test]
fn toy_labels_match_shape_rasterization() {
    let classes = 7;
    let ds = gen_toy(3, 24, 96, classes).unwrap();
    let mut seen = BTreeSet::new();
    for s in &ds.samples {
        let mut want = vec![0u8; 96 * 96];
        for sh in &s.shapes {
            seen.insert(sh.class);
            for y in 0..96 {
                for x in 0..96 {
                    if oracle_member(sh, x, y) {
                        want[y * 96 + x] = sh.class;
                    }
                }
            }
        }
        let mut hist_got = [0usize; 256];
        let mut hist_want = [0usize; 256];
        s.labels.data().iter().for_each(|&v| hist_got[v as usize] += 1);
        want.iter().for_each(|&v| hist_want[v as usize] += 1);
        assert_eq!(hist_got, hist_want);
        assert_eq!(s.labels.data(), want.as_slice());
        assert!((1..=4).contains(&(s.shapes.len() + s.skipped)));
        // pixel colours centre on the class colour
        for k in 0..classes as u8 {
            let px: Vec<usize> = (0..want.len()).filter(|&i| want[i] == k).collect();
            if px.len() < 50 {
                continue;
            }
            for c in 0..3 {
                let mean = px.iter().map(|&i| f64::from(s.image.data[i * 3 + c])).sum::<f64>() / px.len() as f64;
                let target = class_color(k, classes)[c] * 255.0;
                assert!((mean - target).abs() < 3.0, "class {k} channel {c}: {mean} vs {target}");
            }
        }
    }
    assert!(seen.len() >= 4, "classes drawn: {seen:?}");
}

#[test]
fn toy_generation_ignores_thread_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| gen_toy(9, 12, 64, 5).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, gen_toy(9, 12, 64, 5).unwrap());
    assert_ne!(a, gen_toy(10, 12, 64, 5).unwrap());
}

#[test]
fn toy_datasets_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_toy(4, 5, 64, 4).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 5);
    for ((img, lab), s) in back.iter().zip(&ds.samples) {
        assert_eq!(img, &s.image);
        assert_eq!(lab, &s.labels);
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("seed 4\ncount 5\n"));
}

#[test]
fn atomic_writes_leave_old_content_or_new() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.mfw");
    write_atomic(&p, b"old").unwrap();
    assert!(write_atomic(&dir.path().join("missing").join("w.mfw"), b"new").is_err());
    assert_eq!(std::fs::read(&p).unwrap(), b"old");
    let big = vec![7u8; 1 << 20];
    write_atomic(&p, &big).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), big);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn two_class_toys_draw_only_circles() {
    let ds = gen_toy(5, 10, 64, 2).unwrap();
    assert!(ds.samples.iter().all(|s| s.shapes.iter().all(|sh| sh.class == 1)));
    assert!(ds.samples.iter().all(|s| s.labels.data().iter().all(|&v| v < 2)));
    assert!(ds.samples.iter().any(|s| s.labels.data().contains(&1)));
}

#[test]
fn backbone_weights_load_by_name() {
    let cfg = BackboneConfig::narrowed(16);
    let model = MfaranetConfig {
        backbone: cfg.clone(),
        ..tiny_config(3)
    };
    let full = build_mfaranet(&model).unwrap();
    let p = ParamSet::<f32>::init(&full, 4);
    let bb = backbone_graph(&cfg).unwrap();
    let only = p.restricted_to(&bb).unwrap();
    let loaded = load_params(&save_params(&only).unwrap(), &bb).unwrap();
    assert!(loaded.missing.is_empty() && loaded.unmatched.is_empty());
    let (_, bound) = build_resnet18(&cfg, Some(&loaded.params), 0).unwrap();
    assert!(bound.bitwise_eq(&only));
    // a whole-model file seen by the encoder: extra names only
    let wide = load_params(&save_params(&p).unwrap(), &bb).unwrap();
    assert!(wide.missing.is_empty());
    assert!(
        !wide.unmatched.is_empty()
            && wide
                .unmatched
                .iter()
                .all(|n| !n.starts_with("stem.") && !n.starts_with("stage"))
    );
}
