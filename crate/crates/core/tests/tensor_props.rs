mod common;

use common::{naive_conv, random, rel_diff};
use mfaranet::tensor::{
    bilinear_resize, conv2d, grid_sample, softmax_channels, ConvSpec, Dims, ResizeConvention, SampleGrid, Tensor,
};
use proptest::prelude::*;

fn conv_case() -> impl Strategy<Value = (ConvSpec, Dims, u64)> {
    (
        1usize..4,
        1usize..5,
        1usize..4,
        1usize..4,
        0usize..3,
        1usize..3,
        1usize..3,
        5usize..12,
        5usize..12,
        any::<u64>(),
        any::<bool>(),
    )
        .prop_map(|(cin, cout, k, s, p, dl, n, h, w, seed, bias)| {
            let spec = ConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel: (k, k),
                stride: (s, s),
                padding: (p, p),
                dilation: (dl, dl),
                has_bias: bias,
            };
            (spec, Dims::new(n, cin, h, w), seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn conv_matches_direct_loop((spec, d, seed) in conv_case()) {
        let x = random::<f64>(d, seed, 1.0);
        let w = random::<f64>(spec.weight_dims(), seed ^ 1, 1.0);
        let b: Vec<f64> = random::<f64>(Dims::new(spec.out_channels, 1, 1, 1), seed ^ 2, 1.0).into_data();
        let bias = spec.has_bias.then_some(b.as_slice());
        let fast = conv2d(&x, &w, bias, &spec).unwrap();
        let slow = naive_conv(&x, &w, bias, &spec);
        prop_assert_eq!(fast.dims(), slow.dims());
        prop_assert_eq!(fast.dims(), spec.output_dims(d).unwrap());
        prop_assert!(rel_diff(&fast, &slow) <= 1e-5);
        // single precision against the same oracle
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let f32_out = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), spec.has_bias.then_some(b32.as_slice()), &spec);
        let f32_out = f32_out.unwrap().cast::<f64>();
        prop_assert!(f32_out.max_abs_diff(&slow) <= 1e-4 * (1.0 + slow.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn resize_exact_on_constants(c in -10.0f32..10.0, h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20, eq7 in any::<bool>()) {
        let conv = if eq7 { ResizeConvention::Eq7Origin } else { ResizeConvention::HalfPixel };
        let x = Tensor::<f32>::filled(Dims::new(1, 2, h, w), c);
        let y = bilinear_resize(&x, oh, ow, conv).unwrap();
        prop_assert!(y.data().iter().all(|&v| v == c));
        let z = random::<f32>(Dims::new(1, 2, h, w), (h * 31 + w) as u64, 1.0);
        prop_assert!(bilinear_resize(&z, h, w, conv).unwrap().bitwise_eq(&z));
    }

    #[test]
    fn grid_sample_identity_and_constant_fixed_points(h in 1usize..8, w in 1usize..8, c in -3.0f32..3.0, seed in any::<u64>()) {
        let x = random::<f32>(Dims::new(2, 3, h, w), seed, 2.0);
        prop_assert!(grid_sample(&x, &SampleGrid::identity(2, h, w)).unwrap().bitwise_eq(&x));
        let k = Tensor::<f32>::filled(Dims::new(1, 2, h, w), c);
        let g = random::<f32>(Dims::new(1, 2, 5, 6), seed ^ 7, 20.0);
        let y = grid_sample(&k, &SampleGrid::new(g).unwrap()).unwrap();
        prop_assert!(y.data().iter().all(|&v| v == c));
    }

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), c in 1usize..12) {
        let x = random::<f32>(Dims::new(2, c, 3, 4), seed, 50.0);
        let y = softmax_channels(&x);
        let d = y.dims();
        for n in 0..d.n {
            for i in 0..d.h {
                for j in 0..d.w {
                    let s: f64 = (0..c).map(|k| f64::from(y.at(n, k, i, j))).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}
