#![allow(dead_code)]

use mfaranet::tensor::{ConvSpec, Dims, Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<T: Element>(d: Dims, seed: u64, scale: f64) -> Tensor<T> {
    let mut r = rng(seed);
    Tensor::from_fn(d, |_| T::from_f64_lossy(r.gen_range(-scale..scale)))
}

/// Direct six-loop cross-correlation in f64.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, s: &ConvSpec) -> Tensor<f64> {
    let d = x.dims();
    let (oh, ow) = s.output_hw(d.h, d.w).unwrap();
    Tensor::from_fn(Dims::new(d.n, s.out_channels, oh, ow), |[n, o, y, xx]| {
        let mut acc = b.map_or(0.0, |b| b[o]);
        for c in 0..s.in_channels {
            for ky in 0..s.kernel.0 {
                for kx in 0..s.kernel.1 {
                    let iy = (y * s.stride.0 + ky * s.dilation.0) as isize - s.padding.0 as isize;
                    let ix = (xx * s.stride.1 + kx * s.dilation.1) as isize - s.padding.1 as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                        acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

pub fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
