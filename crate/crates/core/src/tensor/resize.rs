use std::str::FromStr;

use super::{Dims, Element, Tensor};
use crate::error::{Error, Result};

/// Coordinate mapping from output pixel `o` to input coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ResizeConvention {
    /// `(o + 0.5) * in / out - 0.5`
    #[default]
    HalfPixel,
    /// `o * in / out`, the zero-offset case of the warp grid.
    Eq7Origin,
}

impl FromStr for ResizeConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half_pixel" => Ok(ResizeConvention::HalfPixel),
            "eq7_origin" => Ok(ResizeConvention::Eq7Origin),
            other => Err(Error::Config(format!("unknown resize convention `{other}`"))),
        }
    }
}

impl std::fmt::Display for ResizeConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResizeConvention::HalfPixel => "half_pixel",
            ResizeConvention::Eq7Origin => "eq7_origin",
        })
    }
}

/// `a + (b - a) * f`, returning `a` untouched when `f == 0`.
#[inline]
pub fn lerp<T: Element>(a: T, b: T, f: T) -> T {
    if f == T::zero() {
        a
    } else {
        a + (b - a) * f
    }
}

/// Per-axis interpolation taps: `(i0, i1, frac)` for every output index.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisPlan<T: Element> {
    pub taps: Vec<(usize, usize, T)>,
}

impl<T: Element> AxisPlan<T> {
    pub fn new(input: usize, output: usize, convention: ResizeConvention) -> Self {
        let scale = input as f64 / output as f64;
        let hi = (input - 1) as f64;
        let taps = (0..output)
            .map(|o| {
                let src = match convention {
                    ResizeConvention::HalfPixel => (o as f64 + 0.5) * scale - 0.5,
                    ResizeConvention::Eq7Origin => o as f64 * scale,
                };
                tap(src.clamp(0.0, hi), input)
            })
            .collect();
        AxisPlan { taps }
    }
}

/// Taps of an in-range coordinate.
#[inline]
pub(crate) fn tap<T: Element>(src: f64, len: usize) -> (usize, usize, T) {
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let f = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, T::from_f64_lossy(f))
}

pub fn bilinear_resize<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    convention: ResizeConvention,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resize target {out_h}x{out_w} must be >= 1")));
    }
    let d = input.dims();
    let rows = AxisPlan::<T>::new(d.h, out_h, convention);
    let cols = AxisPlan::<T>::new(d.w, out_w, convention);
    let od = d.with_hw(out_h, out_w);
    let mut out = Vec::with_capacity(od.len());
    for nc in 0..d.n * d.c {
        let plane = &input.data()[nc * d.plane()..(nc + 1) * d.plane()];
        for &(y0, y1, fy) in &rows.taps {
            let r0 = &plane[y0 * d.w..(y0 + 1) * d.w];
            let r1 = &plane[y1 * d.w..(y1 + 1) * d.w];
            for &(x0, x1, fx) in &cols.taps {
                let top = lerp(r0[x0], r0[x1], fx);
                let bot = lerp(r1[x0], r1[x1], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    Tensor::from_vec(od, out)
}

pub fn bilinear_resize_backward<T: Element>(
    input_dims: Dims,
    grad_out: &Tensor<T>,
    convention: ResizeConvention,
) -> Tensor<T> {
    let od = grad_out.dims();
    let rows = AxisPlan::<T>::new(input_dims.h, od.h, convention);
    let cols = AxisPlan::<T>::new(input_dims.w, od.w, convention);
    let mut g = Tensor::zeros(input_dims);
    let w = input_dims.w;
    let ip = input_dims.plane();
    let one = T::one();
    for nc in 0..od.n * od.c {
        let go = &grad_out.data()[nc * od.plane()..(nc + 1) * od.plane()];
        let gi = &mut g.data_mut()[nc * ip..(nc + 1) * ip];
        let mut k = 0;
        for &(y0, y1, fy) in &rows.taps {
            for &(x0, x1, fx) in &cols.taps {
                let v = go[k];
                k += 1;
                gi[y0 * w + x0] = gi[y0 * w + x0] + v * (one - fx) * (one - fy);
                if fx != T::zero() {
                    gi[y0 * w + x1] = gi[y0 * w + x1] + v * fx * (one - fy);
                }
                if fy != T::zero() {
                    gi[y1 * w + x0] = gi[y1 * w + x0] + v * (one - fx) * fy;
                    if fx != T::zero() {
                        gi[y1 * w + x1] = gi[y1 * w + x1] + v * fx * fy;
                    }
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_size_is_identity_under_both_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::from_fn(Dims::new(1, 2, 5, 7), |_| rng.gen_range(-1.0..1.0));
        for conv in [ResizeConvention::HalfPixel, ResizeConvention::Eq7Origin] {
            assert_eq!(bilinear_resize(&x, 5, 7, conv).unwrap(), x);
        }
    }

    #[test]
    fn constants_survive_any_size() {
        let x = Tensor::<f32>::filled(Dims::new(1, 1, 3, 5), 0.3);
        for conv in [ResizeConvention::HalfPixel, ResizeConvention::Eq7Origin] {
            for (h, w) in [(1, 1), (7, 2), (12, 20)] {
                let y = bilinear_resize(&x, h, w, conv).unwrap();
                assert!(y.data().iter().all(|&v| v == 0.3));
            }
        }
    }

    #[test]
    fn upsample_2x2_half_pixel_per_pixel_oracle() {
        let x = Tensor::<f64>::from_vec(Dims::new(1, 1, 2, 2), vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4, ResizeConvention::HalfPixel).unwrap();
        // (o + 0.5) / 2 - 0.5 -> [-0.25, 0.25, 0.75, 1.25] clamped to [0, 1]
        let coord = |o: usize| ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for oy in 0..4 {
            for ox in 0..4 {
                let (sy, sx) = (coord(oy), coord(ox));
                let v = |yy: usize, xx: usize| x.at(0, 0, yy, xx);
                let expect =
                    (1.0 - sy) * ((1.0 - sx) * v(0, 0) + sx * v(0, 1)) + sy * ((1.0 - sx) * v(1, 0) + sx * v(1, 1));
                assert!((y.at(0, 0, oy, ox) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(y.plane(0, 0)[..4], [0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn unknown_convention_is_config_error() {
        assert!(matches!(
            "align_corners".parse::<ResizeConvention>(),
            Err(Error::Config(_))
        ));
        assert_eq!(
            "eq7_origin".parse::<ResizeConvention>().unwrap(),
            ResizeConvention::Eq7Origin
        );
    }
}
