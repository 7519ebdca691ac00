use rayon::prelude::*;

use super::{Dims, Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
            dilation: (1, 1),
            has_bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    /// Sets dilation and the padding that keeps a 3×3 kernel shape-preserving.
    pub fn dilated(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self.padding = ((self.kernel.0 / 2) * d, (self.kernel.1 / 2) * d);
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn weight_len(&self) -> usize {
        self.weight_dims().len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels >= 1
            && self.out_channels >= 1
            && self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.dilation.0 >= 1
            && self.dilation.1 >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid conv spec {self:?}")))
        }
    }

    /// `floor((h + 2p - d(k-1) - 1) / s) + 1` per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize, name: &'static str| {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            if padded < span {
                return Err(Error::dim("conv2d", name, span, padded));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            axis(
                h,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
                "height",
            )?,
            axis(
                w,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
                "width",
            )?,
        ))
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        if input.c != self.in_channels {
            return Err(Error::dim("conv2d", "channels", self.in_channels, input.c));
        }
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Dims::new(input.n, self.out_channels, h, w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

fn check_args<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, spec: &ConvSpec) -> Result<Dims> {
    spec.validate()?;
    let wd = weight.dims();
    let expect = spec.weight_dims();
    if wd.n != expect.n {
        return Err(Error::dim("conv2d", "weight out_channels", expect.n, wd.n));
    }
    if wd.c != expect.c {
        return Err(Error::dim("conv2d", "weight in_channels", expect.c, wd.c));
    }
    if wd.h != expect.h {
        return Err(Error::dim("conv2d", "kernel height", expect.h, wd.h));
    }
    if wd.w != expect.w {
        return Err(Error::dim("conv2d", "kernel width", expect.w, wd.w));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::dim("conv2d", "bias", spec.out_channels, b.len()));
        }
    }
    spec.output_dims(input.dims())
}

/// Unfolds one `(c, h, w)` sample into a `(c·kh·kw) × (oh·ow)` matrix.
fn im2col<T: Element>(x: &[T], h: usize, w: usize, oh: usize, ow: usize, spec: &ConvSpec, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let p = oh * ow;
    for ci in 0..spec.in_channels {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + kj * dw) as isize - pw as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the sample.
fn col2im<T: Element>(cols: &[T], h: usize, w: usize, oh: usize, ow: usize, spec: &ConvSpec, x: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let p = oh * ow;
    for ci in 0..spec.in_channels {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kj * dw) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, stride and dilation.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let od = check_args(input, weight, bias, spec)?;
    let id = input.dims();
    let k = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let p = od.h * od.w;
    let cout = spec.out_channels;
    let mut out = vec![T::zero(); od.len()];
    let wdata = weight.data();
    out.par_chunks_mut(cout * p).enumerate().for_each(|(n, dst)| {
        let x = input.sample(n);
        let scratch;
        let cols: &[T] = if spec.is_pointwise() {
            x
        } else {
            let mut buf = vec![T::zero(); k * p];
            im2col(x, id.h, id.w, od.h, od.w, spec, &mut buf);
            scratch = buf;
            &scratch
        };
        T::gemm(
            cout,
            k,
            p,
            T::one(),
            wdata,
            k as isize,
            1,
            cols,
            p as isize,
            1,
            T::zero(),
            dst,
            p as isize,
            1,
        );
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                let bv = b[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    });
    Tensor::from_vec(od, out)
}

/// Gradients of [`conv2d`] with respect to its three arguments.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let od = check_args(input, weight, None, spec)?;
    grad_out.expect_dims("conv2d_backward", od)?;
    let id = input.dims();
    let k = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let p = od.h * od.w;
    let cout = spec.out_channels;
    let wdata = weight.data();

    // Input gradient: per-sample independent.
    let mut gin = vec![T::zero(); id.len()];
    gin.par_chunks_mut(id.sample()).enumerate().for_each(|(n, gx)| {
        let go = grad_out.sample(n);
        if spec.is_pointwise() {
            T::gemm(
                k,
                cout,
                p,
                T::one(),
                wdata,
                1,
                k as isize,
                go,
                p as isize,
                1,
                T::zero(),
                gx,
                p as isize,
                1,
            );
        } else {
            let mut cols = vec![T::zero(); k * p];
            T::gemm(
                k,
                cout,
                p,
                T::one(),
                wdata,
                1,
                k as isize,
                go,
                p as isize,
                1,
                T::zero(),
                &mut cols,
                p as isize,
                1,
            );
            col2im(&cols, id.h, id.w, od.h, od.w, spec, gx);
        }
    });

    // Weight gradient: accumulated over the batch in sample order.
    let mut gw = vec![T::zero(); cout * k];
    let mut scratch = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..id.n {
        let x = input.sample(n);
        let cols: &[T] = if spec.is_pointwise() {
            x
        } else {
            im2col(x, id.h, id.w, od.h, od.w, spec, &mut scratch);
            &scratch
        };
        let go = grad_out.sample(n);
        T::gemm(
            cout,
            p,
            k,
            T::one(),
            go,
            p as isize,
            1,
            cols,
            1,
            p as isize,
            T::one(),
            &mut gw,
            k as isize,
            1,
        );
    }

    let gb = spec.has_bias.then(|| {
        let mut gb = vec![T::zero(); cout];
        for n in 0..id.n {
            for (co, row) in grad_out.sample(n).chunks(p).enumerate() {
                gb[co] = gb[co] + row.iter().copied().sum::<T>();
            }
        }
        gb
    });

    Ok(ConvGrads {
        input: Tensor::from_vec(id, gin)?,
        weight: Tensor::from_vec(weight.dims(), gw)?,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop cross-correlation.
    fn naive(input: &Tensor<f64>, weight: &Tensor<f64>, bias: Option<&[f64]>, s: &ConvSpec) -> Tensor<f64> {
        let id = input.dims();
        let (oh, ow) = s.output_hw(id.h, id.w).unwrap();
        let od = Dims::new(id.n, s.out_channels, oh, ow);
        Tensor::from_fn(od, |[n, co, oy, ox]| {
            let mut acc = bias.map_or(0.0, |b| b[co]);
            for ci in 0..s.in_channels {
                for ki in 0..s.kernel.0 {
                    for kj in 0..s.kernel.1 {
                        let iy = (oy * s.stride.0 + ki * s.dilation.0) as isize - s.padding.0 as isize;
                        let ix = (ox * s.stride.1 + kj * s.dilation.1) as isize - s.padding.1 as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < id.h && (ix as usize) < id.w {
                            acc += input.at(n, ci, iy as usize, ix as usize) * weight.at(co, ci, ki, kj);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::<f32>::scalar(2.0);
        let w = Tensor::<f32>::scalar(3.0);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Dims::new(2, 1, 5, 6), &mut rng);
        let w = Tensor::from_fn(
            Dims::new(1, 1, 3, 3),
            |[_, _, y, x]| if y == 1 && x == 1 { 1.0 } else { 0.0 },
        );
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_dilated_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: (3, 3),
            stride: (2, 2),
            padding: (2, 2),
            dilation: (2, 2),
            has_bias: true,
        };
        let x = random(Dims::new(1, 2, 5, 5), &mut rng);
        let w = random(spec.weight_dims(), &mut rng);
        let b: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let oracle = naive(&x.cast(), &w.cast(), Some(&b64), &spec);
        assert_eq!(y.dims(), oracle.dims());
        for (a, o) in y.data().iter().zip(oracle.data()) {
            assert!((*a as f64 - o).abs() <= 1e-5 * o.abs().max(1.0));
        }
    }

    #[test]
    fn weight_shape_errors_name_the_axis() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Dims::new(3, 1, 3, 3));
        let err = conv2d(&x, &w, None, &ConvSpec::new(2, 3, 3)).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(Dims::new(3, 3, 3, 3)), None, &ConvSpec::new(3, 3, 3)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn output_formula_rejects_empty_output() {
        let spec = ConvSpec::new(1, 1, 5).padding(0);
        assert!(spec.output_hw(3, 3).is_err());
        assert_eq!(spec.output_hw(5, 7).unwrap(), (1, 3));
    }
}
