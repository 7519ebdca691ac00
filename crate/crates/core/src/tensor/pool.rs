use super::{Dims, Element, Tensor};
use crate::error::Result;

/// Output of the 3×3 / stride 2 / pad 1 max-pool plus the flat input index
/// that won each window.
#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T: Element> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

const K: usize = 3;
const S: usize = 2;
const P: usize = 1;

/// 3×3 window, stride 2, padding 1 with -inf padding. Ties break to the first
/// maximal element in row-major order.
pub fn max_pool2d<T: Element>(input: &Tensor<T>) -> Result<MaxPoolOutput<T>> {
    let d = input.dims();
    let oh = (d.h + 2 * P - K) / S + 1;
    let ow = (d.w + 2 * P - K) / S + 1;
    let od = Dims::new(d.n, d.c, oh, ow);
    let mut out = Vec::with_capacity(od.len());
    let mut argmax = Vec::with_capacity(od.len());
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        let plane = &input.data()[base..base + d.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..K {
                    let iy = (oy * S + ky) as isize - P as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = (ox * S + kx) as isize - P as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let i = iy as usize * d.w + ix as usize;
                        if best_i == usize::MAX || plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push((base + best_i) as u32);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::from_vec(od, out)?,
        argmax,
    })
}

pub fn max_pool2d_backward<T: Element>(input_dims: Dims, argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_dims);
    let data = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        data[i as usize] = data[i as usize] + v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_halves_resolution() {
        let x = Tensor::<f32>::filled(Dims::new(1, 2, 6, 6), 1.5);
        let y = max_pool2d(&x).unwrap().output;
        assert_eq!(y.dims(), Dims::new(1, 2, 3, 3));
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn ramp_window_max() {
        let x = Tensor::<f32>::from_fn(Dims::new(1, 1, 4, 4), |[_, _, y, x]| (y * 4 + x) as f32);
        let y = max_pool2d(&x).unwrap().output;
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn single_pixel() {
        let x = Tensor::<f32>::scalar(-3.0);
        let y = max_pool2d(&x).unwrap().output;
        assert_eq!(y.data(), &[-3.0]);
    }

    #[test]
    fn ties_route_gradient_to_first_max() {
        let x = Tensor::<f32>::filled(Dims::new(1, 1, 2, 2), 1.0);
        let out = max_pool2d(&x).unwrap();
        assert_eq!(out.argmax, vec![0]);
        let g = max_pool2d_backward(x.dims(), &out.argmax, &Tensor::scalar(2.0));
        assert_eq!(g.data(), &[2.0, 0.0, 0.0, 0.0]);
    }
}
