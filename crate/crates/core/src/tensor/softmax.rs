use super::{Element, Tensor};
use crate::error::{Error, Result};

fn per_pixel<T: Element>(input: &Tensor<T>, f: impl Fn(&[T], &mut [T])) -> Tensor<T> {
    let d = input.dims();
    let p = d.plane();
    let mut out = input.clone();
    let mut col = vec![T::zero(); d.c];
    let mut res = vec![T::zero(); d.c];
    for n in 0..d.n {
        for i in 0..p {
            for c in 0..d.c {
                col[c] = input.data()[(n * d.c + c) * p + i];
            }
            f(&col, &mut res);
            for c in 0..d.c {
                out.data_mut()[(n * d.c + c) * p + i] = res[c];
            }
        }
    }
    out
}

fn softmax_into<T: Element>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z = z + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / z);
}

fn log_softmax_into<T: Element>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Softmax across the channel axis of every pixel.
pub fn softmax_channels<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    per_pixel(input, softmax_into)
}

pub fn log_softmax_channels<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    per_pixel(input, log_softmax_into)
}

/// Softmax across a stack of equally shaped maps (the scale axis).
pub fn softmax_stack<T: Element>(stack: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let first = stack
        .first()
        .ok_or_else(|| Error::Config("softmax_stack: empty stack".into()))?;
    for t in stack {
        t.expect_dims("softmax_stack", first.dims())?;
    }
    let k = stack.len();
    let mut outs: Vec<Tensor<T>> = stack.iter().map(|t| Tensor::zeros(t.dims())).collect();
    let mut col = vec![T::zero(); k];
    let mut res = vec![T::zero(); k];
    for i in 0..first.len() {
        for (s, t) in stack.iter().enumerate() {
            col[s] = t.data()[i];
        }
        softmax_into(&col, &mut res);
        for (s, o) in outs.iter_mut().enumerate() {
            o.data_mut()[i] = res[s];
        }
    }
    Ok(outs)
}

/// Per-pixel argmax over channels, ties to the lowest index; `n·h·w` ids.
pub fn argmax_channels<T: Element>(input: &Tensor<T>) -> Vec<usize> {
    let d = input.dims();
    let p = d.plane();
    let mut out = Vec::with_capacity(d.n * p);
    for n in 0..d.n {
        for i in 0..p {
            let mut best = 0;
            let mut best_v = input.data()[(n * d.c) * p + i];
            for c in 1..d.c {
                let v = input.data()[(n * d.c + c) * p + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}
