use super::{Dims, Element, Tensor};
use crate::error::{Error, Result};

/// Channel concatenation, preserving part order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat_channels: no inputs".into()))?
        .dims();
    let mut channels = 0;
    for p in parts {
        let d = p.dims();
        if d.n != first.n {
            return Err(Error::dim("concat_channels", "batch", first.n, d.n));
        }
        if d.h != first.h {
            return Err(Error::dim("concat_channels", "height", first.h, d.h));
        }
        if d.w != first.w {
            return Err(Error::dim("concat_channels", "width", first.w, d.w));
        }
        channels += d.c;
    }
    let od = first.with_c(channels);
    let mut out = Vec::with_capacity(od.len());
    for n in 0..first.n {
        for p in parts {
            out.extend_from_slice(p.sample(n));
        }
    }
    Tensor::from_vec(od, out)
}

/// Inverse of [`concat_channels`]: splits along channels into the given widths.
pub fn split_channels<T: Element>(input: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let d = input.dims();
    let total: usize = widths.iter().sum();
    if total != d.c {
        return Err(Error::dim("split_channels", "channels", d.c, total));
    }
    let plane = d.plane();
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(d.n * c * plane)).collect();
    for n in 0..d.n {
        let sample = input.sample(n);
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&sample[start * plane..(start + c) * plane]);
            start += c;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &c)| Tensor::from_vec(Dims::new(d.n, c, d.h, d.w), data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(d: Dims, offset: f32) -> Tensor<f32> {
        let mut k = 0.0;
        Tensor::from_fn(d, |_| {
            k += 1.0;
            k + offset
        })
    }

    #[test]
    fn single_part_is_identity() {
        let x = ramp(Dims::new(2, 3, 2, 2), 0.0);
        assert_eq!(concat_channels(&[&x]).unwrap(), x);
    }

    #[test]
    fn order_preserved_and_split_round_trips() {
        let a = ramp(Dims::new(2, 2, 3, 3), 0.0);
        let b = ramp(Dims::new(2, 3, 3, 3), 100.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.dims().c, 5);
        assert_eq!(y.plane(1, 0), a.plane(1, 0));
        assert_eq!(y.plane(1, 2), b.plane(1, 0));
        let parts = split_channels(&y, &[2, 3]).unwrap();
        assert!(parts[0].bitwise_eq(&a) && parts[1].bitwise_eq(&b));
    }

    #[test]
    fn spatial_mismatch_errors() {
        let a = ramp(Dims::new(1, 1, 3, 3), 0.0);
        let b = ramp(Dims::new(1, 1, 3, 4), 0.0);
        assert!(concat_channels(&[&a, &b]).unwrap_err().to_string().contains("width"));
    }
}
