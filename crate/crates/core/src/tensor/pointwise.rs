use super::{check_same, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Add,
    Mul,
    Scale,
}

/// Second operand of a pointwise op.
#[derive(Debug, Clone, Copy)]
pub enum PointwiseArg<'a, T: Element> {
    None,
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if !(xv > T::zero()) {
            *gv = T::zero();
        }
    }
    g
}

fn zip_with<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    check_same(op, a.dims(), b.dims())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.dims(), data)
}

pub fn pointwise<T: Element>(kind: Pointwise, a: &Tensor<T>, b: PointwiseArg<'_, T>) -> Result<Tensor<T>> {
    match (kind, b) {
        (Pointwise::Relu, PointwiseArg::None) => Ok(relu(a)),
        (Pointwise::Add, PointwiseArg::Tensor(b)) => zip_with(a, b, "add", |x, y| x + y),
        (Pointwise::Add, PointwiseArg::Scalar(s)) => Ok(a.map(|x| x + s)),
        (Pointwise::Mul, PointwiseArg::Tensor(b)) => zip_with(a, b, "mul", |x, y| x * y),
        (Pointwise::Mul | Pointwise::Scale, PointwiseArg::Scalar(s)) => Ok(a.map(|x| x * s)),
        (kind, _) => Err(Error::Config(format!("{kind:?}: unsupported operand combination"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::from_vec(Dims::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(
            pointwise(Pointwise::Relu, &x, PointwiseArg::None).unwrap().data(),
            &[0.0, 0.0, 2.0]
        );
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::<f32>::from_fn(Dims::new(1, 2, 3, 3), |[_, c, y, x]| (c * 9 + y * 3 + x) as f32 - 4.0);
        let z = Tensor::zeros(x.dims());
        assert_eq!(pointwise(Pointwise::Add, &x, PointwiseArg::Tensor(&z)).unwrap(), x);
    }

    #[test]
    fn mul_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dims::new(1, 2, 3, 3);
        let a = Tensor::<f32>::from_fn(d, |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(d, |_| rng.gen_range(-1.0..1.0));
        let y = pointwise(Pointwise::Mul, &a, PointwiseArg::Tensor(&b)).unwrap();
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(y.at(0, c, i, j), a.at(0, c, i, j) * b.at(0, c, i, j));
                }
            }
        }
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let a = Tensor::<f32>::zeros(Dims::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Dims::new(1, 2, 3, 4));
        let err = pointwise(Pointwise::Add, &a, PointwiseArg::Tensor(&b)).unwrap_err();
        assert!(err.to_string().contains("width"));
    }
}
