use super::{Dims, Element, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T: Element = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Element> BnParams<T> {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(BN_EPS),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if !(self.eps > T::zero()) {
            return Err(Error::Config(format!(
                "batch_norm eps must be positive, got {:?}",
                self.eps
            )));
        }
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != channels {
                return Err(Error::dim("batch_norm", name, channels, v.len()));
            }
        }
        Ok(())
    }

    /// Exponential moving update with the unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        let count = T::from_usize(stats.count).unwrap();
        let unbias = if stats.count > 1 {
            count / (count - T::one())
        } else {
            T::one()
        };
        for c in 0..self.gamma.len() {
            self.running_mean[c] = keep * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }
}

/// Batch statistics over `(n, h, w)`; `var` is the biased estimate used for
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Element> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn for_each_channel<T: Element>(d: Dims, data: &[T], mut f: impl FnMut(usize, &[T])) {
    let p = d.plane();
    for n in 0..d.n {
        for c in 0..d.c {
            let start = (n * d.c + c) * p;
            f(c, &data[start..start + p]);
        }
    }
}

/// Inference-mode normalization with running statistics.
pub fn batch_norm_eval<T: Element>(input: &Tensor<T>, p: &BnParams<T>) -> Result<Tensor<T>> {
    let d = input.dims();
    p.validate(d.c)?;
    let inv: Vec<T> = p.running_var.iter().map(|&v| (v + p.eps).sqrt().recip()).collect();
    let mut out = input.clone();
    let plane = d.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % d.c;
        let (mu, g, b) = (p.running_mean[c], p.gamma[c] * inv[c], p.beta[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - mu) * g + b);
    }
    Ok(out)
}

pub fn batch_stats<T: Element>(input: &Tensor<T>) -> BatchStats<T> {
    let d = input.dims();
    let count = d.n * d.plane();
    let nf = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); d.c];
    for_each_channel(d, input.data(), |c, plane| {
        mean[c] = mean[c] + plane.iter().copied().sum::<T>();
    });
    mean.iter_mut().for_each(|m| *m = *m / nf);
    let mut var = vec![T::zero(); d.c];
    for_each_channel(d, input.data(), |c, plane| {
        let mu = mean[c];
        var[c] = var[c] + plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
    });
    var.iter_mut().for_each(|v| *v = *v / nf);
    BatchStats { mean, var, count }
}

/// Training-mode normalization with batch statistics. Returns the output and
/// the statistics; running stats are not modified here.
pub fn batch_norm_train<T: Element>(input: &Tensor<T>, p: &BnParams<T>) -> Result<(Tensor<T>, BatchStats<T>)> {
    let d = input.dims();
    p.validate(d.c)?;
    let stats = batch_stats(input);
    let mut out = input.clone();
    let plane = d.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % d.c;
        let inv = (stats.var[c] + p.eps).sqrt().recip();
        let (mu, g, b) = (stats.mean[c], p.gamma[c], p.beta[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - mu) * inv * g + b);
    }
    Ok((out, stats))
}

/// Normalization dispatch; training mode also updates the running statistics.
pub fn batch_norm<T: Element>(input: &Tensor<T>, p: &mut BnParams<T>, training: bool) -> Result<Tensor<T>> {
    if training {
        let (out, stats) = batch_norm_train(input, p)?;
        p.update_running(&stats);
        Ok(out)
    } else {
        batch_norm_eval(input, p)
    }
}

#[derive(Debug, Clone)]
pub struct BnGrads<T: Element> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn affine_grads<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>, mean: &[T], inv: &[T]) -> (Vec<T>, Vec<T>) {
    let d = input.dims();
    let plane = d.plane();
    let mut gg = vec![T::zero(); d.c];
    let mut gb = vec![T::zero(); d.c];
    for (i, (x, g)) in input
        .data()
        .chunks(plane)
        .zip(grad_out.data().chunks(plane))
        .enumerate()
    {
        let c = i % d.c;
        for (&xv, &gv) in x.iter().zip(g) {
            gg[c] = gg[c] + gv * (xv - mean[c]) * inv[c];
            gb[c] = gb[c] + gv;
        }
    }
    (gg, gb)
}

pub fn batch_norm_backward_eval<T: Element>(
    input: &Tensor<T>,
    p: &BnParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let d = input.dims();
    p.validate(d.c)?;
    grad_out.expect_dims("batch_norm_backward", d)?;
    let inv: Vec<T> = p.running_var.iter().map(|&v| (v + p.eps).sqrt().recip()).collect();
    let (gamma, beta) = affine_grads(input, grad_out, &p.running_mean, &inv);
    let mut gin = grad_out.clone();
    for (i, chunk) in gin.data_mut().chunks_mut(d.plane()).enumerate() {
        let c = i % d.c;
        let s = p.gamma[c] * inv[c];
        chunk.iter_mut().for_each(|v| *v = *v * s);
    }
    Ok(BnGrads {
        input: gin,
        gamma,
        beta,
    })
}

pub fn batch_norm_backward_train<T: Element>(
    input: &Tensor<T>,
    p: &BnParams<T>,
    stats: &BatchStats<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let d = input.dims();
    p.validate(d.c)?;
    grad_out.expect_dims("batch_norm_backward", d)?;
    let inv: Vec<T> = stats.var.iter().map(|&v| (v + p.eps).sqrt().recip()).collect();
    let (gamma, beta) = affine_grads(input, grad_out, &stats.mean, &inv);
    let m = T::from_usize(stats.count).unwrap();
    let mut gin = grad_out.clone();
    let plane = d.plane();
    for (i, (g, x)) in gin
        .data_mut()
        .chunks_mut(plane)
        .zip(input.data().chunks(plane))
        .enumerate()
    {
        let c = i % d.c;
        let k = p.gamma[c] * inv[c] / m;
        let (sum_g, sum_gx) = (beta[c], gamma[c]);
        for (gv, &xv) in g.iter_mut().zip(x) {
            let xhat = (xv - stats.mean[c]) * inv[c];
            *gv = k * (m * *gv - sum_g - xhat * sum_gx);
        }
    }
    Ok(BnGrads {
        input: gin,
        gamma,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(Dims::new(2, 3, 4, 4), |_| rng.gen_range(-2.0..2.0));
        let mut p = BnParams::identity(3);
        p.eps = 1e-12;
        let y = batch_norm_eval(&x, &p).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn constant_input_training_gives_beta() {
        let x = Tensor::<f32>::filled(Dims::new(2, 2, 3, 3), 4.5);
        let mut p = BnParams::identity(2);
        p.beta = vec![0.25, -1.0];
        let y = batch_norm(&x, &mut p, true).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.0));
        }
        // momentum 0.1 toward the batch mean 4.5
        assert!((p.running_mean[0] - 0.45).abs() < 1e-6);
    }

    #[test]
    fn inference_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::from_fn(Dims::new(2, 3, 4, 4), |_| rng.gen_range(-3.0..3.0));
        let mut p = BnParams::<f32>::identity(3);
        for c in 0..3 {
            p.gamma[c] = rng.gen_range(0.5..1.5);
            p.beta[c] = rng.gen_range(-0.5..0.5);
            p.running_mean[c] = rng.gen_range(-1.0..1.0);
            p.running_var[c] = rng.gen_range(0.1..2.0);
        }
        let y = batch_norm_eval(&x, &p).unwrap();
        let d = x.dims();
        for n in 0..d.n {
            for c in 0..d.c {
                for i in 0..d.h {
                    for j in 0..d.w {
                        let xv = x.at(n, c, i, j) as f64;
                        let expect = (xv - p.running_mean[c] as f64) * p.gamma[c] as f64
                            / (p.running_var[c] as f64 + 1e-5).sqrt()
                            + p.beta[c] as f64;
                        assert!((y.at(n, c, i, j) as f64 - expect).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2));
        let mut p = BnParams::identity(1);
        p.eps = 0.0;
        assert!(matches!(batch_norm_eval(&x, &p), Err(Error::Config(_))));
        p.eps = 1e-5;
        p.gamma.push(1.0);
        assert!(matches!(batch_norm_eval(&x, &p), Err(Error::Dimension { .. })));
    }
}
