//! Pixel-wise fusion of per-scale score maps.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{check_same, softmax_stack, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FusionMode {
    /// Weighted by per-pixel attention over scales.
    #[default]
    Attention,
    Average,
    Max,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "average" => Ok(FusionMode::Average),
            "max" => Ok(FusionMode::Max),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Attention => "attention",
            FusionMode::Average => "average",
            FusionMode::Max => "max",
        })
    }
}

/// What the adjoint of [`fuse_forward`] needs.
#[derive(Debug, Clone)]
pub enum FuseState<T: Element> {
    /// Per-scale pixel weights actually applied (softmaxed or raw).
    Weighted(Vec<Tensor<T>>),
    Average(usize),
    /// Index of the winning scale per output element.
    Max(Vec<u8>),
}

fn validate<T: Element>(scores: &[&Tensor<T>], logits: &[&Tensor<T>], mode: FusionMode) -> Result<()> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Config("fusion needs at least one score map".into()))?;
    for s in scores {
        check_same("fuse", first.dims(), s.dims())?;
    }
    if mode == FusionMode::Attention {
        if logits.len() != scores.len() {
            return Err(Error::dim("fuse", "scales", scores.len(), logits.len()));
        }
        for z in logits {
            check_same("fuse", first.dims().with_c(1), z.dims())?;
        }
    }
    Ok(())
}

/// Fuses any number of aligned score maps. `logits` are ignored outside
/// attention mode; `normalize` selects softmax over scales versus raw weights.
pub fn fuse_forward<T: Element>(
    scores: &[&Tensor<T>],
    logits: &[&Tensor<T>],
    mode: FusionMode,
    normalize: bool,
) -> Result<(Tensor<T>, FuseState<T>)> {
    validate(scores, logits, mode)?;
    let d = scores[0].dims();
    let p = d.plane();
    match mode {
        FusionMode::Attention => {
            let weights = if normalize {
                softmax_stack(logits)?
            } else {
                logits.iter().map(|&z| z.clone()).collect()
            };
            let mut out = Tensor::zeros(d);
            for (s, w) in scores.iter().zip(&weights) {
                let o = out.data_mut();
                for (i, &v) in s.data().iter().enumerate() {
                    let (n, px) = (i / (d.c * p), i % p);
                    o[i] = o[i] + v * w.data()[n * p + px];
                }
            }
            Ok((out, FuseState::Weighted(weights)))
        }
        FusionMode::Average => {
            let k = T::from_usize(scores.len()).unwrap();
            let mut out = Tensor::zeros(d);
            for s in scores {
                out.accumulate(s);
            }
            let out = out.map(|v| v / k);
            Ok((out, FuseState::Average(scores.len())))
        }
        FusionMode::Max => {
            let mut out = scores[0].clone();
            let mut arg = vec![0u8; d.len()];
            for (k, s) in scores.iter().enumerate().skip(1) {
                for (i, &v) in s.data().iter().enumerate() {
                    if v > out.data()[i] {
                        out.data_mut()[i] = v;
                        arg[i] = k as u8;
                    }
                }
            }
            Ok((out, FuseState::Max(arg)))
        }
    }
}

/// Returns `(d scores, d logits)`; `d logits` is empty outside attention mode.
pub fn fuse_backward<T: Element>(
    scores: &[&Tensor<T>],
    state: &FuseState<T>,
    normalize: bool,
    grad_out: &Tensor<T>,
) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
    let d = scores[0].dims();
    let p = d.plane();
    match state {
        FuseState::Weighted(weights) => {
            let mut gs = Vec::with_capacity(scores.len());
            let mut gw = Vec::with_capacity(scores.len());
            for (s, w) in scores.iter().zip(weights) {
                let mut g = grad_out.clone();
                let mut dw = Tensor::zeros(w.dims());
                for (i, gv) in g.data_mut().iter_mut().enumerate() {
                    let k = (i / (d.c * p)) * p + i % p;
                    dw.data_mut()[k] = dw.data()[k] + *gv * s.data()[i];
                    *gv = *gv * w.data()[k];
                }
                gs.push(g);
                gw.push(dw);
            }
            if normalize {
                // softmax adjoint: w_n (dw_n - sum_m w_m dw_m)
                let mut dot = vec![T::zero(); weights[0].len()];
                for (w, g) in weights.iter().zip(&gw) {
                    for (k, acc) in dot.iter_mut().enumerate() {
                        *acc = *acc + w.data()[k] * g.data()[k];
                    }
                }
                for (w, g) in weights.iter().zip(gw.iter_mut()) {
                    for (k, v) in g.data_mut().iter_mut().enumerate() {
                        *v = w.data()[k] * (*v - dot[k]);
                    }
                }
            }
            (gs, gw)
        }
        FuseState::Average(k) => {
            let kf = T::from_usize(*k).unwrap();
            let g = grad_out.map(|v| v / kf);
            (vec![g; *k], Vec::new())
        }
        FuseState::Max(arg) => {
            let mut gs = vec![Tensor::zeros(d); scores.len()];
            for (i, &a) in arg.iter().enumerate() {
                gs[a as usize].data_mut()[i] = grad_out.data()[i];
            }
            (gs, Vec::new())
        }
    }
}

/// Fusion of exactly four scales.
pub fn fuse<T: Element>(scores: &[&Tensor<T>], logits: &[&Tensor<T>], mode: FusionMode) -> Result<Tensor<T>> {
    if scores.len() != 4 {
        return Err(Error::dim("fuse", "scales", 4, scores.len()));
    }
    if mode == FusionMode::Attention && logits.len() != 4 {
        return Err(Error::dim("fuse", "scales", 4, logits.len()));
    }
    fuse_forward(scores, logits, mode, true).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn two_scale_hand_case() {
        let d = Dims::new(1, 1, 1, 1);
        let s = [Tensor::<f64>::scalar(1.0), Tensor::scalar(3.0)];
        // softmax([0, ln 3]) = [0.25, 0.75]
        let z = [Tensor::<f64>::scalar(0.0), Tensor::scalar(3f64.ln())];
        let (out, _) = fuse_forward(&[&s[0], &s[1]], &[&z[0], &z[1]], FusionMode::Attention, true).unwrap();
        assert_eq!(out.dims(), d);
        assert!((out.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn wrong_scale_count_is_rejected() {
        let s = Tensor::<f32>::zeros(Dims::new(1, 2, 2, 2));
        let z = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2));
        assert!(matches!(
            fuse(&[&s, &s, &s], &[&z, &z, &z], FusionMode::Attention),
            Err(Error::Dimension { axis: "scales", .. })
        ));
    }

    #[test]
    fn max_mode_takes_first_on_ties() {
        let a = Tensor::<f32>::filled(Dims::new(1, 1, 1, 2), 1.0);
        let b = Tensor::from_vec(Dims::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let (out, state) = fuse_forward(&[&a, &b], &[], FusionMode::Max, true).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
        match state {
            FuseState::Max(arg) => assert_eq!(arg, vec![0, 1]),
            _ => unreachable!(),
        }
    }
}
