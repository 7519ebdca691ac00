//! Loss kernels of the joint supervision objective, with their adjoints.
//!
//! Every loss reduces to a scalar and records the per-pixel state its
//! adjoint needs. Selection masks (OHEM keep-set, boundary indicator) are
//! constants of the backward pass.

use crate::error::Result;
use crate::labels::Labels;
use crate::tensor::{check_same, log_softmax_channels, softmax_channels, Dims, Element, Tensor};

fn check_labels(op: &'static str, d: Dims, labels: &Labels) -> Result<()> {
    check_same(
        op,
        Dims::new(d.n, d.c, d.h, d.w),
        Dims::new(labels.batch(), d.c, labels.height(), labels.width()),
    )
}

fn check_class(id: u8, classes: usize, ignore: Option<u8>) -> Result<bool> {
    if Some(id) == ignore {
        return Ok(false);
    }
    if id as usize >= classes {
        return Err(crate::Error::Data(format!(
            "label id {id} out of range for {classes} classes"
        )));
    }
    Ok(true)
}

/// Per-pixel cross entropy `-log p(true class)`; `None` for ignored pixels.
pub fn pixel_ce<T: Element>(scores: &Tensor<T>, labels: &Labels, ignore: Option<u8>) -> Result<Vec<Option<T>>> {
    let d = scores.dims();
    check_labels("cross_entropy", d, labels)?;
    let logp = log_softmax_channels(scores);
    let p = d.plane();
    let mut out = Vec::with_capacity(d.n * p);
    for n in 0..d.n {
        for i in 0..p {
            let id = labels.data()[n * p + i];
            if check_class(id, d.c, ignore)? {
                out.push(Some(-logp.data()[(n * d.c + id as usize) * p + i]));
            } else {
                out.push(None);
            }
        }
    }
    Ok(out)
}

/// Weighted softmax-CE adjoint: `w_i * (softmax - onehot)` per pixel.
fn ce_grad<T: Element>(scores: &Tensor<T>, labels: &Labels, pixel_weight: &[T]) -> Tensor<T> {
    let d = scores.dims();
    let p = d.plane();
    let mut g = softmax_channels(scores);
    for n in 0..d.n {
        for i in 0..p {
            let w = pixel_weight[n * p + i];
            let id = labels.data()[n * p + i] as usize;
            for c in 0..d.c {
                let k = (n * d.c + c) * p + i;
                let onehot = if c == id { T::one() } else { T::zero() };
                g.data_mut()[k] = if w == T::zero() {
                    T::zero()
                } else {
                    w * (g.data()[k] - onehot)
                };
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemParams {
    /// Pixels whose true-class probability exceeds this are easy and dropped.
    pub thresh: f64,
    /// Minimum number of pixels kept (the hardest ones).
    pub min_kept: usize,
    pub ignore: Option<u8>,
}

/// Result of [`ce_ohem`]; `pixel_weight` is `1/kept` on kept pixels.
#[derive(Debug, Clone)]
pub struct OhemOutput<T: Element> {
    pub loss: T,
    pub kept: usize,
    pub valid: usize,
    /// Set when no pixel was valid; the loss is then zero.
    pub empty: bool,
    pub pixel_weight: Vec<T>,
}

/// Cross entropy restricted to hard pixels with a minimum-kept floor.
pub fn ce_ohem<T: Element>(scores: &Tensor<T>, labels: &Labels, params: &OhemParams) -> Result<OhemOutput<T>> {
    let ce = pixel_ce(scores, labels, params.ignore)?;
    let total = ce.len();
    let valid: Vec<usize> = (0..total).filter(|&i| ce[i].is_some()).collect();
    let mut pixel_weight = vec![T::zero(); total];
    if valid.is_empty() {
        return Ok(OhemOutput {
            loss: T::zero(),
            kept: 0,
            valid: 0,
            empty: true,
            pixel_weight,
        });
    }
    let thresh = T::from_f64_lossy(params.thresh);
    let mut kept: Vec<usize> = valid
        .iter()
        .copied()
        .filter(|&i| !((-ce[i].unwrap()).exp() > thresh))
        .collect();
    let floor = params.min_kept.max(1).min(valid.len());
    if kept.len() < floor {
        let mut order = valid.clone();
        // hardest first; index breaks ties
        order.sort_by(|&a, &b| {
            ce[b]
                .unwrap()
                .partial_cmp(&ce[a].unwrap())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(floor);
        order.sort_unstable();
        kept = order;
    }
    let count = T::from_usize(kept.len()).unwrap();
    let mut loss = T::zero();
    for &i in &kept {
        loss = loss + ce[i].unwrap();
        pixel_weight[i] = count.recip();
    }
    Ok(OhemOutput {
        loss: loss / count,
        kept: kept.len(),
        valid: valid.len(),
        empty: false,
        pixel_weight,
    })
}

pub fn ce_weighted_backward<T: Element>(scores: &Tensor<T>, labels: &Labels, pixel_weight: &[T], seed: T) -> Tensor<T> {
    let mut g = ce_grad(scores, labels, pixel_weight);
    if seed != T::one() {
        g.data_mut().iter_mut().for_each(|v| *v = *v * seed);
    }
    g
}

/// Class-balanced binary cross entropy on boundary logits.
#[derive(Debug, Clone)]
pub struct BceOutput<T: Element> {
    pub loss: T,
    /// Per-pixel weight divided by the pixel count.
    pub pixel_weight: Vec<T>,
    pub beta: T,
}

fn softplus<T: Element>(z: T) -> T {
    // log(1 + e^z), stable for large |z|
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        (T::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `target` is a `{0,1}` mask with the same dims as `logits` (one channel).
/// Positives carry weight `beta = |neg|/|total|`, negatives `1 - beta`; a
/// target without both classes falls back to unweighted BCE.
pub fn balanced_bce<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<BceOutput<T>> {
    logits.expect_dims("balanced_bce", target.dims())?;
    let total = logits.len();
    let pos = target.data().iter().filter(|&&y| y > T::from_f64_lossy(0.5)).count();
    let neg = total - pos;
    let nf = T::from_usize(total).unwrap();
    let (beta, wp, wn) = if pos == 0 || neg == 0 {
        (T::from_f64_lossy(0.5), T::one(), T::one())
    } else {
        let b = T::from_usize(neg).unwrap() / nf;
        (b, b, T::one() - b)
    };
    let mut loss = T::zero();
    let mut pixel_weight = Vec::with_capacity(total);
    for (&z, &y) in logits.data().iter().zip(target.data()) {
        let positive = y > T::from_f64_lossy(0.5);
        let w = if positive { wp } else { wn };
        // -y log s(z) - (1-y) log(1 - s(z))
        let l = if positive { softplus(-z) } else { softplus(z) };
        loss = loss + w * l;
        pixel_weight.push(w / nf);
    }
    Ok(BceOutput {
        loss: loss / nf,
        pixel_weight,
        beta,
    })
}

pub fn balanced_bce_backward<T: Element>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    out: &BceOutput<T>,
    seed: T,
) -> Tensor<T> {
    let data = logits
        .data()
        .iter()
        .zip(target.data())
        .zip(&out.pixel_weight)
        .map(|((&z, &y), &w)| seed * w * (sigmoid(z) - y))
        .collect();
    Tensor::from_vec(logits.dims(), data).expect("same dims")
}

/// Boundary-consistency regularizer: CE averaged over pixels whose boundary
/// probability exceeds `ths`.
#[derive(Debug, Clone)]
pub struct RegOutput<T: Element> {
    pub loss: T,
    pub masked: usize,
    pub pixel_weight: Vec<T>,
}

pub fn boundary_reg<T: Element>(
    scores: &Tensor<T>,
    boundary_logits: &Tensor<T>,
    labels: &Labels,
    ths: f64,
    ignore: Option<u8>,
) -> Result<RegOutput<T>> {
    let d = scores.dims();
    boundary_logits.expect_dims("boundary_reg", d.with_c(1))?;
    let ce = pixel_ce(scores, labels, ignore)?;
    let ths = T::from_f64_lossy(ths);
    let mask: Vec<bool> = boundary_logits
        .data()
        .iter()
        .zip(&ce)
        .map(|(&z, c)| c.is_some() && sigmoid(z) > ths)
        .collect();
    let masked = mask.iter().filter(|&&m| m).count();
    let mut pixel_weight = vec![T::zero(); ce.len()];
    if masked == 0 {
        return Ok(RegOutput {
            loss: T::zero(),
            masked,
            pixel_weight,
        });
    }
    let mf = T::from_usize(masked).unwrap();
    let mut loss = T::zero();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            loss = loss + ce[i].unwrap();
            pixel_weight[i] = mf.recip();
        }
    }
    Ok(RegOutput {
        loss: loss / mf,
        masked,
        pixel_weight,
    })
}
