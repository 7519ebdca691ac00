use rand::Rng;

use crate::labels::Labels;
use crate::tensor::{bilinear_resize, Dims, Element, ResizeConvention, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Output `(h, w)`.
    pub crop: (usize, usize),
    pub ignore: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            scale_min: 0.5,
            scale_max: 2.0,
            crop: (96, 96),
            ignore: crate::labels::IGNORE_LABEL,
        }
    }
}

/// Random flip and scale drawn from `rng`, then [`augment_with`].
pub fn augment<T: Element, R: Rng>(
    image: &Tensor<T>,
    labels: &Labels,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (Tensor<T>, Labels) {
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    augment_with(image, labels, flip, scale, cfg.crop, cfg.ignore)
}

fn hflip<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let d = t.dims();
    Tensor::from_fn(d, |[n, c, y, x]| t.at(n, c, y, d.w - 1 - x))
}

/// Deterministic flip/scale/centre-crop of a single `(1, C, H, W)` sample.
/// Padding fills the image with zeros and the labels with `ignore`.
pub fn augment_with<T: Element>(
    image: &Tensor<T>,
    labels: &Labels,
    flip: bool,
    scale: f64,
    crop: (usize, usize),
    ignore: u8,
) -> (Tensor<T>, Labels) {
    let (mut img, mut lab) = if flip {
        (hflip(image), labels.hflip())
    } else {
        (image.clone(), labels.clone())
    };
    let d = img.dims();
    let (sh, sw) = (
        ((d.h as f64 * scale).round() as usize).max(1),
        ((d.w as f64 * scale).round() as usize).max(1),
    );
    if (sh, sw) != (d.h, d.w) {
        img = bilinear_resize(&img, sh, sw, ResizeConvention::HalfPixel).expect("positive size");
        let (fy, fx) = (d.h as f64 / sh as f64, d.w as f64 / sw as f64);
        lab = Labels::from_fn(lab.batch(), sh, sw, |n, y, x| {
            let sy = (((y as f64 + 0.5) * fy) as usize).min(d.h - 1);
            let sx = (((x as f64 + 0.5) * fx) as usize).min(d.w - 1);
            lab.at(n, sy, sx)
        });
    }
    let (ch, cw) = crop;
    // signed offset of the crop window inside the scaled sample
    let oy = (sh as isize - ch as isize) / 2;
    let ox = (sw as isize - cw as isize) / 2;
    let inside = |y: usize, x: usize| {
        let (sy, sx) = (y as isize + oy, x as isize + ox);
        (sy >= 0 && sx >= 0 && sy < sh as isize && sx < sw as isize).then_some((sy as usize, sx as usize))
    };
    let out = Tensor::from_fn(Dims::new(d.n, d.c, ch, cw), |[n, c, y, x]| {
        inside(y, x).map_or(T::zero(), |(sy, sx)| img.at(n, c, sy, sx))
    });
    let lout = Labels::from_fn(lab.batch(), ch, cw, |n, y, x| {
        inside(y, x).map_or(ignore, |(sy, sx)| lab.at(n, sy, sx))
    });
    (out, lout)
}
