use super::netpbm::RgbImage;
use crate::error::Result;
use crate::tensor::{Dims, Tensor};

/// Per-channel `(v / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// `(1, 3, H, W)` normalized tensor.
    pub fn apply(&self, img: &RgbImage) -> Tensor<f32> {
        Tensor::from_fn(Dims::new(1, 3, img.height, img.width), |[_, c, y, x]| {
            (f32::from(img.pixel(x, y)[c]) / 255.0 - self.mean[c]) / self.std[c]
        })
    }

    /// Inverse of [`apply`](Self::apply), rounding and clamping to 8 bits.
    pub fn invert(&self, t: &Tensor<f32>) -> Result<RgbImage> {
        let d = t.dims();
        t.expect_dims("normalization", Dims::new(1, 3, d.h, d.w))?;
        let mut data = Vec::with_capacity(d.plane() * 3);
        for y in 0..d.h {
            for x in 0..d.w {
                for c in 0..3 {
                    let v = (t.at(0, c, y, x) * self.std[c] + self.mean[c]) * 255.0;
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        RgbImage::new(d.w, d.h, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_recovers_bytes() {
        let img = RgbImage::new(3, 2, (0..18).map(|v| (v * 14) as u8).collect()).unwrap();
        for n in [Normalization::default(), Normalization::identity()] {
            assert_eq!(n.invert(&n.apply(&img)).unwrap(), img);
        }
    }
}
