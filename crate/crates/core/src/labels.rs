//! Integer class-id maps.

use crate::error::{Error, Result};

/// Default id for pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// A batch of `n` class-id maps of `h × w` pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Labels {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Labels {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("label map dims must be >= 1, got {n}x{h}x{w}")));
        }
        if data.len() != n * h * w {
            return Err(Error::dim("labels", "data", n * h * w, data.len()));
        }
        Ok(Labels { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, id: u8) -> Self {
        Labels::new(n, h, w, vec![id; n * h * w]).expect("non-empty")
    }

    pub fn from_fn(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(b, y, x));
                }
            }
        }
        Labels { n, h, w, data }
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn sample(&self, n: usize) -> Labels {
        let p = self.h * self.w;
        Labels {
            n: 1,
            h: self.h,
            w: self.w,
            data: self.data[n * p..(n + 1) * p].to_vec(),
        }
    }

    /// Stacks single maps of equal size into one batch.
    pub fn stack(maps: &[Labels]) -> Result<Labels> {
        let first = maps.first().ok_or_else(|| Error::Config("empty label stack".into()))?;
        let mut data = Vec::new();
        for m in maps {
            if m.h != first.h || m.w != first.w {
                return Err(Error::dim("labels", "height/width", first.h * first.w, m.h * m.w));
            }
            data.extend_from_slice(&m.data);
        }
        Labels::new(maps.iter().map(|m| m.n).sum(), first.h, first.w, data)
    }

    /// Nearest-neighbour downsampling by an integer factor, sampling the
    /// pixel at `floor((o + 0.5) * factor)`.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Labels> {
        if factor == 0 || !self.h.is_multiple_of(factor) || !self.w.is_multiple_of(factor) {
            return Err(Error::InputSize {
                h: self.h,
                w: self.w,
                reason: format!("label map not divisible by {factor}"),
            });
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let off = factor / 2;
        Ok(Labels::from_fn(self.n, oh, ow, |b, y, x| {
            self.at(b, y * factor + off, x * factor + off)
        }))
    }

    pub fn hflip(&self) -> Labels {
        Labels::from_fn(self.n, self.h, self.w, |b, y, x| self.at(b, y, self.w - 1 - x))
    }
}
