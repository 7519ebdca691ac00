use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::atomic::write_atomic;
use super::colorize::palette;
use super::netpbm::{read_image, read_labels, write_image, write_labels, RgbImage};
use super::normalize::Normalization;
use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::supervision::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Class 1 is a circle; further classes cycle through the kinds.
    pub fn for_class(class: u8) -> ShapeKind {
        match (class.max(1) - 1) % 3 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }

    /// Pixel-centre membership relative to the shape centre.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // apex up, inscribed in the circle of radius r
                dy >= -r && dy <= r / 2.0 && dx.abs() <= (dy + r) / 3f64.sqrt()
            }
        }
    }
}

/// Radius ranges of the small, medium and large bands.
pub const SCALE_BANDS: [(usize, usize); 3] = [(3, 6), (8, 16), (20, 36)];
pub const NOISE_SIGMA: f64 = 0.05;
pub const PLACEMENT_ATTEMPTS: usize = 100;
const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeRecord {
    pub class: u8,
    pub kind: ShapeKind,
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
}

impl ShapeRecord {
    fn bbox(&self) -> (usize, usize, usize, usize) {
        (
            self.cx - self.radius,
            self.cy - self.radius,
            self.cx + self.radius,
            self.cy + self.radius,
        )
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.kind
            .contains(x as f64 - self.cx as f64, y as f64 - self.cy as f64, self.radius as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub image: RgbImage,
    pub labels: Labels,
    pub shapes: Vec<ShapeRecord>,
    /// Shapes dropped after exhausting placement attempts.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub seed: u64,
    pub size: usize,
    pub classes: usize,
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    pub fn skipped(&self) -> usize {
        self.samples.iter().map(|s| s.skipped).sum()
    }

    pub fn to_dataset(&self, norm: &Normalization) -> Dataset {
        Dataset {
            images: self.samples.iter().map(|s| norm.apply(&s.image)).collect(),
            labels: self.samples.iter().map(|s| s.labels.clone()).collect(),
        }
    }
}

/// Normalizes decoded image/label pairs.
pub fn to_dataset(pairs: &[(RgbImage, Labels)], norm: &Normalization) -> Dataset {
    Dataset {
        images: pairs.iter().map(|(i, _)| norm.apply(i)).collect(),
        labels: pairs.iter().map(|(_, l)| l.clone()).collect(),
    }
}

/// Mean colour of class `k`; background is mid gray.
pub fn class_color(class: u8, classes: usize) -> [f64; 3] {
    if class == 0 {
        return BACKGROUND;
    }
    palette(classes)[class as usize].map(|v| 0.25 + 0.5 * f64::from(v) / 255.0)
}

fn disjoint(a: &ShapeRecord, b: &ShapeRecord) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bbox();
    let (bx0, by0, bx1, by1) = b.bbox();
    ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0
}

fn gen_sample(seed: u64, index: usize, size: usize, classes: usize) -> ToySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let wanted = rng.gen_range(1..=4);
    let mut shapes: Vec<ShapeRecord> = Vec::new();
    let mut skipped = 0;
    let max_r = (size - 1) / 2;
    for _ in 0..wanted {
        let class = rng.gen_range(1..classes) as u8;
        let (lo, hi) = SCALE_BANDS[rng.gen_range(0..3)];
        let radius = rng.gen_range(lo..=hi).min(max_r);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand = ShapeRecord {
                class,
                kind: ShapeKind::for_class(class),
                cx: rng.gen_range(radius..size - radius),
                cy: rng.gen_range(radius..size - radius),
                radius,
            };
            if shapes.iter().all(|s| disjoint(s, &cand)) {
                shapes.push(cand);
                placed = true;
                break;
            }
        }
        skipped += usize::from(!placed);
    }
    let mut labels = Labels::filled(1, size, size, 0);
    for s in &shapes {
        let (x0, y0, x1, y1) = s.bbox();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if s.contains(x, y) {
                    labels.data_mut()[y * size + x] = s.class;
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let colors: Vec<[f64; 3]> = (0..classes).map(|k| class_color(k as u8, classes)).collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for &id in labels.data() {
        for c in 0..3 {
            let v = colors[id as usize][c] + noise.sample(&mut rng);
            data.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    ToySample {
        image: RgbImage::new(size, size, data).expect("sized"),
        labels,
        shapes,
        skipped,
    }
}

/// Synthetic multi-scale shapes; sample `i` draws from stream `i` of the
/// seeded generator, so output is independent of thread count.
pub fn gen_toy(seed: u64, count: usize, size: usize, classes: usize) -> Result<ToyDataset> {
    if size < 32 {
        return Err(Error::Config(format!("toy image size must be >= 32, got {size}")));
    }
    if !(2..=256).contains(&classes) {
        return Err(Error::Config(format!(
            "toy classes must lie in [2, 256], got {classes}"
        )));
    }
    let samples = (0..count)
        .into_par_iter()
        .map(|i| gen_sample(seed, i, size, classes))
        .collect();
    Ok(ToyDataset {
        seed,
        size,
        classes,
        samples,
    })
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

/// `images/NNNNN.ppm`, `labels/NNNNN.pgm` and a `manifest.txt`.
pub fn write_dataset(ds: &ToyDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    for (i, s) in ds.samples.iter().enumerate() {
        write_atomic(
            &dir.join("images").join(format!("{}.ppm", stem(i))),
            &write_image(&s.image),
        )?;
        write_atomic(
            &dir.join("labels").join(format!("{}.pgm", stem(i))),
            &write_labels(&s.labels),
        )?;
    }
    let manifest = format!(
        "seed {}\ncount {}\nsize {}\nclasses {}\nskipped {}\n",
        ds.seed,
        ds.samples.len(),
        ds.size,
        ds.classes,
        ds.skipped()
    );
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Reads every `images/*.ppm` with its matching `labels/*.pgm`, in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<(RgbImage, Labels)>> {
    let mut names: Vec<String> = std::fs::read_dir(dir.join("images"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no images under {}", dir.join("images").display())));
    }
    names
        .iter()
        .map(|n| {
            let ip = dir.join("images").join(n);
            let lp = dir.join("labels").join(n.replace(".ppm", ".pgm"));
            let img = read_image(&std::fs::read(&ip)?).map_err(|e| Error::Data(format!("{}: {e}", ip.display())))?;
            let lab = read_labels(&std::fs::read(&lp)?).map_err(|e| Error::Data(format!("{}: {e}", lp.display())))?;
            if (lab.width(), lab.height()) != (img.width, img.height) {
                return Err(Error::Data(format!("{n}: label size differs from image")));
            }
            Ok((img, lab))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_independent_of_count() {
        let a = gen_toy(5, 6, 64, 6).unwrap();
        let b = gen_toy(5, 3, 64, 6).unwrap();
        assert_eq!(a.samples[..3], b.samples[..]);
    }

    #[test]
    fn two_classes_only_circles() {
        let ds = gen_toy(1, 10, 48, 2).unwrap();
        for s in &ds.samples {
            assert!(s.shapes.iter().all(|r| r.kind == ShapeKind::Circle && r.class == 1));
            assert!(s.labels.data().iter().all(|&v| v < 2));
        }
    }

    #[test]
    fn rejects_small_size() {
        assert!(gen_toy(0, 1, 31, 6).is_err());
    }
}
