use crate::error::{Error, Result};
use crate::labels::Labels;

/// `counts[i * C + j]` = pixels of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim("confusion", "entries", classes * classes, counts.len()));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pair of maps; pixels whose truth is `ignore` are skipped.
    pub fn update(&mut self, pred: &Labels, truth: &Labels, ignore: Option<u8>) -> Result<()> {
        if (pred.batch(), pred.height(), pred.width()) != (truth.batch(), truth.height(), truth.width()) {
            return Err(Error::dim(
                "confusion_update",
                "pixels",
                truth.data().len(),
                pred.data().len(),
            ));
        }
        let c = self.classes;
        let plane = truth.height() * truth.width();
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                let (n, y, x) = (i / plane, (i % plane) / truth.width(), i % truth.width());
                return Err(Error::Data(format!(
                    "pixel (n={n}, y={y}, x={x}): truth {t}, prediction {p} outside {c} classes"
                )));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("confusion_merge", "classes", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_i = N_ii / (Σ_j N_ij + Σ_j N_ji − N_ii)`, averaged over present classes.
    pub fn miou(&self) -> Result<MiouReport> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|i| {
                let row: u64 = (0..c).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, i)).sum();
                let tp = self.get(i, i);
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric("no class present in prediction or truth".into()));
        }
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_hand_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.6), Some(0.6)]);
        assert!((r.miou - 0.6).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded_and_empty_is_undefined() {
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 0, 0, 0, 0, 2]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.miou, 1.0);
        assert!(matches!(ConfusionMatrix::new(2).miou(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn out_of_range_truth_names_pixel() {
        let mut cm = ConfusionMatrix::new(2);
        let p = Labels::filled(1, 2, 2, 0);
        let t = Labels::from_fn(1, 2, 2, |_, y, x| if (y, x) == (1, 0) { 5 } else { 0 });
        match cm.update(&p, &t, Some(255)) {
            Err(Error::Data(m)) => assert!(m.contains("y=1, x=0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
