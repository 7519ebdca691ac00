use crate::error::Result;
use crate::labels::Labels;
use crate::tensor::{Dims, Element, Tensor};

/// Marks pixels whose 8-neighbourhood holds a different class id after
/// nearest downsampling by `down`. Ignored pixels are never boundary and
/// never count as a differing neighbour.
pub fn boundary_labels<T: Element>(labels: &Labels, down: usize, ignore: Option<u8>) -> Result<Tensor<T>> {
    let small = labels.downsample_nearest(down)?;
    Ok(neighbour_mask(&small, ignore))
}

pub(crate) fn neighbour_mask<T: Element>(l: &Labels, ignore: Option<u8>) -> Tensor<T> {
    let (h, w) = (l.height() as isize, l.width() as isize);
    Tensor::from_fn(Dims::new(l.batch(), 1, l.height(), l.width()), |[n, _, y, x]| {
        let id = l.at(n, y, x);
        if Some(id) == ignore {
            return T::zero();
        }
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h || xx >= w {
                    continue;
                }
                let other = l.at(n, yy as usize, xx as usize);
                if other != id && Some(other) != ignore {
                    return T::one();
                }
            }
        }
        T::zero()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_planes_give_two_wide_band() {
        let l = Labels::from_fn(1, 6, 8, |_, _, x| u8::from(x >= 4));
        let m: Tensor<f32> = neighbour_mask(&l, None);
        for y in 0..6 {
            let row: Vec<f32> = (0..8).map(|x| m.at(0, 0, y, x)).collect();
            assert_eq!(row, [0., 0., 0., 1., 1., 0., 0., 0.]);
        }
    }

    #[test]
    fn uniform_map_has_no_boundary() {
        let l = Labels::filled(1, 16, 16, 3);
        let m: Tensor<f32> = boundary_labels(&l, 4, Some(255)).unwrap();
        assert_eq!(m.sum(), 0.0);
    }
}
