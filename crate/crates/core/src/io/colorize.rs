use super::netpbm::RgbImage;
use crate::labels::Labels;

fn hsv(h: f64) -> [u8; 3] {
    let h6 = (h / 60.0).rem_euclid(6.0);
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v: f64| (v * 255.0).round() as u8)
}

/// Class `k` at hue `k·360/K`, full saturation and value; class 0 black.
pub fn palette(classes: usize) -> Vec<[u8; 3]> {
    (0..classes.max(1))
        .map(|k| {
            if k == 0 {
                [0, 0, 0]
            } else {
                hsv(k as f64 * 360.0 / classes as f64)
            }
        })
        .collect()
}

/// Ids outside the palette render white.
pub fn colorize(labels: &Labels, classes: usize) -> RgbImage {
    let pal = palette(classes);
    let s = labels.sample(0);
    let data = s
        .data()
        .iter()
        .flat_map(|&id| pal.get(id as usize).copied().unwrap_or([255; 3]))
        .collect();
    RgbImage::new(s.width(), s.height(), data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_is_black() {
        let img = colorize(&Labels::filled(1, 2, 3, 0), 6);
        assert!(img.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn palette_pairwise_distinct() {
        for k in 2..=32 {
            let p = palette(k);
            for i in 0..k {
                for j in i + 1..k {
                    let d: i32 = (0..3).map(|c| (i32::from(p[i][c]) - i32::from(p[j][c])).abs()).sum();
                    assert!(d > 0, "K={k}: {i} and {j} collide");
                }
            }
        }
    }
}
