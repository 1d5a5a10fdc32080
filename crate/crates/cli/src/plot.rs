//! Scatter plot of the joint 2-D embedding.

use std::path::Path;

use image::{Rgb, RgbImage};

use detail_core::metrics::DistributionMetrics;

use crate::CliError;

const SIZE: u32 = 512;
const MARGIN: f64 = 24.0;
const COARSE: Rgb<u8> = Rgb([200, 60, 50]);
const ENHANCED: Rgb<u8> = Rgb([40, 110, 200]);
const REFERENCE: Rgb<u8> = Rgb([60, 160, 70]);

/// Coarse in red, enhanced in blue, reference in green.
pub fn save_embedding(m: &DistributionMetrics, path: &Path) -> Result<(), CliError> {
    let all = m.coarse.iter().chain(&m.enhanced).chain(&m.reference);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = |k: usize| (hi[k] - lo[k]).max(1e-12);
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let inner = SIZE as f64 - 2.0 * MARGIN;
    for (points, color) in [(&m.coarse, COARSE), (&m.reference, REFERENCE), (&m.enhanced, ENHANCED)] {
        for p in points {
            let x = MARGIN + (p[0] - lo[0]) / span(0) * inner;
            let y = MARGIN + (1.0 - (p[1] - lo[1]) / span(1)) * inner;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    if dx * dx + dy * dy > 5 {
                        continue;
                    }
                    let (px, py) = (x as i64 + dx, y as i64 + dy);
                    if px >= 0 && py >= 0 && px < SIZE as i64 && py < SIZE as i64 {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
