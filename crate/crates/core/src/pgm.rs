//! ASCII PGM (P2) heatmap export: dependency-free, byte-stable, easy to
//! diff in tests.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::path::Path;

/// Render values as a P2 grayscale image, linearly mapped to 0..=255
/// (max value -> 255; a constant image maps to 0).
pub fn to_pgm(values: &Array2<f64>) -> String {
    let (rows, cols) = values.dim();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let mut line = String::new();
        for c in 0..cols {
            let level = if span > 0.0 {
                ((values[[r, c]] - lo) / span * 255.0).round() as u32
            } else {
                0
            };
            if c > 0 {
                line.push(' ');
            }
            line.push_str(&level.to_string());
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_pgm(values: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_pgm(values)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Lay a displacement-score map out on a (2r+1) x (2r+1) grid centered
/// at zero shift.
pub fn vote_map_image(
    vote_map: &std::collections::BTreeMap<(i64, i64), f64>,
    radius: i64,
) -> Array2<f64> {
    let side = (2 * radius + 1) as usize;
    let mut img = Array2::zeros((side, side));
    for (&(dy, dx), &score) in vote_map {
        if dy.abs() <= radius && dx.abs() <= radius {
            img[[(dy + radius) as usize, (dx + radius) as usize]] = score;
        }
    }
    img
}
