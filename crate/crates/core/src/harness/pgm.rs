//! Grayscale set-size maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::PredictionSetGrid;

/// Binary PGM (P5) with intensity `round(255·|C|/K)`; undefined pixels are black.
pub fn size_map_pgm(sets: &PredictionSetGrid) -> Vec<u8> {
    let k = sets.num_classes().max(1) as f64;
    let mut out = format!("P5\n{} {}\n255\n", sets.width(), sets.height()).into_bytes();
    out.extend((0..sets.num_pixels()).map(|p| match sets.set_size(p) {
        Some(size) => (255.0 * size as f64 / k).round() as u8,
        None => 0,
    }));
    out
}

pub fn render_size_map(sets: &PredictionSetGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, size_map_pgm(sets)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
