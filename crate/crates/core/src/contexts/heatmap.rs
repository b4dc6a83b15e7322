use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;

/// Projects a region-attention row (`R` entries) onto pixels through the
/// region maps `a_hat` (`R x L`, row-major): `m_l = sum_r row_r * a_hat[r, l]`.
pub fn spread_regions(row: &[f64], a_hat: &[f64], pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels];
    for (r, &w) in row.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(&a_hat[r * pixels..(r + 1) * pixels]) {
            *o += w * a;
        }
    }
    out
}

/// Min-max normalized grayscale PGM bytes for an attention row over `h x w` pixels.
pub fn attention_heatmap(row: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if row.len() != h * w {
        return Err(Error::Analysis(format!("attention row of {} entries for a {h}x{w} map", row.len())));
    }
    Ok(pnm::pgm_bytes(w, h, &pnm::normalize_gray(row)))
}

pub fn export_attention_map(row: &[f64], h: usize, w: usize, path: impl AsRef<Path>) -> Result<()> {
    pnm::write(path, &attention_heatmap(row, h, w)?)
}
