//! Binary PGM (P5) and PPM (P6) writers.

use std::path::Path;

use crate::error::{Error, Result};

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// `rgb` holds interleaved triples, row-major.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height, "ppm pixel count");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Linear map of `[lo, hi]` onto `[0, 255]`, clamped and rounded.
pub fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min-max normalization to 8-bit gray; a constant input maps to mid-gray.
pub fn normalize_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|&v| quantize(v, lo, hi)).collect()
}

pub fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_and_scaling() {
        let b = pgm_bytes(2, 1, &[0, 255]);
        assert_eq!(&b[..11], b"P5\n2 1\n255\n");
        assert_eq!(quantize(1.0, 1.0, 8.0), 0);
        assert_eq!(quantize(8.0, 1.0, 8.0), 255);
        assert_eq!(normalize_gray(&[3.0, 3.0]), vec![128, 128]);
        assert_eq!(normalize_gray(&[0.0, 1.0, 0.0]), vec![0, 255, 0]);
    }
}
