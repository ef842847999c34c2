//! Binary PGM/PPM encoders for inspection dumps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit greyscale; values in `[0,1]` map to `round(v·255)`.
pub fn pgm(plane: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane[..height * width].iter().map(|&v| to_byte(v)));
    out
}

/// 8-bit RGB from a planar `3×H×W` buffer.
pub fn ppm(planar_rgb: &[f64], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for k in 0..plane {
        for c in 0..3 {
            out.push(to_byte(planar_rgb[c * plane + k]));
        }
    }
    out
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
