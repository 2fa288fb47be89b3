//! Binary PPM (P6) export of latents.
//!
//! Channel mapping: one channel is replicated to grey; two channels fill red
//! and green with blue at zero; three or more use the first three as RGB.
//! Values are mapped per image: with `lo`/`hi` the min/max over the mapped
//! channels, `v -> round(255 (v - lo) / (hi - lo))`. A constant image maps
//! to 0.

use std::path::Path;

use crate::error::Result;
use crate::tensor::Tensor;

/// Encode `img` (`h x w x c`) as a P6 byte stream.
pub fn encode(img: &Tensor) -> Vec<u8> {
    let (h, w, c) = img.shape();
    let used = c.min(3);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..h {
        for j in 0..w {
            for k in 0..used {
                let v = img.get(i, j, k);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let range = hi - lo;
    let quant = |v: f64| -> u8 {
        if range > 0.0 {
            (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            let px = match used {
                0 => [0; 3],
                1 => [quant(img.get(i, j, 0)); 3],
                2 => [quant(img.get(i, j, 0)), quant(img.get(i, j, 1)), 0],
                _ => [quant(img.get(i, j, 0)), quant(img.get(i, j, 1)), quant(img.get(i, j, 2))],
            };
            out.extend_from_slice(&px);
        }
    }
    out
}

pub fn write(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}
