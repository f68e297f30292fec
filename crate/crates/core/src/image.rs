//! Binary PPM (P6) image grids.

use std::path::Path;

use crate::data::denormalize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tiles `images: [n, 3, r, r]` in `[-1, 1]` row-major onto a `grid × grid`
/// canvas; unused cells stay black. Returns the complete P6 file.
pub fn ppm_grid(images: &Tensor<f64>, grid: usize) -> Result<Vec<u8>> {
    let (n, c, h, w) = images.dims4("ppm_grid")?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "ppm_grid",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    if grid == 0 || n > grid * grid {
        return Err(Error::InvalidShape {
            op: "ppm_grid",
            msg: format!("{n} images do not fit a {grid}x{grid} grid"),
        });
    }
    let (width, height) = (grid * w, grid * h);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + width * height * 3, 0);
    let px = images.data();
    for i in 0..n {
        let (gy, gx) = (i / grid, i % grid);
        for y in 0..h {
            for x in 0..w {
                let dst = header + ((gy * h + y) * width + gx * w + x) * 3;
                for ch in 0..3 {
                    out[dst + ch] = denormalize(px[((i * 3 + ch) * h + y) * w + x]);
                }
            }
        }
    }
    Ok(out)
}

pub fn write_ppm_grid(path: impl AsRef<Path>, images: &Tensor<f64>, grid: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = ppm_grid(images, grid)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P6 file with maxval 255 into `(width, height, rgb)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Data("malformed PPM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if fields[0] != "P6" || max != 255 || bytes.len() < pos || bytes.len() - pos != w * h * 3 {
        return Err(bad());
    }
    Ok((w, h, bytes[pos..].to_vec()))
}
