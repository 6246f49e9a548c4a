//! Binary PPM (`P6`, 8-bit RGB) classification maps.

use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// Colors a label raster: 0 is black, `k` takes `palette[k - 1]`.
pub fn render_map(raster: &[u16], height: usize, width: usize, palette: &[Rgb]) -> Result<Vec<u8>> {
    if raster.len() != height * width {
        return Err(Error::InvalidArgument(format!(
            "{height}×{width} map needs {} labels, got {}",
            height * width,
            raster.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * raster.len());
    for &l in raster {
        let rgb = match l {
            0 => [0, 0, 0],
            k => *palette.get(k as usize - 1).ok_or(Error::LabelOutOfRange {
                label: k as usize,
                classes: palette.len(),
            })?,
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn write_map(path: &Path, raster: &[u16], height: usize, width: usize, palette: &[Rgb]) -> Result<()> {
    let bytes = render_map(raster, height, width, palette)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a `P6` image with maxval 255 into `(height, width, pixels)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<Rgb>)> {
    let bad = |m: &str| Error::InvalidArgument(format!("PPM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary RGB image"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 3 * width * height {
        return Err(bad("raster size does not match header"));
    }
    let pixels = body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok((height, width, pixels))
}
