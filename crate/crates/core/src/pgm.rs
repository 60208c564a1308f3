//! Binary PGM (P5, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Mask};

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 buffer into `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?);
    }
    if fields[0] != "P5" {
        return Err(format!("magic {:?} is not P5", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let (width, height, maxval) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(format!(
            "raster holds {} of {n} bytes",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok((width, height, bytes[pos..pos + n].to_vec()))
}

/// Writes a P5 file, creating missing parent directories.
pub fn write_raw(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(width, height, pixels)).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::corrupt(path, reason))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let px: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    write_raw(path, image.width, image.height, &px)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (w, h, px) = read_raw(path)?;
    Ok(Grid::from_vec(
        h,
        w,
        px.into_iter().map(|p| p as f64 / 255.0).collect(),
    ))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_raw(path, mask.width, mask.height, &px)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (w, h, px) = read_raw(path)?;
    let mut data = Vec::with_capacity(px.len());
    for p in px {
        match p {
            0 => data.push(false),
            255 => data.push(true),
            other => {
                return Err(Error::corrupt(
                    path,
                    format!("mask value {other} not in {{0, 255}}"),
                ))
            }
        }
    }
    Ok(Grid::from_vec(h, w, data))
}
