//! Raster file formats: binary PGM (`P5`, 8-bit) and `PIMG1`.
//!
//! `PIMG1` layout: magic `PIMG1`, width u32 LE, height u32 LE, then
//! `width * height` f32 LE values in row-major order.

use std::fs;
use std::path::Path;

use super::{Image, ImagingError};

pub const PIMG_MAGIC: &[u8; 5] = b"PIMG1";

/// Decodes a binary PGM. Samples are scaled by `1 / maxval`, so 8-bit data
/// lands on multiples of `1/255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image, ImagingError> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(ImagingError::Format("missing P5 magic".into()));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        skip_whitespace_and_comments(bytes, &mut pos)?;
        *field = read_decimal(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(ImagingError::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if is_pgm_whitespace(*b) => pos += 1,
        _ => return Err(ImagingError::Format("header not terminated".into())),
    }
    let raster = &bytes[pos..];
    if raster.len() != width * height {
        return Err(ImagingError::Format(format!(
            "expected {} raster bytes, found {}",
            width * height,
            raster.len()
        )));
    }
    let scale = maxval as f64;
    let pixels = raster
        .iter()
        .map(|&b| {
            if b as usize > maxval {
                Err(ImagingError::Format(format!(
                    "sample {b} exceeds maxval {maxval}"
                )))
            } else {
                Ok(b as f64 / scale)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Image::new(width, height, pixels)
}

fn is_pgm_whitespace(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) -> Result<(), ImagingError> {
    let start = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b) if is_pgm_whitespace(*b) => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) if *pos > start => return Ok(()),
            Some(_) => return Err(ImagingError::Format("expected whitespace in header".into())),
            None => return Err(ImagingError::Format("truncated header".into())),
        }
    }
}

fn read_decimal(bytes: &[u8], pos: &mut usize) -> Result<usize, ImagingError> {
    let start = *pos;
    let mut value: usize = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| ImagingError::Format("header number overflow".into()))?;
        *pos += 1;
    }
    if *pos == start {
        return Err(ImagingError::Format("expected a number in header".into()));
    }
    Ok(value)
}

/// Encodes an 8-bit PGM, rounding each intensity to the nearest of 256 levels.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|p| (p * 255.0).round() as u8));
    out
}

pub fn decode_pimg(bytes: &[u8]) -> Result<Image, ImagingError> {
    if bytes.len() < 13 || &bytes[..5] != PIMG_MAGIC {
        return Err(ImagingError::Format("missing PIMG1 magic".into()));
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if width.checked_mul(height).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(ImagingError::Format(format!(
            "{}x{} raster does not match {} payload bytes",
            width,
            height,
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Image::new(width, height, pixels)
}

/// Encodes `PIMG1`; intensities are narrowed to f32.
pub fn encode_pimg(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + image.pixels().len() * 4);
    out.extend_from_slice(PIMG_MAGIC);
    out.extend_from_slice(&(image.width() as u32).to_le_bytes());
    out.extend_from_slice(&(image.height() as u32).to_le_bytes());
    for p in image.pixels() {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

/// Decodes by magic bytes.
pub fn decode_any(bytes: &[u8]) -> Result<Image, ImagingError> {
    if bytes.starts_with(PIMG_MAGIC) {
        decode_pimg(bytes)
    } else {
        decode_pgm(bytes)
    }
}

pub fn load(path: &Path) -> std::io::Result<Image> {
    let bytes = fs::read(path)?;
    decode_any(&bytes).map_err(|e| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}: {e}", path.display()),
        )
    })
}
