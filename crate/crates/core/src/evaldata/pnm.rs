//! Binary PNM (P5 gray, P6 RGB) with maxval 255.

use thiserror::Error;

use crate::raster::{ColorType, Raster};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PnmError {
    #[error("not a binary P5/P6 file")]
    BadMagic,
    #[error("bad dimensions or maxval in header")]
    BadDimensions,
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

/// Width, height and color type from the header, plus the data offset.
pub fn read_pnm_header(bytes: &[u8]) -> Result<(usize, usize, ColorType, usize), PnmError> {
    let color = match bytes.get(..2) {
        Some(b"P5") => ColorType::Gray,
        Some(b"P6") => ColorType::Rgb,
        _ => return Err(PnmError::BadMagic),
    };
    let mut pos = 2;
    let width = token(bytes, &mut pos).ok_or(PnmError::BadDimensions)?;
    let height = token(bytes, &mut pos).ok_or(PnmError::BadDimensions)?;
    let maxval = token(bytes, &mut pos).ok_or(PnmError::BadDimensions)?;
    if width == 0 || height == 0 || maxval != 255 {
        return Err(PnmError::BadDimensions);
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((width, height, color, pos + 1)),
        Some(_) => Err(PnmError::BadDimensions),
        None => Err(PnmError::Truncated {
            expected: width * height * color.channels(),
            found: 0,
        }),
    }
}

pub fn read_pnm(bytes: &[u8]) -> Result<Raster, PnmError> {
    let (width, height, color, offset) = read_pnm_header(bytes)?;
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(color.channels()))
        .ok_or(PnmError::BadDimensions)?;
    let data = &bytes[offset..];
    if data.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: data.len(),
        });
    }
    Ok(Raster {
        width,
        height,
        color,
        data: data[..expected].to_vec(),
    })
}

pub fn write_pnm(raster: &Raster) -> Vec<u8> {
    let magic = match raster.color {
        ColorType::Gray => "P5",
        ColorType::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}
