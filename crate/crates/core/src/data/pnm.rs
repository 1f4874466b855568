//! Binary PGM (P5) read/write and PPM (P6) read with luma conversion.
//!
//! Only 8-bit files (maxval ≤ 255) are supported.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} bytes, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data })
    }
}

/// ITU-R BT.601 luma, rounded.
pub fn rgb_to_gray(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
        other => other,
    })
}

/// Decodes P5 (gray) or P6 (RGB, converted with [`rgb_to_gray`]).
pub fn decode_pnm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |msg: String| Error::format("pnm", msg);
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header".into()))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(format!("unsupported magic `{other}`, expected P5 or P6"))),
    };
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(format!("bad {what} `{s}`")));
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("zero-sized image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} is not 8-bit")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("truncated header".into()));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(bad(format!("raster holds {} bytes, expected {need}", raster.len())));
    }
    let scale = |v: u8| -> u8 {
        if maxval == 255 {
            v
        } else {
            ((v.min(maxval as u8) as f64) * 255.0 / maxval as f64).round() as u8
        }
    };
    let data = if channels == 1 {
        raster[..need].iter().map(|&v| scale(v)).collect()
    } else {
        raster[..need]
            .chunks_exact(3)
            .map(|p| rgb_to_gray(scale(p[0]), scale(p[1]), scale(p[2])))
            .collect()
    };
    GrayImage::new(height, width, data)
}
