//! Binary netpbm reading and writing: P5 (graymap) and P6 (pixmap), 8-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("not a netpbm file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("expected a number in header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad header number".into()))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    pos += 1;
    Ok(Header { magic, width: fields[0], height: fields[1], maxval: fields[2], offset: pos })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    if h.maxval == 0 || h.maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {}", h.maxval)));
    }
    let n = h.width * h.height * channels;
    bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::Format(format!("raster truncated: need {} bytes", n)))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(Gray8, usize)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Format("expected binary PGM (P5)".into()));
    }
    let data = raster(bytes, &h, 1)?.to_vec();
    Ok((Gray8 { width: h.width, height: h.height, data }, h.maxval))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(Rgb8, usize)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format("expected binary PPM (P6)".into()));
    }
    let data = raster(bytes, &h, 3)?.to_vec();
    Ok((Rgb8 { width: h.width, height: h.height, data }, h.maxval))
}

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Gray8, usize)> {
    decode_pgm(&fs::read(path)?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(Rgb8, usize)> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Gray8) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Rgb8) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}
