//! Binary netpbm rasters: P6 (RGB) and P5 (grayscale), maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit raster with `channels` interleaved samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * channels, "raster size");
        Raster { width, height, channels, data }
    }
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => panic!("netpbm rasters have 1 or 3 channels, got {c}"),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Raster> {
    let bad = |d: &str| Error::format(origin, d);
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("not a binary PGM or PPM file")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or_else(|| bad("missing width"))?;
    let height = h.number().ok_or_else(|| bad("missing height"))?;
    let maxval = h.number().ok_or_else(|| bad("missing maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty raster"));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("header not terminated"));
    }
    let body = &bytes[h.pos + 1..];
    let need = width * height * channels;
    if body.len() < need {
        return Err(bad(&format!("pixel data truncated ({} of {need} bytes)", body.len())));
    }
    Ok(Raster::new(width, height, channels, body[..need].to_vec()))
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}
