//! Binary 8-bit PPM (P6) and PGM (P5).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

/// 8-bit grey raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        Ok(GrayImage { height, width, values })
    }
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = header("P5", img.width, img.height);
    out.extend_from_slice(&img.values);
    out
}

/// Values are mapped with `round(v · 255)` after clamping to `[0, 1]`.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::contract(format!(
            "PPM needs 3 channels, image has {}",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = header("P6", w, h);
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl Parser<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(self.kind, format!("expected a number at byte {start}")))
    }

    fn header(&mut self, magic: &[u8]) -> Result<(usize, usize)> {
        if !self.bytes.starts_with(magic) {
            return Err(Error::format(self.kind, "bad magic"));
        }
        self.pos = magic.len();
        let w = self.number()?;
        let h = self.number()?;
        let maxval = self.number()?;
        if maxval != 255 {
            return Err(Error::format(self.kind, format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => self.pos += 1,
            _ => return Err(Error::format(self.kind, "missing header terminator")),
        }
        Ok((w, h))
    }

    fn raster(&self, len: usize) -> Result<&[u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() != len {
            return Err(Error::format(
                self.kind,
                format!("expected {len} raster bytes, found {}", rest.len()),
            ));
        }
        Ok(rest)
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut p = Parser {
        bytes,
        pos: 0,
        kind: "PGM",
    };
    let (w, h) = p.header(b"P5")?;
    GrayImage::new(h, w, p.raster(h * w)?.to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut p = Parser {
        bytes,
        pos: 0,
        kind: "PPM",
    };
    let (w, h) = p.header(b"P6")?;
    let raster = p.raster(3 * h * w)?;
    let mut img = Image::zeros(3, h, w);
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            img.set(c, i / w, i % w, v as f64 / 255.0);
        }
    }
    Ok(img)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_ppm(img)?)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}
