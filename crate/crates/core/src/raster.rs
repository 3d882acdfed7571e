//! Score rasters: `"DHSC" | version u32 | height u32 | width u32 | f32 × H·W`, little-endian, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SCORE_MAGIC: &[u8; 4] = b"DHSC";
pub const SCORE_VERSION: u32 = 1;
pub const SCORE_HEADER_LEN: usize = 16;
const KIND: &str = "score raster";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRaster {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ScoreRaster {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        Ok(ScoreRaster { height, width, values })
    }

    /// Narrows to `f32` (round to nearest).
    pub fn from_f64(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        ScoreRaster::new(height, width, values.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SCORE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(SCORE_MAGIC);
        out.extend_from_slice(&SCORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SCORE_HEADER_LEN {
            return Err(Error::format(KIND, "truncated header"));
        }
        if &bytes[..4] != SCORE_MAGIC {
            return Err(Error::format(KIND, "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != SCORE_VERSION {
            return Err(Error::format(KIND, format!("unsupported version {version}")));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(SCORE_HEADER_LEN))
            .ok_or_else(|| Error::format(KIND, "dimensions overflow"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                KIND,
                format!("expected {expected} bytes for {h}x{w}, found {}", bytes.len()),
            ));
        }
        let values = bytes[SCORE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ScoreRaster::new(h, w, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        ScoreRaster::decode(&fs::read(path)?)
    }
}
