//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{PipelineError, Result};

/// A decoded netpbm image. `data` is row-major, with channels interleaved
/// for PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    /// Interleaves a planar `3×H×W` buffer.
    pub fn from_planar_rgb(width: usize, height: usize, planar: &[u8]) -> Self {
        let plane = width * height;
        let data = (0..plane).flat_map(|u| (0..3).map(move |c| planar[c * plane + u])).collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    /// Channel-planar copy of the pixel data.
    pub fn to_planar(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        (0..self.channels)
            .flat_map(|c| (0..plane).map(move |u| self.data[u * self.channels + c]))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, reason: String| PipelineError::Format {
            path: path.to_path_buf(),
            kind: "netpbm",
            offset,
            reason,
        };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(fail(0, "expected magic P5 or P6".into())),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(fail(pos, "expected a decimal header field".into()));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail(start, "header field out of range".into()))?;
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(fail(pos, format!("unsupported maxval {maxval}")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail(pos, "expected whitespace after the header".into()));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| fail(pos, "image dimensions overflow".into()))?;
        let have = bytes.len() - pos;
        if have < need {
            return Err(fail(bytes.len(), format!("truncated pixel data: expected {need} bytes, found {have}")));
        }
        if have > need {
            return Err(fail(pos + need, format!("{} trailing bytes after pixel data", have - need)));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: bytes[pos..].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(PipelineError::io(path))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(PipelineError::io(path))
    }

    /// Reads a file that must have `channels` channels and the given size.
    pub fn read_expecting(path: &Path, channels: usize, width: usize, height: usize) -> Result<Self> {
        let img = Self::read(path)?;
        if (img.channels, img.width, img.height) != (channels, width, height) {
            return Err(PipelineError::Format {
                path: path.to_path_buf(),
                kind: "netpbm",
                offset: 0,
                reason: format!(
                    "expected {channels}-channel {width}x{height}, found {}-channel {}x{}",
                    img.channels, img.width, img.height
                ),
            });
        }
        Ok(img)
    }
}

/// Linearly maps `values` onto `0..=255`; a constant input maps to 0.
pub fn min_max_scale(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}
