//! Binary PPM images and CRDP raw float maps (depth, flow, disparity).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patches::ImageRgb;

pub const CRDP_MAGIC: &[u8; 4] = b"CRDP";
const CRDP_HEADER: usize = 16;

/// Quantizes to 8 bits (`round(255·v)`, clamped) and encodes as P6.
pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let mut pos = 0usize;
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
            return Err(Error::Format(format!("truncated PPM header at byte {pos}")));
        }
        fields.push((start, &bytes[start..pos]));
    }
    if fields[0].1 != b"P6" {
        return Err(Error::Format("not a binary PPM (expected P6 magic at byte 0)".into()));
    }
    let num = |k: usize| -> Result<usize> {
        std::str::from_utf8(fields[k].1)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PPM header field at byte {}", fields[k].0)))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Format(format!(
            "PPM raster truncated: need {need} bytes from byte {pos}, file has {}",
            bytes.len()
        ))
    })?;
    ImageRgb::new(height, width, raster.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageRgb) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Row-major HWC float map.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RawMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(RawMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// One channel as its own single-channel map.
    pub fn channel(&self, c: usize) -> RawMap {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        RawMap {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

pub fn encode_crdp(map: &RawMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(CRDP_HEADER + map.data.len() * 4);
    out.extend_from_slice(CRDP_MAGIC);
    for v in [map.height, map.width, map.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a CRDP buffer; a reserved field of 0 is read as one channel.
pub fn decode_crdp(bytes: &[u8]) -> Result<RawMap> {
    if bytes.len() < CRDP_HEADER {
        return Err(Error::Format(format!(
            "CRDP header truncated at byte {} (need {CRDP_HEADER})",
            bytes.len()
        )));
    }
    if &bytes[..4] != CRDP_MAGIC {
        return Err(Error::Format("bad CRDP magic at byte 0".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (height, width) = (word(1), word(2));
    let channels = word(3).max(1);
    let need = height * width * channels * 4;
    let payload = &bytes[CRDP_HEADER..];
    if payload.len() != need {
        return Err(Error::Format(format!(
            "CRDP payload at byte {CRDP_HEADER}: expected {need} bytes for {height}x{width}x{channels}, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    RawMap::new(height, width, channels, data)
}

pub fn write_crdp(path: impl AsRef<Path>, map: &RawMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_crdp(map)).map_err(|e| Error::io(path, e))
}

pub fn read_crdp(path: impl AsRef<Path>) -> Result<RawMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_crdp(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a CRDP file and checks its channel count.
pub fn read_crdp_channels(path: impl AsRef<Path>, channels: usize) -> Result<RawMap> {
    let path = path.as_ref();
    let map = read_crdp(path)?;
    if map.channels != channels {
        return Err(Error::Format(format!(
            "{}: expected {channels} channel(s) in the CRDP header, found {}",
            path.display(),
            map.channels
        )));
    }
    Ok(map)
}
