//! `IMG1` files, little-endian:
//!
//! ```text
//! "IMG1" u32 M  u16 C  u16 H  u16 W  u16 num_classes
//! M × (u16 label, C·H·W bytes)
//! ```
//!
//! Pixel bytes map to `byte / 255`.

use std::path::Path;

use super::set::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IMG1";
const HEADER_LEN: usize = 16;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

fn u16_at(bytes: &[u8], at: usize) -> usize {
    u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize
}

pub fn decode_raw(bytes: &[u8], split: Split) -> Result<LabeledImageSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected IMG1"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let m = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let (c, h, w) = (u16_at(bytes, 8), u16_at(bytes, 10), u16_at(bytes, 12));
    let num_classes = u16_at(bytes, 14);
    let pixels = c * h * w;
    let record = 2 + pixels;
    let mut set = LabeledImageSet::empty(c, h, w, num_classes, split);
    let mut pos = HEADER_LEN;
    for k in 0..m {
        if bytes.len() - pos < record {
            return Err(format_err(pos, format!("truncated record {k} of {m}")));
        }
        let label = u16_at(bytes, pos);
        if label >= num_classes {
            return Err(format_err(pos, format!("label {label} ≥ class count {num_classes}")));
        }
        let data = bytes[pos + 2..pos + record].iter().map(|&b| b as f64 / 255.0).collect();
        set.images.push(Tensor::new(vec![c, h, w], data)?);
        set.labels.push(label);
        pos += record;
    }
    if pos != bytes.len() {
        return Err(format_err(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(set)
}

/// Serializes a set; pixels are quantized to the nearest `k / 255`.
pub fn encode_raw(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let dims = [set.channels, set.height, set.width, set.num_classes];
    if dims.iter().any(|&d| d > u16::MAX as usize) || set.len() > u32::MAX as usize {
        return Err(Error::Config("dimensions exceed the IMG1 field widths".into()));
    }
    let pixels = set.channels * set.height * set.width;
    let mut buf = Vec::with_capacity(HEADER_LEN + set.len() * (2 + pixels));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for (img, &label) in set.images.iter().zip(&set.labels) {
        if img.len() != pixels {
            return Err(Error::Config(format!(
                "image has {} values, expected {pixels}",
                img.len()
            )));
        }
        buf.extend_from_slice(&(label as u16).to_le_bytes());
        buf.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(buf)
}

pub fn load_raw(path: &Path, split: Split) -> Result<LabeledImageSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, split)
}

pub fn save_raw(set: &LabeledImageSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw(set)?).map_err(|e| Error::io(path, e))
}
