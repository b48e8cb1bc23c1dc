//! `LPA1` checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "LPA1"
//! u32 self-attention layers, u32 heads, u32 d, u32 patches
//! repeated until EOF:
//!   u32 name length, name bytes (UTF-8), u32 rank, rank × u32 dims,
//!   product(dims) × f64
//! ```
//!
//! Besides the parameters, two metadata tensors are written first:
//! `meta.geometry = [channels, patch, grid_h, grid_w]` and
//! `meta.init = [lambda0, alpha]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, BackboneConfig, SELF_ATTENTION_LAYERS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPA1";

const GEOMETRY: &str = "meta.geometry";
const INIT: &str = "meta.init";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Backbone) -> Vec<u8> {
    let c = model.config();
    let grid = model.grid();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, SELF_ATTENTION_LAYERS);
    put_u32(&mut buf, c.heads);
    put_u32(&mut buf, c.dim);
    put_u32(&mut buf, grid.len());
    let geometry = Tensor::vector(vec![
        c.channels as f64,
        c.patch as f64,
        grid.grid_h() as f64,
        grid.grid_w() as f64,
    ]);
    put_tensor(&mut buf, GEOMETRY, &geometry);
    put_tensor(&mut buf, INIT, &Tensor::vector(vec![c.lambda0, c.alpha]));
    for (name, t) in model.store().iter() {
        put_tensor(&mut buf, name, t);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let start = self.pos;
        let len = self.u32("name length")?;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u32("rank")?;
        let dims = (0..rank).map(|_| self.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = self.take(count.checked_mul(8).unwrap_or(usize::MAX), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: start,
            msg: e.to_string(),
        })?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Backbone> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected LPA1".into(),
        });
    }
    let layers = r.u32("layer count")?;
    let heads = r.u32("head count")?;
    let dim = r.u32("width")?;
    let patches = r.u32("patch count")?;
    if layers != SELF_ATTENTION_LAYERS {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{layers} layers, this build uses {SELF_ATTENTION_LAYERS}"),
        });
    }
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        tensors.push(r.tensor()?);
    }
    let find = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: bytes.len(),
                msg: format!("missing tensor {name}"),
            })
    };
    let geometry = find(GEOMETRY)?.data().to_vec();
    let init = find(INIT)?.data().to_vec();
    if geometry.len() != 4 || init.len() != 2 {
        return Err(Error::Format {
            offset: 20,
            msg: "malformed metadata tensors".into(),
        });
    }
    let (channels, patch, gh, gw) = (
        geometry[0] as usize,
        geometry[1] as usize,
        geometry[2] as usize,
        geometry[3] as usize,
    );
    if gh * gw != patches {
        return Err(Error::Format {
            offset: 16,
            msg: format!("header says {patches} patches, geometry says {gh}×{gw}"),
        });
    }
    let ffn_hidden = find("blocks.0.ffn.w1")?.shape().get(1).copied().unwrap_or(0);
    let lpa_layers = (0..layers)
        .take_while(|l| tensors.iter().any(|(n, _)| *n == format!("blocks.{l}.attn.lambda")))
        .count();
    let config = BackboneConfig {
        image_height: gh * patch,
        image_width: gw * patch,
        channels,
        patch,
        dim,
        heads,
        ffn_hidden,
        lpa_layers,
        lambda0: init[0],
        alpha: init[1],
    };
    let mut model = Backbone::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let classes = find("head.weight")?.cols();
    if classes > 0 {
        model.extend_classes(classes, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let expected = model.store().len() + 2;
    if tensors.len() != expected {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("{} tensors stored, model has {expected}", tensors.len()),
        });
    }
    let store = model.store_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let t = find(&name)?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("{name}: stored {:?}, expected {:?}", t.shape(), store.get(id).shape()),
            });
        }
        store.replace(id, t.clone());
    }
    Ok(model)
}

pub fn save(model: &Backbone, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Backbone> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
