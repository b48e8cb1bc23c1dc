use crate::tensor::{Result, Tensor, TensorError};

fn geometry(image: &Tensor, patch: usize) -> Result<(usize, usize, usize)> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(TensorError::Dimension {
            op: "patchify",
            msg: format!("expected C×H×W image, got {shape:?}"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::Dimension {
            op: "patchify",
            msg: format!("{h}×{w} image is not divisible into {patch}×{patch} patches"),
        });
    }
    Ok((c, h, w))
}

/// Splits a C×H×W image into raster-ordered patches, one flattened
/// `(channel, row, col)` patch per output row.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = geometry(image, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let width = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = py * patch + dy;
                    let base = (ch * h + row) * w + px * patch;
                    out.extend_from_slice(&src[base..base + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, width], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    let (gh, gw) = (height / patch, width / patch);
    let expected = [gh * gw, channels * patch * patch];
    if patch == 0 || height % patch != 0 || width % patch != 0 || patches.shape() != expected {
        return Err(TensorError::Dimension {
            op: "unpatchify",
            msg: format!(
                "patches {:?} do not tile a {channels}×{height}×{width} image with patch {patch}",
                patches.shape()
            ),
        });
    }
    let mut out = vec![0.0; channels * height * width];
    let src = patches.data();
    let mut k = 0;
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..channels {
                for dy in 0..patch {
                    let base = (ch * height + py * patch + dy) * width + px * patch;
                    out[base..base + patch].copy_from_slice(&src[k..k + patch]);
                    k += patch;
                }
            }
        }
    }
    Tensor::new(vec![channels, height, width], out)
}
