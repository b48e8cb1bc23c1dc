use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Random horizontal flip followed by a zero-padded random crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    pub pad: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip: true, pad: 4 }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, pad: 0 };

    pub fn is_identity(&self) -> bool {
        !self.flip && self.pad == 0
    }

    /// `image` is `[C, H, W]`. The rng is consumed identically whether or not
    /// the flip fires, so a sample's crop does not depend on its flip.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Tensor, rng: &mut R) -> Tensor {
        if self.is_identity() {
            return image.clone();
        }
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let flip = self.flip && rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let dx = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let src = image.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx];
                }
            }
        }
        Tensor::new(image.shape().to_vec(), out).expect("same shape")
    }
}
