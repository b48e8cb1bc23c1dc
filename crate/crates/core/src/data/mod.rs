//! Synthetic texture datasets, the `IMG1` raw image format and patchification.

mod augment;
mod patch;
mod raw;
mod set;
mod synth;

pub use augment::Augment;
pub use patch::{patchify, unpatchify};
pub use raw::{decode_raw, encode_raw, load_raw, save_raw};
pub use set::{LabeledImageSet, Split};
pub use synth::{synth_local_textures, Motif, SynthConfig, SynthDataset, MOTIF};
