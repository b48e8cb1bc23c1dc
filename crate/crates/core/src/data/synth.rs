//! Synthetic images whose class is carried only by small local motifs.
//!
//! Every class owns a binary 4×4 motif built from four 2×2 oriented strokes
//! (a shared vocabulary of [`PRIMITIVES`] patterns), one per quadrant. All
//! classes use the same strokes in different arrangements, so a single 2×2
//! cell never identifies the class: only the layout of neighbouring cells
//! does. An image is noise with the class motif stamped a few times at
//! random positions on a `lattice`-pixel grid, plus optional stamps of
//! distractor arrangements that belong to no class. No stroke is the mirror
//! image of another, so a horizontally flipped motif never matches a class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::set::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MOTIF: usize = 4;
const CELL: usize = MOTIF / 2;

/// Stroke vocabulary: one member of four of the six mirror pairs of
/// asymmetric 2×2 binary patterns.
pub const PRIMITIVES: [[bool; CELL * CELL]; 4] = [
    [true, false, false, true],  // main diagonal
    [true, false, true, false],  // left edge
    [true, true, true, false],   // open corner
    [true, false, false, false], // dot
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub stamps: usize,
    pub distractors: usize,
    pub noise: f64,
    /// Stamp corners are multiples of this; match it to the patch size to
    /// keep every stroke inside one patch.
    pub lattice: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 100,
            test_per_class: 20,
            image_size: 32,
            channels: 3,
            stamps: 6,
            distractors: 0,
            noise: 0.15,
            lattice: 2,
        }
    }
}

pub type Motif = [bool; MOTIF * MOTIF];

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub motifs: Vec<Motif>,
    /// Top-left corners of the class stamps of each train image.
    pub train_stamps: Vec<Vec<(usize, usize)>>,
    pub test_stamps: Vec<Vec<(usize, usize)>>,
}

/// Quadrant order: top-left, top-right, bottom-left, bottom-right.
fn compose(arrangement: &[usize]) -> Motif {
    let mut out = [false; MOTIF * MOTIF];
    for (q, &p) in arrangement.iter().enumerate() {
        let (r0, c0) = (q / 2 * CELL, q % 2 * CELL);
        for r in 0..CELL {
            for c in 0..CELL {
                out[(r0 + r) * MOTIF + c0 + c] = PRIMITIVES[p][r * CELL + c];
            }
        }
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

fn draw_motifs(rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<Motif>> {
    let mut all = permutations(PRIMITIVES.len());
    if count > all.len() {
        return Err(Error::Config(format!(
            "at most {} motifs (classes plus distractors), asked for {count}",
            all.len()
        )));
    }
    all.shuffle(rng);
    Ok(all[..count].iter().map(|a| compose(a)).collect())
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0.abs_diff(b.0) < MOTIF && a.1.abs_diff(b.1) < MOTIF
}

fn render(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    class_motif: &Motif,
    distractors: &[Motif],
) -> (Tensor, Vec<(usize, usize)>) {
    let s = cfg.image_size;
    let mut pixels: Vec<f64> = (0..cfg.channels * s * s)
        .map(|_| 0.5 + cfg.noise * rng.random_range(-1.0..1.0))
        .collect();
    let slots = (s - MOTIF) / cfg.lattice + 1;
    let draw = |rng: &mut ChaCha8Rng| {
        (
            cfg.lattice * rng.random_range(0..slots),
            cfg.lattice * rng.random_range(0..slots),
        )
    };
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let total = cfg.stamps + if distractors.is_empty() { 0 } else { cfg.distractors };
    for k in 0..total {
        let mut pos = draw(rng);
        for _ in 0..64 {
            if placed.iter().all(|&p| !overlaps(p, pos)) {
                break;
            }
            pos = draw(rng);
        }
        placed.push(pos);
        let motif = if k < cfg.stamps {
            class_motif
        } else {
            &distractors[rng.random_range(0..distractors.len())]
        };
        for ch in 0..cfg.channels {
            for r in 0..MOTIF {
                for c in 0..MOTIF {
                    let base = if motif[r * MOTIF + c] { 0.9 } else { 0.1 };
                    let v = base + 0.5 * cfg.noise * rng.random_range(-1.0..1.0);
                    pixels[(ch * s + pos.0 + r) * s + pos.1 + c] = v;
                }
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let img = Tensor::new(vec![cfg.channels, s, s], pixels).expect("pixel count matches shape");
    (img, placed[..cfg.stamps].to_vec())
}

/// Generates a train and a test split; identical `(cfg, seed)` give
/// bit-identical output.
pub fn synth_local_textures(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    if cfg.num_classes == 0 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Config(
            "synthetic dataset needs ≥1 class and ≥1 sample per split".into(),
        ));
    }
    if cfg.image_size < MOTIF || cfg.channels == 0 || cfg.stamps == 0 {
        return Err(Error::Config(
            "image must fit a motif and carry at least one stamp".into(),
        ));
    }
    if cfg.lattice == 0 {
        return Err(Error::Config("stamp lattice must be positive".into()));
    }
    if !(0.0..=0.5).contains(&cfg.noise) {
        return Err(Error::Config(format!("noise {} outside [0, 0.5]", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_distractor_motifs = if cfg.distractors > 0 { 2 } else { 0 };
    let mut motifs = draw_motifs(&mut rng, cfg.num_classes + n_distractor_motifs)?;
    let distractors = motifs.split_off(cfg.num_classes);

    let s = cfg.image_size;
    let mut make = |per_class: usize, split: Split| {
        let mut set = LabeledImageSet::empty(cfg.channels, s, s, cfg.num_classes, split);
        let mut stamps = Vec::new();
        for _ in 0..per_class {
            for (class, motif) in motifs.iter().enumerate() {
                let (img, pos) = render(cfg, &mut rng, motif, &distractors);
                set.images.push(img);
                set.labels.push(class);
                stamps.push(pos);
            }
        }
        (set, stamps)
    };
    let (train, train_stamps) = make(cfg.train_per_class, Split::Train);
    let (test, test_stamps) = make(cfg.test_per_class, Split::Test);
    Ok(SynthDataset {
        train,
        test,
        motifs,
        train_stamps,
        test_stamps,
    })
}
