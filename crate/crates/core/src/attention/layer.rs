use rand::Rng;

use super::grid::PatchGrid;
use super::params::{xavier_tensor, Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Offsets `Δ^(h)` for the first nine heads: row-major over {−1,0,1}².
pub const HEAD_OFFSETS: [[i64; 2]; 9] = [
    [-1, -1],
    [-1, 0],
    [-1, 1],
    [0, -1],
    [0, 0],
    [0, 1],
    [1, -1],
    [1, 0],
    [1, 1],
];

/// Std of the learned embeddings (position, class token) and new classifier columns.
pub const INIT_STD: f64 = 0.02;

/// Positional vectors `v_h = α[−1, 2Δ₁, 2Δ₂]` for the first nine heads and
/// zero for any further head.
pub fn init_positional_vectors(num_heads: usize, alpha: f64) -> Vec<[f64; 3]> {
    (0..num_heads)
        .map(|h| match HEAD_OFFSETS.get(h) {
            Some(d) => [-alpha, 2.0 * alpha * d[0] as f64, 2.0 * alpha * d[1] as f64],
            None => [0.0; 3],
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Vanilla,
    /// Locality-preserved: `softmax(λ_h A + v_hᵀ r)`.
    Lpa,
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    kind: AttentionKind,
    dim: usize,
    num_heads: usize,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    /// `[H×1]` content weights, LPA only.
    lambda: Option<ParamId>,
    /// `[H×3]` positional vectors, LPA only.
    pos: Option<ParamId>,
}

/// Output of one layer over a batch laid out as `images × tokens` rows.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub out: Var,
    /// Post-softmax maps of every image and head, `images · heads` stacked
    /// `tokens × tokens` blocks.
    pub maps: Var,
    pub heads: usize,
    pub tokens: usize,
}

impl LayerOutput {
    /// The map of one image and head.
    pub fn map(&self, tape: &Tape, image: usize, head: usize) -> Tensor {
        let n = self.tokens;
        let start = (image * self.heads + head) * n * n;
        Tensor::new(vec![n, n], tape.value(self.maps).data()[start..start + n * n].to_vec())
            .expect("map block has n² entries")
    }

    /// All maps of one image, by head.
    pub fn image_maps(&self, tape: &Tape, image: usize) -> Vec<Tensor> {
        (0..self.heads).map(|h| self.map(tape, image, h)).collect()
    }
}

fn check_heads(dim: usize, num_heads: usize) -> Result<()> {
    if num_heads == 0 || dim % num_heads != 0 {
        return Err(TensorError::Dimension {
            op: "attention",
            msg: format!("dim {dim} is not divisible by {num_heads} heads"),
        });
    }
    Ok(())
}

impl AttentionLayer {
    pub fn new_vanilla<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, num_heads)?;
        let mut w = |name: &str, rng: &mut R| store.add(format!("{prefix}.{name}"), xavier_tensor(rng, dim, dim));
        let w_q = w("w_q", rng);
        let w_k = w("w_k", rng);
        let w_v = w("w_v", rng);
        let w_o = w("w_o", rng);
        let b_o = store.add(format!("{prefix}.b_o"), Tensor::zeros(&[dim]));
        Ok(Self {
            kind: AttentionKind::Vanilla,
            dim,
            num_heads,
            w_q,
            w_k,
            w_v,
            w_o,
            b_o,
            lambda: None,
            pos: None,
        })
    }

    /// LPA layer with every `λ_h = lambda0` and offset-initialised `v_h`.
    pub fn new_lpa<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        lambda0: f64,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::new_vanilla(store, prefix, dim, num_heads, rng)?;
        let lambda = store.add(format!("{prefix}.lambda"), Tensor::full(&[num_heads, 1], lambda0));
        let v: Vec<f64> = init_positional_vectors(num_heads, alpha).concat();
        let pos = store.add(format!("{prefix}.pos_v"), Tensor::new(vec![num_heads, 3], v)?);
        layer.kind = AttentionKind::Lpa;
        layer.lambda = Some(lambda);
        layer.pos = Some(pos);
        Ok(layer)
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn w_q(&self) -> ParamId {
        self.w_q
    }
    pub fn w_k(&self) -> ParamId {
        self.w_k
    }
    pub fn w_v(&self) -> ParamId {
        self.w_v
    }
    pub fn w_o(&self) -> ParamId {
        self.w_o
    }
    pub fn b_o(&self) -> ParamId {
        self.b_o
    }
    pub fn lambda(&self) -> Option<ParamId> {
        self.lambda
    }
    pub fn pos_v(&self) -> Option<ParamId> {
        self.pos
    }

    /// Runs the layer over `images` stacked blocks of `tokens` rows each.
    ///
    /// `encodings` is the flattened N²×3 quadratic encoding, needed by LPA.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        images: usize,
        encodings: Option<Var>,
    ) -> Result<LayerOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || images == 0 || shape[0] % images != 0 {
            return Err(TensorError::Dimension {
                op: "attention_forward",
                msg: format!("input {shape:?} for {images} images of width {}", self.dim),
            });
        }
        let tokens = shape[0] / images;
        let dh = self.head_dim();

        let q = tape.matmul(x, bound[self.w_q])?;
        let k = tape.matmul(x, bound[self.w_k])?;
        let v = tape.matmul(x, bound[self.w_v])?;

        // Per-head λ and positional bias are shared by every image.
        let mix = if self.kind == AttentionKind::Lpa {
            let r = encodings.ok_or_else(|| TensorError::Contract("LPA layer needs patch encodings".into()))?;
            if tape.shape(r) != [tokens * tokens, 3] {
                return Err(TensorError::Dimension {
                    op: "lpa_map",
                    msg: format!("encodings {:?} do not match {tokens} tokens", tape.shape(r)),
                });
            }
            let (lambda, pos) = (bound[self.lambda.expect("lpa")], bound[self.pos.expect("lpa")]);
            let bias = tape.matmul_nt(pos, r)?;
            Some((lambda, bias))
        } else {
            None
        };

        let scale = 1.0 / (dh as f64).sqrt();
        let maps = tape.attention_probs(q, k, images, self.num_heads, scale, mix)?;
        let merged = tape.attention_mix(maps, v, images, self.num_heads)?;
        let projected = tape.matmul(merged, bound[self.w_o])?;
        let out = tape.add_row(projected, bound[self.b_o])?;
        Ok(LayerOutput {
            out,
            maps,
            heads: self.num_heads,
            tokens,
        })
    }
}

/// `v_hᵀ r_ij` for all pairs, as an N×N matrix.
pub(crate) fn positional_bias(tape: &mut Tape, v_h: Var, encodings: Var, tokens: usize) -> Result<Var> {
    let flat = tape.matmul_nt(encodings, v_h)?;
    tape.reshape(flat, &[tokens, tokens])
}

/// Pre-softmax LPA logits `λ_h A + v_hᵀ r` given a precomputed bias.
pub(crate) fn lpa_logits(tape: &mut Tape, scores: Var, lambda: Var, bias: Var) -> Result<Var> {
    let weighted = tape.scale_by(scores, lambda)?;
    tape.add(weighted, bias)
}

/// Raw scores `A^(h) = Q^(h) K^(h)ᵀ / √d_h` of one head, before any softmax.
pub fn vanilla_scores(x: &Tensor, layer: &AttentionLayer, store: &ParamStore, head: usize) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != layer.dim {
        return Err(TensorError::Dimension {
            op: "vanilla_scores",
            msg: format!("input {:?} for layer width {}", x.shape(), layer.dim),
        });
    }
    if head >= layer.num_heads {
        return Err(TensorError::Dimension {
            op: "vanilla_scores",
            msg: format!("head {head} of {}", layer.num_heads),
        });
    }
    let dh = layer.head_dim();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let wq = tape.constant(store.get(layer.w_q).clone())?;
    let wk = tape.constant(store.get(layer.w_k).clone())?;
    let q = tape.matmul(xv, wq)?;
    let k = tape.matmul(xv, wk)?;
    let qh = tape.narrow(q, 1, head * dh, dh)?;
    let kh = tape.narrow(k, 1, head * dh, dh)?;
    let raw = tape.matmul_nt(qh, kh)?;
    let a = tape.scale(raw, 1.0 / (dh as f64).sqrt())?;
    Ok(tape.value(a).clone())
}

/// `Ã = softmax_rows(λ A + vᵀ r)` for one head.
pub fn lpa_map(scores: &Tensor, grid: &PatchGrid, lambda: f64, v: [f64; 3]) -> Result<Tensor> {
    let n = grid.len();
    if scores.shape() != [n, n] {
        return Err(TensorError::Dimension {
            op: "lpa_map",
            msg: format!("scores {:?} for a grid of {n} patches", scores.shape()),
        });
    }
    let mut tape = Tape::new();
    let a = tape.constant(scores.clone())?;
    let lam = tape.constant(Tensor::scalar(lambda))?;
    let vh = tape.constant(Tensor::new(vec![1, 3], v.to_vec())?)?;
    let r = tape.constant(grid.encodings_flat())?;
    let bias = positional_bias(&mut tape, vh, r, n)?;
    let logits = lpa_logits(&mut tape, a, lam, bias)?;
    let out = tape.softmax_rows(logits)?;
    Ok(tape.value(out).clone())
}
