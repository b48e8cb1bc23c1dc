use rand::Rng;

use super::params::{xavier_tensor, Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Class-token attention: the class token is the only query, keys and values
/// come from `[class; patches]`.
#[derive(Debug, Clone)]
pub struct ClassAttention {
    dim: usize,
    num_heads: usize,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
}

#[derive(Debug, Clone)]
pub struct ClassAttentionOutput {
    /// `[images × d]` attention output for each class token.
    pub out: Var,
    /// `[image][head]` maps of shape 1×(N+1); entry 0 is the class token itself.
    pub maps: Vec<Vec<Var>>,
}

impl ClassAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(TensorError::Dimension {
                op: "class_attention",
                msg: format!("dim {dim} is not divisible by {num_heads} heads"),
            });
        }
        let mut w = |name: &str, rng: &mut R| store.add(format!("{prefix}.{name}"), xavier_tensor(rng, dim, dim));
        let w_q = w("w_q", rng);
        let w_k = w("w_k", rng);
        let w_v = w("w_v", rng);
        let w_o = w("w_o", rng);
        let b_o = store.add(format!("{prefix}.b_o"), Tensor::zeros(&[dim]));
        Ok(Self {
            dim,
            num_heads,
            w_q,
            w_k,
            w_v,
            w_o,
            b_o,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
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

    /// `cls` is `[images × d]`, `patches` is `[images·N × d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, cls: Var, patches: Var) -> Result<ClassAttentionOutput> {
        let (cs, ps) = (tape.shape(cls).to_vec(), tape.shape(patches).to_vec());
        let images = cs[0];
        if cs.len() != 2
            || ps.len() != 2
            || cs[1] != self.dim
            || ps[1] != self.dim
            || images == 0
            || ps[0] % images != 0
        {
            return Err(TensorError::Dimension {
                op: "class_attention_forward",
                msg: format!("class tokens {cs:?} with patch tokens {ps:?}, width {}", self.dim),
            });
        }
        let n = ps[0] / images;
        let dh = self.dim / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let all = tape.concat(&[cls, patches], 0)?;
        let q = tape.matmul(cls, bound[self.w_q])?;
        let k = tape.matmul(all, bound[self.w_k])?;
        let v = tape.matmul(all, bound[self.w_v])?;

        let mut rows = Vec::with_capacity(images);
        let mut maps = Vec::with_capacity(images);
        for b in 0..images {
            let index: Vec<usize> = std::iter::once(b).chain((0..n).map(|i| images + b * n + i)).collect();
            let kb = tape.gather_rows(k, &index)?;
            let vb = tape.gather_rows(v, &index)?;
            let qb = tape.narrow(q, 0, b, 1)?;
            let mut heads = Vec::with_capacity(self.num_heads);
            let mut image_maps = Vec::with_capacity(self.num_heads);
            for h in 0..self.num_heads {
                let qh = tape.narrow(qb, 1, h * dh, dh)?;
                let kh = tape.narrow(kb, 1, h * dh, dh)?;
                let vh = tape.narrow(vb, 1, h * dh, dh)?;
                let raw = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(raw, scale)?;
                let att = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(att, vh)?);
                image_maps.push(att);
            }
            rows.push(tape.concat(&heads, 1)?);
            maps.push(image_maps);
        }
        let merged = if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat(&rows, 0)?
        };
        let projected = tape.matmul(merged, bound[self.w_o])?;
        let out = tape.add_row(projected, bound[self.b_o])?;
        Ok(ClassAttentionOutput { out, maps })
    }
}

/// Single-image class attention over `tokens = [class; patches]`, returning
/// the attention output for the class token and its per-head maps.
pub fn class_attention_forward(
    tokens: &Tensor,
    layer: &ClassAttention,
    store: &ParamStore,
) -> Result<(Tensor, Vec<Tensor>)> {
    if tokens.rank() != 2 || tokens.rows() < 2 {
        return Err(TensorError::Dimension {
            op: "class_attention_forward",
            msg: format!("need a class token plus at least one patch, got {:?}", tokens.shape()),
        });
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape)?;
    let all = tape.constant(tokens.clone())?;
    let cls = tape.narrow(all, 0, 0, 1)?;
    let patches = tape.narrow(all, 0, 1, tokens.rows() - 1)?;
    let out = layer.forward(&mut tape, &bound, cls, patches)?;
    let rep = tape.value(out.out).reshaped(vec![layer.dim])?;
    let maps = out.maps[0].iter().map(|m| tape.value(*m).clone()).collect();
    Ok((rep, maps))
}
