use rand::Rng;
use serde::{Deserialize, Serialize};

use super::class_attention::ClassAttention;
use super::grid::PatchGrid;
use super::layer::{AttentionKind, AttentionLayer, LayerOutput, INIT_STD};
use super::params::{normal_tensor, xavier_tensor, Bound, ParamId, ParamStore};
use super::trace::AttentionTrace;
use crate::data::patchify;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Self-attention blocks before the class-attention block.
pub const SELF_ATTENTION_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// How many blocks, from the shallowest, use LPA instead of vanilla attention.
    pub lpa_layers: usize,
    pub lambda0: f64,
    pub alpha: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch: 4,
            dim: 72,
            heads: 9,
            ffn_hidden: 288,
            lpa_layers: SELF_ATTENTION_LAYERS,
            lambda0: 0.02,
            alpha: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return Err(TensorError::Dimension {
                op: "backbone",
                msg: format!(
                    "{}×{} images do not split into {}-pixel patches",
                    self.image_height, self.image_width, self.patch
                ),
            });
        }
        PatchGrid::new(self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let s = tape.mul_row(n, bound[self.gamma])?;
        tape.add_row(s, bound[self.beta])
    }
}

#[derive(Debug, Clone)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Ffn {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), xavier_tensor(rng, dim, hidden)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{prefix}.w2"), xavier_tensor(rng, hidden, dim)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound[self.w1])?;
        let h = tape.add_row(h, bound[self.b1])?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, bound[self.w2])?;
        tape.add_row(o, bound[self.b2])
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    attn: AttentionLayer,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct ClassBlock {
    norm1: Norm,
    attn: ClassAttention,
    norm2: Norm,
    ffn: Ffn,
}

/// Patch embedding, five pre-norm self-attention blocks, one class-attention
/// block and a classifier head that grows as classes arrive.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    grid: PatchGrid,
    store: ParamStore,
    patch_w: ParamId,
    patch_b: ParamId,
    pos_embed: ParamId,
    cls_token: ParamId,
    blocks: Vec<Block>,
    class_block: ClassBlock,
    norm: Norm,
    head_w: ParamId,
    head_b: ParamId,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    pub representation: Var,
    /// Self-attention maps of every layer.
    pub layer_maps: Vec<LayerOutput>,
    /// `[image][head]` class-attention maps.
    pub class_maps: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[images × classes]`.
    pub logits: Tensor,
    /// `[images × d]` pre-classifier class tokens.
    pub representations: Tensor,
    /// One trace per image when requested, otherwise empty.
    pub traces: Vec<AttentionTrace>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.lpa_layers > SELF_ATTENTION_LAYERS {
            return Err(TensorError::Dimension {
                op: "backbone",
                msg: format!(
                    "{} LPA layers requested, only {SELF_ATTENTION_LAYERS} blocks",
                    config.lpa_layers
                ),
            });
        }
        let grid = config.grid()?;
        let d = config.dim;
        let mut store = ParamStore::new();
        let patch_w = store.add("patch_embed.weight", xavier_tensor(rng, config.patch_width(), d));
        let patch_b = store.add("patch_embed.bias", Tensor::zeros(&[d]));
        let pos_embed = store.add("pos_embed", normal_tensor(rng, &[grid.len(), d], INIT_STD));
        let cls_token = store.add("cls_token", normal_tensor(rng, &[1, d], INIT_STD));
        let mut blocks = Vec::with_capacity(SELF_ATTENTION_LAYERS);
        for l in 0..SELF_ATTENTION_LAYERS {
            let prefix = format!("blocks.{l}");
            let norm1 = Norm::new(&mut store, &format!("{prefix}.norm1"), d);
            let attn_prefix = format!("{prefix}.attn");
            let attn = if l < config.lpa_layers {
                AttentionLayer::new_lpa(
                    &mut store,
                    &attn_prefix,
                    d,
                    config.heads,
                    config.lambda0,
                    config.alpha,
                    rng,
                )?
            } else {
                AttentionLayer::new_vanilla(&mut store, &attn_prefix, d, config.heads, rng)?
            };
            let norm2 = Norm::new(&mut store, &format!("{prefix}.norm2"), d);
            let ffn = Ffn::new(&mut store, &format!("{prefix}.ffn"), d, config.ffn_hidden, rng);
            blocks.push(Block {
                norm1,
                attn,
                norm2,
                ffn,
            });
        }
        let class_block = ClassBlock {
            norm1: Norm::new(&mut store, "class_block.norm1", d),
            attn: ClassAttention::new(&mut store, "class_block.attn", d, config.heads, rng)?,
            norm2: Norm::new(&mut store, "class_block.norm2", d),
            ffn: Ffn::new(&mut store, "class_block.ffn", d, config.ffn_hidden, rng),
        };
        let norm = Norm::new(&mut store, "norm", d);
        let head_w = store.add("head.weight", Tensor::new(vec![d, 0], vec![])?);
        let head_b = store.add("head.bias", Tensor::new(vec![0], vec![])?);
        Ok(Self {
            config,
            grid,
            store,
            patch_w,
            patch_b,
            pos_embed,
            cls_token,
            blocks,
            class_block,
            norm,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_classes(&self) -> usize {
        self.store.get(self.head_w).cols()
    }

    pub fn attention_layer(&self, l: usize) -> &AttentionLayer {
        &self.blocks[l].attn
    }

    pub fn class_attention(&self) -> &ClassAttention {
        &self.class_block.attn
    }

    pub fn layer_kinds(&self) -> Vec<AttentionKind> {
        self.blocks.iter().map(|b| b.attn.kind()).collect()
    }

    /// Appends `count` classifier columns (normal init, zero bias).
    pub fn extend_classes<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Result<()> {
        let d = self.config.dim;
        let old_w = self.store.get(self.head_w);
        let old_c = old_w.cols();
        let new_c = old_c + count;
        let fresh = normal_tensor(rng, &[d, count.max(1)], INIT_STD);
        let mut w = Vec::with_capacity(d * new_c);
        for r in 0..d {
            w.extend_from_slice(&old_w.data()[r * old_c..(r + 1) * old_c]);
            if count > 0 {
                w.extend_from_slice(fresh.row(r));
            }
        }
        let mut b = self.store.get(self.head_b).data().to_vec();
        b.resize(new_c, 0.0);
        self.store.replace(self.head_w, Tensor::new(vec![d, new_c], w)?);
        self.store.replace(self.head_b, Tensor::new(vec![new_c], b)?);
        Ok(())
    }

    fn embed_input(&self, images: &[&Tensor]) -> Result<Tensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(images.len() * self.grid.len() * c.patch_width());
        for img in images {
            if img.shape() != [c.channels, c.image_height, c.image_width] {
                return Err(TensorError::Dimension {
                    op: "backbone_forward",
                    msg: format!(
                        "image {:?}, model expects {}×{}×{}",
                        img.shape(),
                        c.channels,
                        c.image_height,
                        c.image_width
                    ),
                });
            }
            data.extend_from_slice(patchify(img, c.patch)?.data());
        }
        Tensor::new(vec![images.len() * self.grid.len(), c.patch_width()], data)
    }

    /// Records the forward pass of a batch on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, images: &[&Tensor]) -> Result<TapeForward> {
        let b = images.len();
        if b == 0 {
            return Err(TensorError::Dimension {
                op: "backbone_forward",
                msg: "empty batch".into(),
            });
        }
        let n = self.grid.len();
        let patches = tape.constant(self.embed_input(images)?)?;
        let needs_encodings = self.blocks.iter().any(|blk| blk.attn.kind() == AttentionKind::Lpa);
        let encodings = if needs_encodings {
            Some(tape.constant(self.grid.encodings_flat())?)
        } else {
            None
        };

        let x = tape.matmul(patches, bound[self.patch_w])?;
        let x = tape.add_row(x, bound[self.patch_b])?;
        let pos_index: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = tape.gather_rows(bound[self.pos_embed], &pos_index)?;
        let mut x = tape.add(x, pos)?;

        let mut layer_maps = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = blk.norm1.forward(tape, bound, x)?;
            let att = blk.attn.forward(tape, bound, h, b, encodings)?;
            x = tape.add(x, att.out)?;
            let h = blk.norm2.forward(tape, bound, x)?;
            let f = blk.ffn.forward(tape, bound, h)?;
            x = tape.add(x, f)?;
            layer_maps.push(att);
        }

        let cls = tape.gather_rows(bound[self.cls_token], &vec![0; b])?;
        let cb = &self.class_block;
        // One LayerNorm over [class; patches] rows, split back afterwards.
        let joined = tape.concat(&[cls, x], 0)?;
        let normed = cb.norm1.forward(tape, bound, joined)?;
        let cls_n = tape.narrow(normed, 0, 0, b)?;
        let patches_n = tape.narrow(normed, 0, b, b * n)?;
        let ca = cb.attn.forward(tape, bound, cls_n, patches_n)?;
        let cls = tape.add(cls, ca.out)?;
        let h = cb.norm2.forward(tape, bound, cls)?;
        let f = cb.ffn.forward(tape, bound, h)?;
        let cls = tape.add(cls, f)?;

        let representation = self.norm.forward(tape, bound, cls)?;
        let logits = if self.num_classes() == 0 {
            tape.constant(Tensor::new(vec![b, 0], vec![])?)?
        } else {
            let l = tape.matmul(representation, bound[self.head_w])?;
            tape.add_row(l, bound[self.head_b])?
        };
        Ok(TapeForward {
            logits,
            representation,
            layer_maps,
            class_maps: ca.maps,
        })
    }

    /// Gradient-free forward over a batch.
    pub fn forward(&self, images: &[&Tensor], capture_trace: bool) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape)?;
        let fwd = self.forward_tape(&mut tape, &bound, images)?;
        let traces = if capture_trace {
            collect_traces(&tape, &fwd)
        } else {
            Vec::new()
        };
        Ok(ForwardOutput {
            logits: tape.value(fwd.logits).clone(),
            representations: tape.value(fwd.representation).clone(),
            traces,
        })
    }

    /// Single-image forward: `(logits [C], representation [d], trace)`.
    pub fn forward_one(&self, image: &Tensor, capture_trace: bool) -> Result<(Tensor, Tensor, Option<AttentionTrace>)> {
        let mut out = self.forward(&[image], capture_trace)?;
        let logits = out.logits.reshaped(vec![out.logits.cols()])?;
        let rep = out.representations.reshaped(vec![self.config.dim])?;
        Ok((logits, rep, out.traces.pop()))
    }

    /// Representations of many images, evaluated in chunks.
    pub fn representations(&self, images: &[&Tensor], chunk: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.config.dim);
        for part in images.chunks(chunk.max(1)) {
            data.extend_from_slice(self.forward(part, false)?.representations.data());
        }
        Tensor::new(vec![images.len(), self.config.dim], data)
    }
}

pub fn collect_traces(tape: &Tape, fwd: &TapeForward) -> Vec<AttentionTrace> {
    let images = fwd.class_maps.len();
    (0..images)
        .map(|b| AttentionTrace {
            layers: fwd.layer_maps.iter().map(|layer| layer.image_maps(tape, b)).collect(),
            class_attention: fwd.class_maps[b].iter().map(|m| tape.value(*m).clone()).collect(),
        })
        .collect()
}
