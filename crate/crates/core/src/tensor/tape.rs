use super::heads::{self, HeadLayout};
use super::{check_finite, Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a · b`, or `a · bᵀ` when `trans_b`.
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Multiply by a 1-element tensor that is itself on the tape.
    ScaleBy {
        x: Var,
        s: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    /// Multi-head `softmax(λ_h S + B_h)` maps, or `softmax(S)` without a mix.
    AttentionProbs {
        q: Var,
        k: Var,
        mix: Option<(Var, Var)>,
        layout: HeadLayout,
        scale: f64,
        /// Scaled scores `S`, kept only when mixing.
        scores: Vec<f64>,
    },
    AttentionMix {
        probs: Var,
        v: Var,
        layout: HeadLayout,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        p: Var,
        q: Var,
        temperature: f64,
        log_p: Vec<f64>,
        log_q: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops. Nodes are appended as ops run, so the
/// record is topologically sorted by construction.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing flowed back.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dim_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Dimension { op, msg: msg.into() }
}

/// `c (+)= a · b` with explicit strides, backed by a blocked dgemm kernel.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were checked above and the strides address
    // exactly the m×k, k×n and m×n extents of the three buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise log-softmax of `x / temperature`.
fn log_softmax_rows(data: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let lse = src.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s / temperature - lse;
        }
    }
    out
}

/// (outer, axis size, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, value.data())?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. It participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        let needs = tensor.requires_grad();
        let mut value = tensor.clone();
        value.set_grad(None)?;
        self.push(value, Op::Leaf, needs, "leaf")
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        let mut value = tensor;
        value.set_requires_grad(false);
        value.set_grad(None)?;
        self.push(value, Op::Leaf, false, "constant")
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err(op, av, bv));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != kb {
            return Err(shape_err(op, av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, needs, op)
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), needs, "scale")
    }

    /// `s · x` where `s` is a single-element tensor on the tape.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(dim_err(
                "scale_by",
                format!("factor must have one element, has shape {:?}", sv.shape()),
            ));
        }
        let factor = sv.data()[0];
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x, s]);
        self.push(value, Op::ScaleBy { x, s }, needs, "scale_by")
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let cols = xv.cols();
        if rv.len() != cols || xv.is_empty() {
            return Err(shape_err(name, xv, rv));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, &r) in chunk.iter_mut().zip(rv.data()) {
                *d = f(*d, r);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x, row]);
        self.push(value, op, needs, name)
    }

    /// Adds a vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow { x, row })
    }

    /// Multiplies every row of `x` elementwise by a vector of length `cols`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow { x, row })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        self.push(value, Op::Gelu(x), needs, "gelu")
    }

    /// Normalises each row over the last dimension (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if cols == 0 || xv.is_empty() {
            return Err(dim_err("layer_norm", "empty last dimension"));
        }
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (src, dst) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x]);
        self.push(value, Op::LayerNorm { x, inv_std }, needs, "layer_norm")
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(dim_err("mean", "empty tensor"));
        }
        let m = xv.sum() / xv.len() as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), needs, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, "sum")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = self.needs(parts);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
            "concat",
        )
    }

    /// Slice `[start, start+len)` along `axis`. Inverse of [`Tape::concat`].
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(dim_err(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(new_shape, out)?,
            Op::Narrow { x, axis, start },
            needs,
            "narrow",
        )
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        if start != self.shape(x).get(axis).copied().unwrap_or(0) {
            return Err(dim_err("split", "sizes do not cover the axis"));
        }
        Ok(out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(dim_err("transpose", format!("expected rank 2, got {:?}", xv.shape())));
        }
        let value = xv.transpose2();
        let needs = self.needs(&[x]);
        self.push(value, Op::Transpose(x), needs, "transpose")
    }

    /// Selects rows (first axis of a rank-2 tensor) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(dim_err("gather_rows", format!("expected rank 2, got {:?}", xv.shape())));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        if index.is_empty() {
            return Err(dim_err("gather_rows", "empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(xv.row(i));
        }
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(vec![index.len(), cols], out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape.to_vec())?;
        let needs = self.needs(&[x]);
        self.push(value, Op::Reshape(x), needs, "reshape")
    }

    fn head_layout(&self, op: &'static str, x: Var, images: usize, heads: usize) -> Result<HeadLayout> {
        let shape = self.shape(x);
        if shape.len() != 2 || images == 0 || heads == 0 || shape[0] % images != 0 || shape[1] % heads != 0 {
            return Err(dim_err(
                op,
                format!("{shape:?} does not split into {images} images and {heads} heads"),
            ));
        }
        Ok(HeadLayout {
            images,
            heads,
            tokens: shape[0] / images,
            dim: shape[1],
        })
    }

    /// Post-softmax maps of every image and head, stacked as
    /// `images · heads` blocks of `n×n` (block `b·heads + h`).
    ///
    /// Scores are `scale · Q_h K_hᵀ`. With `mix = Some((λ, bias))`, where `λ`
    /// holds one value per head and `bias` is `heads × n²`, the logits become
    /// `λ_h S + bias_h`.
    pub fn attention_probs(
        &mut self,
        q: Var,
        k: Var,
        images: usize,
        heads: usize,
        scale: f64,
        mix: Option<(Var, Var)>,
    ) -> Result<Var> {
        let layout = self.head_layout("attention_probs", q, images, heads)?;
        if self.shape(k) != self.shape(q) {
            return Err(shape_err("attention_probs", self.value(q), self.value(k)));
        }
        let n = layout.tokens;
        let mut s = vec![0.0; images * heads * n * n];
        heads::scores(layout, self.value(q).data(), self.value(k).data(), scale, &mut s);
        let mut logits = s.clone();
        let mut inputs = vec![q, k];
        if let Some((lambda, bias)) = mix {
            let (lv, bv) = (self.value(lambda), self.value(bias));
            if lv.len() != heads || bv.len() != heads * n * n {
                return Err(shape_err("attention_probs", lv, bv));
            }
            for b in 0..images {
                for h in 0..heads {
                    let blk = layout.block(b, h);
                    let lam = lv.data()[h];
                    let bias_h = &bv.data()[h * n * n..][..n * n];
                    for (x, &c) in logits[blk..blk + n * n].iter_mut().zip(bias_h) {
                        *x = lam * *x + c;
                    }
                }
            }
            inputs.extend([lambda, bias]);
        }
        check_finite("attention_probs", &logits)?;
        heads::softmax_in_place(&mut logits, n);
        let value = Tensor::new(vec![images * heads * n, n], logits)?;
        let needs = self.needs(&inputs);
        let scores = if mix.is_some() { s } else { Vec::new() };
        self.push(
            value,
            Op::AttentionProbs {
                q,
                k,
                mix,
                layout,
                scale,
                scores,
            },
            needs,
            "attention_probs",
        )
    }

    /// Applies maps from [`Tape::attention_probs`] to `v`; head `h` fills
    /// output columns `h·dh .. (h+1)·dh`.
    pub fn attention_mix(&mut self, probs: Var, v: Var, images: usize, heads: usize) -> Result<Var> {
        let layout = self.head_layout("attention_mix", v, images, heads)?;
        let n = layout.tokens;
        if self.shape(probs) != [images * heads * n, n] {
            return Err(shape_err("attention_mix", self.value(probs), self.value(v)));
        }
        let mut out = vec![0.0; self.value(v).len()];
        heads::mix(layout, self.value(probs).data(), self.value(v).data(), &mut out);
        let value = Tensor::new(self.shape(v).to_vec(), out)?;
        let needs = self.needs(&[probs, v]);
        self.push(value, Op::AttentionMix { probs, v, layout }, needs, "attention_mix")
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if cols == 0 || xv.is_empty() {
            return Err(dim_err("softmax_rows", "empty last dimension"));
        }
        check_finite("softmax_rows", xv.data())?;
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x]);
        self.push(value, Op::SoftmaxRows(x), needs, "softmax_rows")
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(dim_err(
                "cross_entropy",
                format!("logits {:?} for {} labels", lv.shape(), labels.len()),
            ));
        }
        let cols = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(dim_err("cross_entropy", format!("label {bad} out of {cols} classes")));
        }
        let logp = log_softmax_rows(lv.data(), cols, 1.0);
        let loss = -labels.iter().enumerate().map(|(r, &l)| logp[r * cols + l]).sum::<f64>() / labels.len() as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let needs = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            "cross_entropy",
        )
    }

    /// Row-averaged KL(P ‖ Q) with P = softmax(p/T), Q = softmax(q/T).
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, temperature: f64) -> Result<Var> {
        let (pv, qv) = (self.value(p_logits), self.value(q_logits));
        if pv.shape() != qv.shape() || pv.is_empty() {
            return Err(shape_err("kl_divergence", pv, qv));
        }
        if !(temperature > 0.0) {
            return Err(TensorError::Contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let cols = pv.cols();
        let rows = pv.rows();
        let lp = log_softmax_rows(pv.data(), cols, temperature);
        let lq = log_softmax_rows(qv.data(), cols, temperature);
        let kl = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>() / rows as f64;
        let needs = self.needs(&[p_logits, q_logits]);
        self.push(
            Tensor::scalar(kl),
            Op::KlDivergence {
                p: p_logits,
                q: q_logits,
                temperature,
                log_p: lp,
                log_q: lq,
            },
            needs,
            "kl_divergence",
        )
    }

    /// Reverse sweep from a one-element `loss`. The tape itself is left
    /// untouched, so repeated calls give bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                // C = A·B:   dA = G·Bᵀ, dB = Aᵀ·G
                // C = A·Bᵀ:  dA = G·B,  dB = Gᵀ·A
                self.accumulate(grads, *a, |da| {
                    gemm(m, n, k, g, false, bv.data(), !trans_b, da, true);
                });
                self.accumulate(grads, *b, |db| {
                    if *trans_b {
                        gemm(n, m, k, g, true, av.data(), false, db, true);
                    } else {
                        gemm(k, m, n, av.data(), true, g, false, db, true);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor));
            }
            Op::ScaleBy { x, s } => {
                let factor = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor));
                self.accumulate(grads, *s, |d| {
                    d[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
                });
            }
            Op::AddRow { x, row } => {
                let cols = out.cols();
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *row, |d| {
                    for chunk in g.chunks(cols) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::MulRow { x, row } => {
                let cols = out.cols();
                let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                self.accumulate(grads, *x, |d| {
                    for (dc, gc) in d.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, g), r) in dc.iter_mut().zip(gc).zip(rv) {
                            *d += g * r;
                        }
                    }
                });
                self.accumulate(grads, *row, |d| {
                    for (gc, xc) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for ((d, g), x) in d.iter_mut().zip(gc).zip(xc) {
                            *d += g * x;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_grad(*x);
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = out.cols();
                let y = out.data();
                self.accumulate(grads, *x, |d| {
                    for (r, ((dc, gc), yc)) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)).enumerate() {
                        let mean_g = gc.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gc.iter().zip(yc).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                        for ((d, g), y) in dc.iter_mut().zip(gc).zip(yc) {
                            *d += inv_std[r] * (g - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let size = self.value(*p).shape()[*axis];
                    self.accumulate(grads, *p, |d| {
                        let chunk = size * inner;
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[src..src + chunk])
                                .for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += size;
                }
            }
            Op::Narrow { x, axis, start } => {
                let len = out.shape()[*axis];
                let (outer, size, inner) = split_axis(self.value(*x).shape(), *axis);
                self.accumulate(grads, *x, |d| {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let dst = (o * size + start) * inner;
                        d[dst..dst + chunk]
                            .iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                // out is r×c, input is c×r
                self.accumulate(grads, *x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let cols = out.cols();
                self.accumulate(grads, *x, |d| {
                    for (k, &i) in index.iter().enumerate() {
                        d[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::SoftmaxRows(x) => {
                let cols = out.cols();
                let y = out.data();
                self.accumulate(grads, *x, |d| {
                    for ((dc, gc), yc) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot = gc.iter().zip(yc).map(|(g, y)| g * y).sum::<f64>();
                        for ((d, g), y) in dc.iter_mut().zip(gc).zip(yc) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::AttentionProbs {
                q,
                k,
                mix,
                layout,
                scale,
                scores,
            } => {
                let n = layout.tokens;
                let mut ds = heads::softmax_backward(out.data(), g, n);
                if let Some((lambda, bias)) = mix {
                    let lv = self.value(*lambda).data();
                    self.accumulate(grads, *lambda, |d| {
                        for b in 0..layout.images {
                            for (h, dh) in d.iter_mut().enumerate() {
                                let blk = layout.block(b, h);
                                *dh += ds[blk..blk + n * n]
                                    .iter()
                                    .zip(&scores[blk..blk + n * n])
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                            }
                        }
                    });
                    self.accumulate(grads, *bias, |d| {
                        for b in 0..layout.images {
                            for (h, dh) in d.chunks_mut(n * n).enumerate() {
                                let blk = layout.block(b, h);
                                dh.iter_mut().zip(&ds[blk..blk + n * n]).for_each(|(d, g)| *d += g);
                            }
                        }
                    });
                    for b in 0..layout.images {
                        for (h, &lam) in lv.iter().enumerate() {
                            let blk = layout.block(b, h);
                            ds[blk..blk + n * n].iter_mut().for_each(|x| *x *= lam);
                        }
                    }
                }
                let (qv, kv) = (self.value(*q).data(), self.value(*k).data());
                let mut dq = self.nodes[q.0].needs_grad.then(|| vec![0.0; qv.len()]);
                let mut dk = self.nodes[k.0].needs_grad.then(|| vec![0.0; kv.len()]);
                heads::scores_backward(*layout, qv, kv, &ds, *scale, dq.as_deref_mut(), dk.as_deref_mut());
                if let Some(dq) = dq {
                    self.accumulate(grads, *q, |d| d.iter_mut().zip(&dq).for_each(|(d, g)| *d += g));
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, |d| d.iter_mut().zip(&dk).for_each(|(d, g)| *d += g));
                }
            }
            Op::AttentionMix { probs, v, layout } => {
                let (pv, vv) = (self.value(*probs).data(), self.value(*v).data());
                let mut dp = self.nodes[probs.0].needs_grad.then(|| vec![0.0; pv.len()]);
                let mut dv = self.nodes[v.0].needs_grad.then(|| vec![0.0; vv.len()]);
                heads::mix_backward(*layout, pv, vv, g, dp.as_deref_mut(), dv.as_deref_mut());
                if let Some(dp) = dp {
                    self.accumulate(grads, *probs, |d| d.iter_mut().zip(&dp).for_each(|(d, g)| *d += g));
                }
                if let Some(dv) = dv {
                    self.accumulate(grads, *v, |d| d.iter_mut().zip(&dv).for_each(|(d, g)| *d += g));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |d| {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let target = if c == l { 1.0 } else { 0.0 };
                            d[r * cols + c] += scale * (probs[r * cols + c] - target);
                        }
                    }
                });
            }
            Op::KlDivergence {
                p,
                q,
                temperature,
                log_p,
                log_q,
            } => {
                let cols = self.value(*p).cols();
                let rows = self.value(*p).rows();
                let scale = g[0] / (rows as f64 * temperature);
                self.accumulate(grads, *q, |d| {
                    for ((d, lq), lp) in d.iter_mut().zip(log_q).zip(log_p) {
                        *d += scale * (lq.exp() - lp.exp());
                    }
                });
                self.accumulate(grads, *p, |d| {
                    for ((dc, pc), qc) in d.chunks_mut(cols).zip(log_p.chunks(cols)).zip(log_q.chunks(cols)) {
                        let expect = pc.iter().zip(qc).map(|(lp, lq)| lp.exp() * (lp - lq)).sum::<f64>();
                        for ((d, lp), lq) in dc.iter_mut().zip(pc).zip(qc) {
                            *d += scale * lp.exp() * (lp - lq - expect);
                        }
                    }
                });
            }
        }
    }
}
