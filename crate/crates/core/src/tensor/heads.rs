//! Batched multi-head attention kernels.
//!
//! `q`, `k`, `v` hold `images` stacked blocks of `n` token rows and `d`
//! columns; head `h` owns columns `h·dh .. (h+1)·dh`. Attention maps are
//! stored as `images · heads` stacked `n×n` blocks, block `b·heads + h`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadLayout {
    pub images: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl HeadLayout {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn map_len(&self) -> usize {
        self.tokens * self.tokens
    }

    /// Offset of the map block of image `b`, head `h`.
    pub fn block(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.map_len()
    }
}

/// A matrix view into a flat buffer: element `(r, c)` sits at
/// `offset + r·row_stride + c·col_stride`.
#[derive(Debug, Clone, Copy)]
struct View {
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl View {
    fn t(self) -> View {
        View {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0
            || self.cols == 0
            || self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < len
    }
}

/// `c = alpha · a·b + beta · c` on strided views.
fn gemm(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    assert!(av.fits(a.len()) && bv.fits(b.len()) && cv.fits(c.len()));
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: the asserts above keep every addressed element inside the
    // three slices, and `c` is borrowed mutably so it cannot alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

impl HeadLayout {
    /// Rows of image `b`, columns of head `h` in a token matrix.
    fn head(&self, b: usize, h: usize) -> View {
        View {
            offset: b * self.tokens * self.dim + h * self.head_dim(),
            rows: self.tokens,
            cols: self.head_dim(),
            row_stride: self.dim,
            col_stride: 1,
        }
    }

    fn map(&self, b: usize, h: usize) -> View {
        View {
            offset: self.block(b, h),
            rows: self.tokens,
            cols: self.tokens,
            row_stride: self.tokens,
            col_stride: 1,
        }
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + use<> {
        let heads = self.heads;
        (0..self.images).flat_map(move |b| (0..heads).map(move |h| (b, h)))
    }
}

/// `s[b,h] = scale · Q_bh K_bhᵀ` for every image and head.
pub(crate) fn scores(l: HeadLayout, q: &[f64], k: &[f64], scale: f64, s: &mut [f64]) {
    for (b, h) in l.pairs() {
        gemm(scale, q, l.head(b, h), k, l.head(b, h).t(), 0.0, s, l.map(b, h));
    }
}

/// Row softmax of every `n`-wide row, in place.
pub(crate) fn softmax_in_place(x: &mut [f64], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// `o[b, :, h] = P_bh · V_bh`.
pub(crate) fn mix(l: HeadLayout, p: &[f64], v: &[f64], o: &mut [f64]) {
    for (b, h) in l.pairs() {
        gemm(1.0, p, l.map(b, h), v, l.head(b, h), 0.0, o, l.head(b, h));
    }
}

/// Gradients of [`mix`]: `dP_bh += dO_bh V_bhᵀ`, `dV_bh += P_bhᵀ dO_bh`.
pub(crate) fn mix_backward(
    l: HeadLayout,
    p: &[f64],
    v: &[f64],
    g: &[f64],
    mut dp: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    for (b, h) in l.pairs() {
        if let Some(dp) = dp.as_deref_mut() {
            gemm(1.0, g, l.head(b, h), v, l.head(b, h).t(), 1.0, dp, l.map(b, h));
        }
        if let Some(dv) = dv.as_deref_mut() {
            gemm(1.0, p, l.map(b, h).t(), g, l.head(b, h), 1.0, dv, l.head(b, h));
        }
    }
}

/// Softmax backward over every row: `dx = y ⊙ (g − ⟨g, y⟩)`.
pub(crate) fn softmax_backward(y: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((dc, gc), yc) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
        let dot = gc.iter().zip(yc).map(|(g, y)| g * y).sum::<f64>();
        for ((d, g), y) in dc.iter_mut().zip(gc).zip(yc) {
            *d = y * (g - dot);
        }
    }
    dx
}

/// Gradients of [`scores`] from `ds`, the gradient of the scaled scores.
pub(crate) fn scores_backward(
    l: HeadLayout,
    q: &[f64],
    k: &[f64],
    ds: &[f64],
    scale: f64,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    for (b, h) in l.pairs() {
        if let Some(dq) = dq.as_deref_mut() {
            gemm(scale, ds, l.map(b, h), k, l.head(b, h), 1.0, dq, l.head(b, h));
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(scale, ds, l.map(b, h).t(), q, l.head(b, h), 1.0, dk, l.head(b, h));
        }
    }
}
