use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    /// Replace every head-averaged map `A` by `0.5·A + 0.5·I` before
    /// multiplying. Off by default.
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMap {
    pub from_layer: usize,
    pub to_layer: usize,
    /// Cumulative products, one per layer in `from..=to`, each N×N row-major.
    pub cumulative: Vec<Vec<f64>>,
    pub num_patches: usize,
    /// Class-token attention to the patches pushed through the chain; length N.
    pub class_heat: Vec<f64>,
}

impl RolloutMap {
    pub fn last(&self) -> &[f64] {
        self.cumulative.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub(crate) fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `Ã(j) = A(j)`, `Ã(i) = A(i)·Ã(i−1)` over head-averaged layer maps, then
/// the class-attention row (patch columns) times `Ã(to)`.
pub fn attention_rollout(
    trace: &AttentionTrace,
    from_layer: usize,
    to_layer: usize,
    options: RolloutOptions,
) -> Result<RolloutMap> {
    if from_layer > to_layer || to_layer >= trace.num_layers() {
        return Err(Error::Metrics(format!(
            "layer range {from_layer}..={to_layer} invalid for {} layers",
            trace.num_layers()
        )));
    }
    let n = trace.num_patches();
    let mut cumulative: Vec<Vec<f64>> = Vec::with_capacity(to_layer - from_layer + 1);
    for l in from_layer..=to_layer {
        let mut a = trace.head_average(l)?.into_data();
        if options.residual {
            for (k, v) in a.iter_mut().enumerate() {
                *v = 0.5 * *v + if k / n == k % n { 0.5 } else { 0.0 };
            }
        }
        let next = match cumulative.last() {
            None => a,
            Some(prev) => matmul_square(&a, prev, n),
        };
        cumulative.push(next);
    }
    let class_heat = if trace.class_attention.is_empty() {
        Vec::new()
    } else {
        let row = trace.class_row_average()?;
        if row.cols() != n + 1 {
            return Err(Error::Metrics(format!(
                "class row has {} entries, expected {}",
                row.cols(),
                n + 1
            )));
        }
        let patches = &row.data()[1..];
        let last = cumulative.last().expect("non-empty range");
        (0..n)
            .map(|j| (0..n).map(|i| patches[i] * last[i * n + j]).sum())
            .collect()
    };
    Ok(RolloutMap {
        from_layer,
        to_layer,
        cumulative,
        num_patches: n,
        class_heat,
    })
}
