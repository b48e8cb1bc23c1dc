use crate::tensor::{Result, Tensor, TensorError};

/// Post-softmax attention maps captured from one image's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// `[layer][head]`, each N×N, for the self-attention blocks.
    pub layers: Vec<Vec<Tensor>>,
    /// `[head]`, each 1×(N+1), for the class-attention block. Column 0 is
    /// the class token's attention to itself.
    pub class_attention: Vec<Tensor>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of patches, taken from the first stored map.
    pub fn num_patches(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map(Tensor::rows)
            .or_else(|| self.class_attention.first().map(|m| m.cols() - 1))
            .unwrap_or(0)
    }

    /// Mean over heads of one self-attention layer.
    pub fn head_average(&self, layer: usize) -> Result<Tensor> {
        let heads = self.layers.get(layer).ok_or_else(|| TensorError::Dimension {
            op: "head_average",
            msg: format!("layer {layer} of {}", self.layers.len()),
        })?;
        average(heads)
    }

    /// Class-token row averaged over heads, length N+1.
    pub fn class_row_average(&self) -> Result<Tensor> {
        average(&self.class_attention)
    }

    /// Worst deviation of any stored row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .chain(&self.class_attention)
            .flat_map(|m| {
                let cols = m.cols();
                m.data()
                    .chunks(cols)
                    .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

fn average(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| TensorError::Dimension {
        op: "head_average",
        msg: "no heads".into(),
    })?;
    let mut acc = vec![0.0; first.len()];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "head_average",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        acc.iter_mut().zip(m.data()).for_each(|(a, v)| *a += v);
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape().to_vec(), acc)
}
