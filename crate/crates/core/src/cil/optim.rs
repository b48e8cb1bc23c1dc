use crate::attention::ParamStore;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay applied to weight matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    step: i32,
}

/// Weight matrices are named `...weight`, `...w_q`, `...w1` and so on.
fn decays(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|last| last.starts_with('w'))
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            decay: store.iter().map(|(n, _)| decays(n)).collect(),
            step: 0,
        }
    }

    /// One update from the gradients held in the store; parameters without a
    /// gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Training("parameter set changed under the optimizer".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (_, t)) in store.iter_mut().enumerate() {
            let Some(g) = t.take_grad() else { continue };
            if g.len() != self.m[k].len() {
                return Err(Error::Training("gradient shape changed under the optimizer".into()));
            }
            let decay = if self.decay[k] { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= update + decay * *w;
            }
            if !t.is_finite() {
                return Err(Error::Training("non-finite parameter after update".into()));
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear ramp over the first `warmup` steps, cosine decay over the rest.
pub fn warmup_cosine_lr(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        cosine_lr(base, step - warmup, total.saturating_sub(warmup))
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(mut g) = t.take_grad() {
                g.iter_mut().for_each(|v| *v *= k);
                t.set_grad(Some(g)).expect("same length");
            }
        }
    }
    norm
}
