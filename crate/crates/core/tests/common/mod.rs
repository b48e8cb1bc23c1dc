#![allow(dead_code)]

pub mod grad;
pub mod oracles;

use lpa_core::attention::{Backbone, BackboneConfig, ParamId};
use lpa_core::tensor::{finite_diff_at, Tape, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// 8×8 single-channel images cut into 2×2 patches: a 4×4 patch grid.
pub fn toy_config(lpa_layers: usize) -> BackboneConfig {
    BackboneConfig {
        image_height: 8,
        image_width: 8,
        channels: 1,
        patch: 2,
        dim: 18,
        heads: 9,
        ffn_hidden: 12,
        lpa_layers,
        lambda0: 0.02,
        alpha: 1.0,
    }
}

/// Replaces every parameter by uniform noise of the given scale, so that
/// gradient checks do not sit at the near-degenerate std-0.02 init.
pub fn scramble(model: &mut Backbone, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = model.store().ids().collect();
    for id in ids {
        let shape = model.store().get(id).shape().to_vec();
        let t = random_tensor(rng, &shape, scale);
        model.store_mut().replace(id, t);
    }
}

fn ce_loss(model: &Backbone, images: &[&Tensor], labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let bound = model.store().bind_frozen(&mut tape).unwrap();
    let fwd = model.forward_tape(&mut tape, &bound, images).unwrap();
    let loss = tape.cross_entropy(fwd.logits, labels).unwrap();
    tape.value(loss).data()[0]
}

/// Worst per-parameter relative error between tape gradients of a
/// cross-entropy loss and central differences at `per_param` sampled
/// coordinates of every parameter tensor.
pub fn backbone_grad_error(
    model: &Backbone,
    images: &[&Tensor],
    labels: &[usize],
    per_param: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape).unwrap();
    let fwd = model.forward_tape(&mut tape, &bound, images).unwrap();
    let loss = tape.cross_entropy(fwd.logits, labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for id in model.store().ids() {
        let param = model.store().get(id);
        if param.is_empty() {
            continue;
        }
        let k = per_param.min(param.len());
        let coords: Vec<usize> = sample(rng, param.len(), k).into_vec();
        let analytic_full = grads.get_or_zeros(bound[id], param);
        let analytic: Vec<f64> = coords.iter().map(|&i| analytic_full.data()[i]).collect();
        let numeric = finite_diff_at(
            |probe| {
                let mut m = model.clone();
                m.store_mut().replace(id, probe.clone());
                Ok(ce_loss(&m, images, labels))
            },
            param,
            &coords,
            1e-5,
        )
        .unwrap();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        // Sub-1e-7 gradients are at the level of finite-difference roundoff.
        let err = diff / scale.max(1e-7);
        if err > worst {
            worst = err;
        }
    }
    worst
}
