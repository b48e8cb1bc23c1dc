mod common;

use common::{backbone_grad_error, random_tensor, rng, scramble, toy_config};
use lpa_core::attention::{
    checkpoint, class_attention_forward, init_positional_vectors, lpa_map, vanilla_scores, AttentionLayer, Backbone,
    ClassAttention, ParamStore, PatchGrid, HEAD_OFFSETS,
};
use lpa_core::tensor::{finite_diff, relative_error, Tape, Tensor};

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone()).unwrap();
    let s = tape.softmax_rows(v).unwrap();
    tape.value(s).clone()
}

fn single_layer(dim: usize, heads: usize, lpa: bool, seed: u64) -> (ParamStore, AttentionLayer) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = if lpa {
        AttentionLayer::new_lpa(&mut store, "l", dim, heads, 0.02, 1.0, &mut r).unwrap()
    } else {
        AttentionLayer::new_vanilla(&mut store, "l", dim, heads, &mut r).unwrap()
    };
    (store, layer)
}

fn run_layer(store: &ParamStore, layer: &AttentionLayer, x: &Tensor, grid: &PatchGrid) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let r = tape.constant(grid.encodings_flat()).unwrap();
    let out = layer.forward(&mut tape, &bound, xv, 1, Some(r)).unwrap();
    let maps = out.image_maps(&tape, 0);
    (tape.value(out.out).clone(), maps)
}

#[test]
fn scores_of_zero_input_are_zero() {
    let (store, layer) = single_layer(6, 3, false, 1);
    let a = vanilla_scores(&Tensor::zeros(&[4, 6]), &layer, &store, 2).unwrap();
    assert!(a.data().iter().all(|v| *v == 0.0));
}

#[test]
fn scores_hand_example() {
    let (mut store, layer) = single_layer(2, 1, false, 1);
    store.replace(layer.w_q(), Tensor::eye(2));
    store.replace(layer.w_k(), Tensor::eye(2));
    let a = vanilla_scores(&Tensor::eye(2), &layer, &store, 0).unwrap();
    let s = 1.0 / 2f64.sqrt();
    assert!(a.max_abs_diff(&Tensor::from_rows(&[vec![s, 0.0], vec![0.0, s]]).unwrap()) < 1e-15);
}

#[test]
fn scores_match_double_loop() {
    let (store, layer) = single_layer(12, 3, false, 4);
    let mut r = rng(9);
    let x = random_tensor(&mut r, &[5, 12], 1.0);
    let (wq, wk) = (store.get(layer.w_q()), store.get(layer.w_k()));
    let dh = 4;
    for h in 0..3 {
        let a = vanilla_scores(&x, &layer, &store, h).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for c in h * dh..(h + 1) * dh {
                    let q: f64 = (0..12).map(|m| x.at(i, m) * wq.at(m, c)).sum();
                    let k: f64 = (0..12).map(|m| x.at(j, m) * wk.at(m, c)).sum();
                    acc += q * k;
                }
                assert!((a.at(i, j) - acc / (dh as f64).sqrt()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn scores_reject_wrong_width() {
    let (store, layer) = single_layer(6, 3, false, 1);
    assert!(vanilla_scores(&Tensor::zeros(&[4, 5]), &layer, &store, 0).is_err());
}

#[test]
fn lpa_map_reduces_to_softmax() {
    let grid = PatchGrid::new(3, 3).unwrap();
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[9, 9], 3.0);
    let m = lpa_map(&a, &grid, 1.0, [0.0; 3]).unwrap();
    assert!(m.max_abs_diff(&softmax_rows(&a)) < 1e-12);
}

#[test]
fn lpa_map_ignores_content_at_zero_lambda() {
    let grid = PatchGrid::new(3, 3).unwrap();
    let mut r = rng(3);
    let a = random_tensor(&mut r, &[9, 9], 3.0);
    let b = random_tensor(&mut r, &[9, 9], 3.0);
    let v = [-0.7, 1.2, -0.4];
    let (ma, mb) = (lpa_map(&a, &grid, 0.0, v).unwrap(), lpa_map(&b, &grid, 0.0, v).unwrap());
    assert!(ma.data().iter().zip(mb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn lpa_map_peaks_at_head_offset() {
    let grid = PatchGrid::new(4, 4).unwrap();
    let vs = init_positional_vectors(9, 1.0);
    let a = random_tensor(&mut rng(5), &[16, 16], 1.0);
    for (h, v) in vs.iter().enumerate() {
        let m = lpa_map(&a, &grid, 0.0, *v).unwrap();
        for i in 0..16 {
            let Some(target) = grid.offset_target(i, HEAD_OFFSETS[h]) else {
                continue;
            };
            let argmax = (0..16).max_by(|&p, &q| m.at(i, p).total_cmp(&m.at(i, q))).unwrap();
            assert_eq!(argmax, target, "head {h} query {i}");
        }
    }
}

#[test]
fn lpa_map_rejects_size_mismatch() {
    let grid = PatchGrid::new(2, 2).unwrap();
    assert!(lpa_map(&Tensor::zeros(&[3, 3]), &grid, 1.0, [0.0; 3]).is_err());
}

#[test]
fn identity_attention_returns_values() {
    let grid = PatchGrid::new(1, 3).unwrap();
    let (mut store, layer) = single_layer(3, 1, true, 8);
    store.replace(layer.w_q(), Tensor::eye(3));
    store.replace(layer.w_k(), Tensor::eye(3));
    store.replace(layer.w_o(), Tensor::eye(3));
    store.replace(layer.lambda().unwrap(), Tensor::full(&[1, 1], 1e4));
    store.replace(layer.pos_v().unwrap(), Tensor::zeros(&[1, 3]));
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let (out, maps) = run_layer(&store, &layer, &x, &grid);
    assert!(maps[0].max_abs_diff(&Tensor::eye(3)) < 1e-12);
    let expected = store.get(layer.w_v()).clone();
    assert!(out.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn lpa_with_unit_lambda_and_zero_v_equals_vanilla() {
    let grid = PatchGrid::new(3, 3).unwrap();
    for seed in 0..10 {
        let (mut lpa_store, lpa) = single_layer(18, 9, true, seed);
        lpa_store.replace(lpa.lambda().unwrap(), Tensor::full(&[9, 1], 1.0));
        lpa_store.replace(lpa.pos_v().unwrap(), Tensor::zeros(&[9, 3]));
        let (mut van_store, van) = single_layer(18, 9, false, 1000 + seed);
        let mut r = rng(seed + 50);
        for (dst, src) in [
            (van.w_q(), lpa.w_q()),
            (van.w_k(), lpa.w_k()),
            (van.w_v(), lpa.w_v()),
            (van.w_o(), lpa.w_o()),
        ] {
            let w = random_tensor(&mut r, &[18, 18], 1.0);
            van_store.replace(dst, w.clone());
            lpa_store.replace(src, w);
        }
        let x = random_tensor(&mut r, &[9, 18], 1.0);
        let (a, ma) = run_layer(&lpa_store, &lpa, &x, &grid);
        let (b, mb) = run_layer(&van_store, &van, &x, &grid);
        assert!(a.max_abs_diff(&b) < 1e-12);
        for (p, q) in ma.iter().zip(&mb) {
            assert!(p.max_abs_diff(q) < 1e-12);
        }
    }
}

#[test]
fn attention_gradients_wrt_input_lambda_and_v() {
    let grid = PatchGrid::new(2, 3).unwrap();
    let (mut store, layer) = single_layer(6, 3, true, 12);
    let mut r = rng(12);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.replace(id, random_tensor(&mut r, &shape, 0.8));
    }
    let x = random_tensor(&mut r, &[6, 6], 1.0);
    let weights = random_tensor(&mut r, &[6, 6], 1.0);

    let loss_of = |store: &ParamStore, x: &Tensor, grad: bool| -> (f64, Option<(Tensor, Tensor, Tensor)>) {
        let mut tape = Tape::new();
        let bound = if grad {
            store.bind(&mut tape)
        } else {
            store.bind_frozen(&mut tape)
        }
        .unwrap();
        let xv = tape.leaf(&x.clone().with_grad()).unwrap();
        let rv = tape.constant(grid.encodings_flat()).unwrap();
        let out = layer.forward(&mut tape, &bound, xv, 1, Some(rv)).unwrap();
        let w = tape.constant(weights.clone()).unwrap();
        let p = tape.mul(out.out, w).unwrap();
        let l = tape.sum(p).unwrap();
        let value = tape.value(l).data()[0];
        if !grad {
            return (value, None);
        }
        let g = tape.backward(l).unwrap();
        let gx = g.get(xv).unwrap().clone();
        let gl = g.get(bound[layer.lambda().unwrap()]).unwrap().clone();
        let gv = g.get(bound[layer.pos_v().unwrap()]).unwrap().clone();
        (value, Some((gx, gl, gv)))
    };

    let (_, Some((gx, gl, gv))) = loss_of(&store, &x, true) else {
        unreachable!()
    };
    let nx = finite_diff(|p| Ok(loss_of(&store, p, false).0), &x).unwrap();
    let lam = store.get(layer.lambda().unwrap()).clone();
    let nl = finite_diff(
        |p| {
            let mut s = store.clone();
            s.replace(layer.lambda().unwrap(), p.clone());
            Ok(loss_of(&s, &x, false).0)
        },
        &lam,
    )
    .unwrap();
    let pv = store.get(layer.pos_v().unwrap()).clone();
    let nv = finite_diff(
        |p| {
            let mut s = store.clone();
            s.replace(layer.pos_v().unwrap(), p.clone());
            Ok(loss_of(&s, &x, false).0)
        },
        &pv,
    )
    .unwrap();
    assert!(relative_error(gx.data(), nx.data()) < 1e-4);
    assert!(relative_error(gl.data(), nl.data()) < 1e-4);
    assert!(relative_error(gv.data(), nv.data()) < 1e-4);
}

#[test]
fn class_attention_uniform_gives_mean_of_values() {
    let mut store = ParamStore::new();
    let mut r = rng(21);
    let ca = ClassAttention::new(&mut store, "ca", 6, 2, &mut r).unwrap();
    store.replace(ca.w_q(), Tensor::zeros(&[6, 6]));
    store.replace(ca.w_o(), Tensor::eye(6));
    let tokens = random_tensor(&mut r, &[5, 6], 1.0);
    let (out, maps) = class_attention_forward(&tokens, &ca, &store).unwrap();
    let wv = store.get(ca.w_v());
    for c in 0..6 {
        let mean: f64 = (0..5)
            .map(|t| (0..6).map(|m| tokens.at(t, m) * wv.at(m, c)).sum::<f64>())
            .sum::<f64>()
            / 5.0;
        assert!((out.data()[c] - mean).abs() < 1e-12);
    }
    for m in &maps {
        assert_eq!(m.shape(), &[1, 5]);
        assert!((m.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn class_attention_gradient_check() {
    let mut store = ParamStore::new();
    let mut r = rng(22);
    let ca = ClassAttention::new(&mut store, "ca", 6, 3, &mut r).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.replace(id, random_tensor(&mut r, &shape, 0.8));
    }
    let tokens = random_tensor(&mut r, &[4, 6], 1.0);
    let f = |t: &Tensor| -> lpa_core::tensor::Result<f64> {
        let (out, _) = class_attention_forward(t, &ca, &store)?;
        Ok(out.data().iter().enumerate().map(|(i, v)| v * (i as f64 - 2.5)).sum())
    };
    let numeric = finite_diff(f, &tokens).unwrap();

    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape).unwrap();
    let all = tape.leaf(&tokens.clone().with_grad()).unwrap();
    let cls = tape.narrow(all, 0, 0, 1).unwrap();
    let patches = tape.narrow(all, 0, 1, 3).unwrap();
    let out = ca.forward(&mut tape, &bound, cls, patches).unwrap();
    let w = tape
        .constant(Tensor::new(vec![1, 6], (0..6).map(|i| i as f64 - 2.5).collect()).unwrap())
        .unwrap();
    let p = tape.mul(out.out, w).unwrap();
    let l = tape.sum(p).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(relative_error(g.get(all).unwrap().data(), numeric.data()) < 1e-4);
}

#[test]
fn backbone_logits_track_registered_classes() {
    let mut r = rng(30);
    let mut model = Backbone::new(toy_config(5), &mut r).unwrap();
    let img = random_tensor(&mut r, &[1, 8, 8], 1.0);
    assert_eq!(model.forward_one(&img, false).unwrap().0.len(), 0);
    model.extend_classes(3, &mut r).unwrap();
    assert_eq!(model.forward_one(&img, false).unwrap().0.len(), 3);
    model.extend_classes(2, &mut r).unwrap();
    let (logits, rep, trace) = model.forward_one(&img, true).unwrap();
    assert_eq!(logits.len(), 5);
    assert_eq!(rep.len(), 18);
    let trace = trace.unwrap();
    assert_eq!(trace.layers.len(), 5);
    assert_eq!(trace.layers[0].len(), 9);
    assert_eq!(trace.class_attention[0].shape(), &[1, 17]);
    assert!(trace.max_row_sum_error() < 1e-9);
}

#[test]
fn backbone_forward_is_deterministic() {
    let mut r = rng(31);
    let mut model = Backbone::new(toy_config(3), &mut r).unwrap();
    model.extend_classes(4, &mut r).unwrap();
    let img = random_tensor(&mut r, &[1, 8, 8], 1.0);
    let a = model.forward_one(&img, true).unwrap();
    let b = model.forward_one(&img, true).unwrap();
    assert!(a
        .0
        .data()
        .iter()
        .zip(b.0.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.2, b.2);
}

#[test]
fn backbone_rejects_indivisible_images() {
    let mut cfg = toy_config(5);
    cfg.image_height = 7;
    assert!(Backbone::new(cfg, &mut rng(0)).is_err());
    let model = Backbone::new(toy_config(5), &mut rng(0)).unwrap();
    assert!(model.forward_one(&Tensor::zeros(&[1, 6, 8]), false).is_err());
}

#[test]
fn backbone_end_to_end_gradient_check() {
    let mut r = rng(33);
    let mut model = Backbone::new(toy_config(5), &mut r).unwrap();
    model.extend_classes(2, &mut r).unwrap();
    scramble(&mut model, &mut r, 0.3);
    let imgs: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut r, &[1, 8, 8], 1.0)).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let err = backbone_grad_error(&model, &refs, &[0, 1], 3, &mut r);
    assert!(err <= 1e-3, "end-to-end relative error {err:e}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut r = rng(40);
    let mut model = Backbone::new(toy_config(2), &mut r).unwrap();
    model.extend_classes(3, &mut r).unwrap();
    scramble(&mut model, &mut r, 0.5);
    let bytes = checkpoint::encode(&model);
    assert_eq!(&bytes[..4], b"LPA1");
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(checkpoint::encode(&back), bytes);
    assert_eq!(back.config(), model.config());
    for ((na, ta), (nb, tb)) in model.store().iter().zip(back.store().iter()) {
        assert_eq!(na, nb);
        assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let model = Backbone::new(toy_config(1), &mut rng(41)).unwrap();
    let mut bytes = checkpoint::encode(&model);
    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(
        checkpoint::decode(truncated),
        Err(lpa_core::Error::Format { .. })
    ));
    bytes[0] = b'X';
    match checkpoint::decode(&bytes) {
        Err(lpa_core::Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected format error, got {other:?}"),
    }
}
