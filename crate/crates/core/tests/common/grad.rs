use lpa_core::tensor::{finite_diff, relative_error, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces `build`'s output to a scalar through a fixed random weighting so
/// that normalised outputs (softmax rows, layer norm) still have non-trivial
/// gradients.
pub fn weighted_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = tape.constant(weights.reshaped(tape.shape(out).to_vec())?)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub fn output_len(inputs: &[Tensor], build: &Build) -> usize {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).len()
}

/// Largest relative error between tape gradients and central differences,
/// over every input.
pub fn max_grad_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let n_out = output_len(inputs, build);
    let weights = Tensor::vector((0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect());

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = weighted_loss(&mut tape, out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input);
        let numeric = finite_diff(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == k { probe } else { x }).unwrap())
                    .collect();
                let o = build(&mut t, &vs)?;
                let l = weighted_loss(&mut t, o, &weights)?;
                Ok(t.value(l).data()[0])
            },
            input,
        )
        .unwrap();
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}

pub fn op_catalogue() -> Vec<(&'static str, Vec<Vec<usize>>, Box<Build>)> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "matmul_nt",
            vec![vec![3, 4], vec![5, 4]],
            Box::new(|t, v| t.matmul_nt(v[0], v[1])),
        ),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![3, 3]], Box::new(|t, v| t.scale(v[0], -0.7))),
        (
            "scale_by",
            vec![vec![3, 3], vec![1]],
            Box::new(|t, v| t.scale_by(v[0], v[1])),
        ),
        (
            "add_row",
            vec![vec![4, 3], vec![3]],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        (
            "mul_row",
            vec![vec![4, 3], vec![3]],
            Box::new(|t, v| t.mul_row(v[0], v[1])),
        ),
        ("gelu", vec![vec![3, 4]], Box::new(|t, v| t.gelu(v[0]))),
        ("layer_norm", vec![vec![3, 5]], Box::new(|t, v| t.layer_norm(v[0]))),
        ("mean", vec![vec![3, 4]], Box::new(|t, v| t.mean(v[0]))),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| t.sum(v[0]))),
        (
            "concat0",
            vec![vec![2, 3], vec![1, 3]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 0)),
        ),
        (
            "concat1",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("narrow", vec![vec![4, 5]], Box::new(|t, v| t.narrow(v[0], 1, 1, 3))),
        ("transpose", vec![vec![3, 2]], Box::new(|t, v| t.transpose(v[0]))),
        (
            "gather_rows",
            vec![vec![4, 3]],
            Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        ),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("softmax_rows", vec![vec![3, 4]], Box::new(|t, v| t.softmax_rows(v[0]))),
        (
            "cross_entropy",
            vec![vec![3, 4]],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 3, 0])),
        ),
        (
            "kl_divergence",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| t.kl_divergence(v[0], v[1], 2.0)),
        ),
        (
            "attention_probs",
            vec![vec![6, 4], vec![6, 4]],
            Box::new(|t, v| t.attention_probs(v[0], v[1], 2, 2, 0.7, None)),
        ),
        (
            "attention_probs_mixed",
            vec![vec![6, 4], vec![6, 4], vec![2, 1], vec![2, 9]],
            Box::new(|t, v| t.attention_probs(v[0], v[1], 2, 2, 0.7, Some((v[2], v[3])))),
        ),
        (
            "attention_mix",
            vec![vec![12, 3], vec![6, 4]],
            Box::new(|t, v| t.attention_mix(v[0], v[1], 2, 2)),
        ),
    ]
}
