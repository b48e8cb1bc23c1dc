use lpa_core::attention::{AttentionTrace, PatchGrid};
use lpa_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(0.0..1.0f64).powi(3))
        .collect();
    for r in data.chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_trace(rng: &mut ChaCha8Rng, layers: usize, heads: usize, n: usize) -> AttentionTrace {
    AttentionTrace {
        layers: (0..layers)
            .map(|_| (0..heads).map(|_| stochastic(rng, n, n)).collect())
            .collect(),
        class_attention: (0..heads).map(|_| stochastic(rng, 1, n + 1)).collect(),
    }
}

pub fn naive_nonlocality(trace: &AttentionTrace, grid: &PatchGrid) -> Vec<f64> {
    let n = grid.len();
    trace
        .layers
        .iter()
        .map(|heads| {
            let mut layer = 0.0;
            for m in heads {
                let mut d = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let [ri, ci] = grid.positions()[i];
                        let [rj, cj] = grid.positions()[j];
                        let dist = (((rj - ri).pow(2) + (cj - ci).pow(2)) as f64).sqrt();
                        d += m.at(i, j) * dist;
                    }
                }
                layer += d / n as f64;
            }
            layer / heads.len() as f64
        })
        .collect()
}

pub fn brute_chain(mats: &[Tensor]) -> Vec<f64> {
    let n = mats[0].rows();
    let mut acc = mats[0].data().to_vec();
    for m in &mats[1..] {
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    next[i * n + j] += m.at(i, k) * acc[k * n + j];
                }
            }
        }
        acc = next;
    }
    acc
}

/// Minimal P5 reader used as an independent format check.
pub fn parse_p5(bytes: &[u8]) -> (usize, usize, usize, &[u8]) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
    }
    pos += 1;
    assert_eq!(fields[0], "P5");
    let (w, h, max) = (
        fields[1].parse().unwrap(),
        fields[2].parse().unwrap(),
        fields[3].parse().unwrap(),
    );
    (w, h, max, &bytes[pos..])
}

/// Greedy herding replayed step by step with an exhaustive argmin.
pub fn herding_oracle(rows: &[Vec<f64>], m: usize) -> Vec<usize> {
    let d = rows[0].len();
    let mu: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    for k in 1..=m {
        let mut best = (f64::INFINITY, usize::MAX);
        for i in 0..rows.len() {
            if chosen.contains(&i) {
                continue;
            }
            let dist: f64 = (0..d)
                .map(|j| {
                    let s: f64 = chosen.iter().map(|&c| rows[c][j]).sum::<f64>() + rows[i][j];
                    (mu[j] - s / k as f64).powi(2)
                })
                .sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}
