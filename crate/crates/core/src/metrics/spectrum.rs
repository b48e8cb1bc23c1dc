use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOP: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Largest eigenvalues, descending, truncated to `min(top, d)`.
    pub eigenvalues: Vec<f64>,
    /// Sum of all `d` eigenvalues.
    pub eigen_sum: f64,
    pub trace: f64,
    pub dim: usize,
    pub samples: usize,
}

impl SpectrumReport {
    /// Fraction of the total spectrum carried by the `k` largest eigenvalues.
    pub fn top_mass(&self, k: usize) -> f64 {
        let top: f64 = self.eigenvalues.iter().take(k).sum();
        if self.eigen_sum > 0.0 {
            top / self.eigen_sum
        } else {
            0.0
        }
    }
}

/// Sample covariance `(X − x̄)ᵀ(X − x̄) / (M − 1)` of the rows of `x`.
pub fn covariance(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Metrics(format!("expected a matrix, got shape {:?}", x.shape())));
    }
    let (m, d) = (x.rows(), x.cols());
    if m < 2 {
        return Err(Error::InsufficientSamples(format!(
            "covariance needs ≥ 2 rows, got {m}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..m {
        mean.iter_mut().zip(x.row(r)).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in 0..m {
        centered
            .iter_mut()
            .zip(x.row(r))
            .zip(&mean)
            .for_each(|((c, v), mu)| *c = v - mu);
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let denom = (m - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(Tensor::new(vec![d, d], cov)?)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    let d = a.rows();
    if a.rank() != 2 || a.cols() != d {
        return Err(Error::Metrics(format!("expected a square matrix, got {:?}", a.shape())));
    }
    let mut m = a.data().to_vec();
    let norm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; d]);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * akp - s * akq;
                    m[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * apk - s * aqk;
                    m[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Eigenvalue spectrum of the representation covariance, keeping the `top`
/// largest values (all of them when `d < top`).
pub fn covariance_spectrum(representations: &Tensor, top: usize) -> Result<SpectrumReport> {
    let cov = covariance(representations)?;
    let d = cov.rows();
    let trace = (0..d).map(|i| cov.at(i, i)).sum();
    let mut eigenvalues = symmetric_eigenvalues(&cov)?;
    let eigen_sum = eigenvalues.iter().sum();
    eigenvalues.truncate(top.min(d));
    Ok(SpectrumReport {
        eigenvalues,
        eigen_sum,
        trace,
        dim: d,
        samples: representations.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_two_by_two() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let r = covariance_spectrum(&x, DEFAULT_TOP).unwrap();
        assert!((r.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert!(r.eigenvalues[1].abs() < 1e-12);
    }

    #[test]
    fn identical_rows_have_zero_spectrum() {
        let x = Tensor::from_rows(&vec![vec![3.0, -1.0, 2.0]; 5]).unwrap();
        let r = covariance_spectrum(&x, DEFAULT_TOP).unwrap();
        assert!(r.eigenvalues.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_row_is_insufficient() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            covariance_spectrum(&x, 10),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn rotation_eigenvalues() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }
}
