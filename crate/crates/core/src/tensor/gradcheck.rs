use super::{Result, Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    finite_diff_with_step(f, x, DEFAULT_STEP)
}

pub fn finite_diff_with_step<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Oracle(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::Oracle(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Central differences at selected flat coordinates only; for checking
/// large parameter tensors by sampling.
pub fn finite_diff_at<F>(mut f: F, x: &Tensor, coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.len() {
            return Err(TensorError::Oracle(format!("coordinate {i} out of {}", x.len())));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::Oracle(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Max-norm relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, with a tiny floor so
/// two all-zero gradients compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    diff / scale
}
