use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rows[t][k]` is the accuracy on task `k`'s test split after training
/// task `t`, for `k ≤ t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Test-set size of each task.
    pub test_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CilMetrics {
    /// Test-size weighted accuracy over all tasks after the last one.
    pub last: f64,
    /// Mean over tasks of the overall accuracy after each task.
    pub avg: f64,
    /// Mean over tasks of the unweighted per-task mean accuracy after each task.
    pub avg_task_mean: f64,
    pub forgetting: f64,
}

impl AccuracyMatrix {
    pub fn new(test_sizes: Vec<usize>) -> Self {
        Self {
            rows: Vec::new(),
            test_sizes,
        }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Metrics(format!(
                "row {} must hold {} accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Metrics("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Overall accuracy on all seen tasks after task `t`.
    pub fn overall(&self, t: usize) -> f64 {
        let sizes = &self.test_sizes[..=t];
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.rows[t].iter().zip(sizes).map(|(a, &n)| a * n as f64).sum::<f64>() / total as f64
    }

    fn check(&self) -> Result<()> {
        let t = self.rows.len();
        if t == 0 {
            return Err(Error::Metrics("empty accuracy matrix".into()));
        }
        if self.test_sizes.len() < t {
            return Err(Error::Metrics(format!(
                "{} test sizes for {t} tasks",
                self.test_sizes.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Metrics(format!("row {i} holds {} entries", row.len())));
            }
        }
        Ok(())
    }

    /// Forgetting of task `k` after the last task:
    /// `max(0, max_{k ≤ i < T} acc_i(k) − acc_T(k))`.
    pub fn task_forgetting(&self, k: usize) -> f64 {
        let last = self.rows.len() - 1;
        let now = self.rows[last][k];
        (k..last).map(|i| self.rows[i][k] - now).fold(0.0, f64::max)
    }

    pub fn metrics(&self) -> Result<CilMetrics> {
        self.check()?;
        let t = self.rows.len();
        let avg = (0..t).map(|i| self.overall(i)).sum::<f64>() / t as f64;
        let avg_task_mean = self
            .rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .sum::<f64>()
            / t as f64;
        let forgetting = if t == 1 {
            0.0
        } else {
            (0..t - 1).map(|k| self.task_forgetting(k)).sum::<f64>() / (t - 1) as f64
        };
        Ok(CilMetrics {
            last: self.overall(t - 1),
            avg,
            avg_task_mean,
            forgetting,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_example() {
        let mut m = AccuracyMatrix::new(vec![10, 10]);
        m.push_row(vec![0.9]).unwrap();
        m.push_row(vec![0.7, 0.8]).unwrap();
        let r = m.metrics().unwrap();
        assert!((m.task_forgetting(0) - 0.2).abs() < 1e-15);
        assert!((r.forgetting - 0.2).abs() < 1e-15);
        assert!((r.last - 0.75).abs() < 1e-15);
        assert!((r.avg - (0.9 + 0.75) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_task_has_no_forgetting() {
        let mut m = AccuracyMatrix::new(vec![5]);
        m.push_row(vec![0.4]).unwrap();
        assert_eq!(m.metrics().unwrap().forgetting, 0.0);
    }

    #[test]
    fn incomplete_matrix_rejected() {
        assert!(AccuracyMatrix::new(vec![1]).metrics().is_err());
        let mut m = AccuracyMatrix::new(vec![1]);
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        m.push_row(vec![0.5, 0.5]).unwrap();
        assert!(m.metrics().is_err());
    }
}
