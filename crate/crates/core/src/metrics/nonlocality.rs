use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTrace, PatchGrid};
use crate::error::{Error, Result};
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Procedure {
    Cil,
    Joint,
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Procedure::Cil => "cil",
            Procedure::Joint => "joint",
        })
    }
}

/// Per-head and per-layer nonlocality of the self-attention layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlocalityReport {
    pub task: usize,
    pub procedure: Procedure,
    pub seed: u64,
    /// `[layer][head]`
    pub per_head: Vec<Vec<f64>>,
    /// Mean over heads.
    pub per_layer: Vec<f64>,
}

impl NonlocalityReport {
    pub fn with_meta(mut self, task: usize, procedure: Procedure, seed: u64) -> Self {
        self.task = task;
        self.procedure = procedure;
        self.seed = seed;
        self
    }

    pub fn mean_over_layers(&self) -> f64 {
        self.per_layer.iter().sum::<f64>() / self.per_layer.len().max(1) as f64
    }
}

/// Row-major `‖δ_ij‖` for all patch pairs.
pub fn distance_matrix(grid: &PatchGrid) -> Vec<f64> {
    let n = grid.len();
    (0..n * n).map(|k| grid.distance(k / n, k % n)).collect()
}

fn head_value(map: &[f64], dist: &[f64], n: usize) -> f64 {
    map.iter().zip(dist).map(|(a, d)| a * d).sum::<f64>() / n as f64
}

/// `D(h) = (1/N) Σ_ij Ã_ij ‖δ_ij‖` per head, layer value = mean over heads.
/// Metadata fields are zeroed; set them with [`NonlocalityReport::with_meta`].
pub fn nonlocality(trace: &AttentionTrace, grid: &PatchGrid) -> Result<NonlocalityReport> {
    nonlocality_mean(std::slice::from_ref(trace), grid)
}

/// Nonlocality averaged over the traces of several probe images.
pub fn nonlocality_mean(traces: &[AttentionTrace], grid: &PatchGrid) -> Result<NonlocalityReport> {
    let first = traces.first().ok_or_else(|| Error::Metrics("no traces".into()))?;
    let n = grid.len();
    let dist = distance_matrix(grid);
    let layers = first.layers.len();
    let mut per_head: Vec<Vec<f64>> = first.layers.iter().map(|h| vec![0.0; h.len()]).collect();
    for trace in traces {
        if trace.layers.len() != layers {
            return Err(Error::Alignment(format!(
                "trace has {} layers, expected {layers}",
                trace.layers.len()
            )));
        }
        for (l, heads) in trace.layers.iter().enumerate() {
            if heads.len() != per_head[l].len() {
                return Err(Error::Alignment(format!(
                    "layer {l}: head count differs between traces"
                )));
            }
            for (h, map) in heads.iter().enumerate() {
                if map.shape() != [n, n] {
                    return Err(TensorError::ShapeMismatch {
                        op: "nonlocality",
                        lhs: map.shape().to_vec(),
                        rhs: vec![n, n],
                    }
                    .into());
                }
                per_head[l][h] += head_value(map.data(), &dist, n);
            }
        }
    }
    let m = traces.len() as f64;
    per_head.iter_mut().flatten().for_each(|v| *v /= m);
    let per_layer = per_head
        .iter()
        .map(|h| h.iter().sum::<f64>() / h.len().max(1) as f64)
        .collect();
    Ok(NonlocalityReport {
        task: 0,
        procedure: Procedure::Cil,
        seed: 0,
        per_head,
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub task: usize,
    pub seed: u64,
    /// `D_cil − D_joint` per layer.
    pub layers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSeries {
    pub entries: Vec<GapEntry>,
    /// `(task, per-layer gap averaged over seeds)`, ascending task.
    pub seed_mean: Vec<(usize, Vec<f64>)>,
}

impl GapSeries {
    /// Seed-mean gap of `task`, averaged over layers.
    pub fn mean_gap(&self, task: usize) -> Option<f64> {
        self.seed_mean
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, g)| g.iter().sum::<f64>() / g.len().max(1) as f64)
    }
}

/// Pairs CIL and joint reports by `(task, seed)` and subtracts per layer.
pub fn nonlocality_gap(cil: &[NonlocalityReport], joint: &[NonlocalityReport]) -> Result<GapSeries> {
    if cil.len() != joint.len() {
        return Err(Error::Alignment(format!(
            "{} CIL reports vs {} joint reports",
            cil.len(),
            joint.len()
        )));
    }
    let mut entries = Vec::with_capacity(cil.len());
    for c in cil {
        let j = joint
            .iter()
            .find(|j| j.task == c.task && j.seed == c.seed)
            .ok_or_else(|| Error::Alignment(format!("no joint report for task {} seed {}", c.task, c.seed)))?;
        if j.per_layer.len() != c.per_layer.len() {
            return Err(Error::Alignment(format!(
                "task {} seed {}: {} vs {} layers",
                c.task,
                c.seed,
                c.per_layer.len(),
                j.per_layer.len()
            )));
        }
        entries.push(GapEntry {
            task: c.task,
            seed: c.seed,
            layers: c.per_layer.iter().zip(&j.per_layer).map(|(a, b)| a - b).collect(),
        });
    }
    let mut by_task: BTreeMap<usize, Vec<&GapEntry>> = BTreeMap::new();
    for e in &entries {
        by_task.entry(e.task).or_default().push(e);
    }
    let mut seed_mean = Vec::with_capacity(by_task.len());
    for (task, group) in by_task {
        let layers = group[0].layers.len();
        if group.iter().any(|e| e.layers.len() != layers) {
            return Err(Error::Alignment(format!(
                "task {task}: layer counts differ across seeds"
            )));
        }
        let mean = (0..layers)
            .map(|l| group.iter().map(|e| e.layers[l]).sum::<f64>() / group.len() as f64)
            .collect();
        seed_mean.push((task, mean));
    }
    Ok(GapSeries { entries, seed_mean })
}
