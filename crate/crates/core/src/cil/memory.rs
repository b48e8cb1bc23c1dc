use serde::{Deserialize, Serialize};

use crate::attention::Backbone;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn normalized_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = x.cols();
    if d > 0 {
        out.data_mut().chunks_mut(d).for_each(l2_normalize);
    }
    out
}

/// Greedy herding: step `k` adds the unchosen row that brings the mean of the
/// chosen rows closest to the mean of all rows. Ties go to the lowest index.
pub fn herding_select(features: &Tensor, m: usize) -> Result<Vec<usize>> {
    let (rows, d) = (features.rows(), features.cols());
    if m == 0 || m > rows {
        return Err(Error::Quota(format!("cannot select {m} of {rows} exemplars")));
    }
    let mut mu = vec![0.0; d];
    for r in 0..rows {
        mu.iter_mut().zip(features.row(r)).for_each(|(a, v)| *a += v);
    }
    mu.iter_mut().for_each(|a| *a /= rows as f64);

    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; rows];
    let mut acc = vec![0.0; d];
    for k in 1..=m {
        let mut best: Option<(f64, usize)> = None;
        for (i, _) in taken.iter().enumerate().filter(|(_, t)| !**t) {
            let dist: f64 = features
                .row(i)
                .iter()
                .zip(&acc)
                .zip(&mu)
                .map(|((f, a), u)| {
                    let e = u - (a + f) / k as f64;
                    e * e
                })
                .sum();
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, i));
            }
        }
        let (_, i) = best.expect("k ≤ rows leaves a candidate");
        taken[i] = true;
        acc.iter_mut().zip(features.row(i)).for_each(|(a, f)| *a += f);
        chosen.push(i);
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassExemplars {
    pub class: usize,
    /// Indices into the training set, in herding order.
    pub indices: Vec<usize>,
    /// L2-normalized mean of the L2-normalized exemplar features.
    pub mean: Vec<f64>,
}

/// Fixed-budget exemplar store shared by all seen classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehearsalMemory {
    pub capacity: usize,
    pub classes: Vec<ClassExemplars>,
}

impl RehearsalMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            classes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.indices.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.classes.iter().flat_map(|c| c.indices.iter().copied()).collect()
    }

    pub fn quota(&self, classes_seen: usize) -> Result<usize> {
        let q = self.capacity / classes_seen.max(1);
        if q == 0 {
            return Err(Error::Capacity(format!(
                "capacity {} leaves no exemplar for each of {classes_seen} classes",
                self.capacity
            )));
        }
        Ok(q)
    }

    /// Truncates old classes to the new quota and herds exemplars for
    /// `new_classes` from `train`, then refreshes every class mean with
    /// `backbone`.
    pub fn update(&mut self, train: &LabeledImageSet, new_classes: &[usize], backbone: &Backbone) -> Result<()> {
        let quota = self.quota(self.classes.len() + new_classes.len())?;
        for c in &mut self.classes {
            c.indices.truncate(quota);
        }
        for &class in new_classes {
            let idx = train.indices_of_class(class);
            if idx.is_empty() {
                return Err(Error::Training(format!("class {class} has no training samples")));
            }
            let feats = features(backbone, train, &idx)?;
            let picks = herding_select(&feats, quota.min(idx.len()))?;
            self.classes.push(ClassExemplars {
                class,
                indices: picks.into_iter().map(|p| idx[p]).collect(),
                mean: Vec::new(),
            });
        }
        self.refresh_means(train, backbone)
    }

    pub fn refresh_means(&mut self, train: &LabeledImageSet, backbone: &Backbone) -> Result<()> {
        for c in &mut self.classes {
            let feats = features(backbone, train, &c.indices)?;
            let d = feats.cols();
            let mut mean = vec![0.0; d];
            for r in 0..feats.rows() {
                mean.iter_mut().zip(feats.row(r)).for_each(|(a, v)| *a += v);
            }
            mean.iter_mut().for_each(|a| *a /= feats.rows() as f64);
            l2_normalize(&mut mean);
            c.mean = mean;
        }
        Ok(())
    }
}

/// L2-normalized representations of `train[idx]`.
pub fn features(backbone: &Backbone, set: &LabeledImageSet, idx: &[usize]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = idx.iter().map(|&i| &set.images[i]).collect();
    Ok(normalized_rows(&backbone.representations(&imgs, 64)?))
}

/// Nearest exemplar mean to the L2-normalized representation; ties go to the
/// lowest class label.
pub fn nme_classify(representation: &[f64], memory: &RehearsalMemory) -> Result<usize> {
    let mut q = representation.to_vec();
    l2_normalize(&mut q);
    let mut best: Option<(f64, usize)> = None;
    for c in &memory.classes {
        if c.mean.len() != q.len() {
            return Err(Error::Classifier(format!(
                "class {} mean has width {}, query has {}",
                c.class,
                c.mean.len(),
                q.len()
            )));
        }
        let d: f64 = c.mean.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
        let better = match best {
            None => true,
            Some((bd, bc)) => d < bd || (d == bd && c.class < bc),
        };
        if better {
            best = Some((d, c.class));
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::Classifier("memory holds no class means".into()))
}
