use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images of shape `[C, H, W]` with values in `[0, 1]` and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn empty(channels: usize, height: usize, width: usize, num_classes: usize, split: Split) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            num_classes,
            channels,
            height,
            width,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, image: Tensor, label: usize) -> Result<()> {
        if image.shape() != [self.channels, self.height, self.width] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match set geometry {:?}",
                image.shape(),
                [self.channels, self.height, self.width]
            )));
        }
        if label >= self.num_classes {
            return Err(Error::Config(format!(
                "label {label} ≥ class count {}",
                self.num_classes
            )));
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of the samples whose label is in `classes`, in storage order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Checks labels against the class count and pixel range.
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Config(format!("label {l} ≥ class count {}", self.num_classes)));
        }
        for img in &self.images {
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("pixel outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}
