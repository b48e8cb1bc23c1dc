use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A class order split into a base task and equal increments.
///
/// Models never see raw class ids: a class is identified by its position in
/// `order`, so task `t` owns the contiguous position range [`Scenario::task_range`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub num_classes: usize,
    pub base: usize,
    pub increment: usize,
    pub order: Vec<usize>,
    pub tasks: Vec<Vec<usize>>,
}

/// Shuffles `0..num_classes` with `seed`, then splits `[base, inc, inc, ...]`.
pub fn build_scenario(num_classes: usize, base: usize, increment: usize, seed: u64) -> Result<Scenario> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Scenario::with_order(order, base, increment)
}

impl Scenario {
    pub fn with_order(order: Vec<usize>, base: usize, increment: usize) -> Result<Self> {
        let num_classes = order.len();
        let mut seen = vec![false; num_classes];
        for &c in &order {
            if c >= num_classes || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Scenario(format!(
                    "class order is not a permutation of 0..{num_classes}"
                )));
            }
        }
        if base == 0 || base > num_classes {
            return Err(Error::Scenario(format!("base {base} outside 1..={num_classes}")));
        }
        let rest = num_classes - base;
        if rest > 0 && (increment == 0 || rest % increment != 0) {
            return Err(Error::Scenario(format!(
                "{num_classes} classes do not split into base {base} plus increments of {increment}"
            )));
        }
        let mut tasks = vec![order[..base].to_vec()];
        tasks.extend(order[base..].chunks(increment.max(1)).map(<[usize]>::to_vec));
        Ok(Self {
            num_classes,
            base,
            increment,
            order,
            tasks,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// `B<base>-<increment>`.
    pub fn name(&self) -> String {
        format!("B{}-{}", self.base, self.increment)
    }

    /// Positions owned by task `t`.
    pub fn task_range(&self, t: usize) -> std::ops::Range<usize> {
        let start = if t == 0 {
            0
        } else {
            self.base + (t - 1) * self.increment
        };
        start..start + self.tasks[t].len()
    }

    /// Number of classes seen after task `t`.
    pub fn seen_after(&self, t: usize) -> usize {
        self.task_range(t).end
    }

    /// Class-id → position lookup.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.num_classes];
        for (p, &c) in self.order.iter().enumerate() {
            pos[c] = p;
        }
        pos
    }
}

/// Parses `B10-10` style names into `(base, increment)`.
pub fn parse_scenario_name(name: &str) -> Result<(usize, usize)> {
    let bad = || Error::Scenario(format!("scenario name {name:?} is not of the form B<base>-<increment>"));
    let body = name.strip_prefix('B').ok_or_else(bad)?;
    let (b, i) = body.split_once('-').ok_or_else(bad)?;
    Ok((b.parse().map_err(|_| bad())?, i.parse().map_err(|_| bad())?))
}
