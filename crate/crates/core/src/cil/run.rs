use serde::{Deserialize, Serialize};

use super::accuracy::{AccuracyMatrix, CilMetrics};
use super::memory::RehearsalMemory;
use super::scenario::{build_scenario, Scenario};
use super::train::{evaluate, joint_train, train_task, TaskLog, TrainConfig};
use crate::attention::{AttentionTrace, Backbone, BackboneConfig};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::metrics::{nonlocality_mean, NonlocalityReport, Procedure};
use crate::seeding::{derived_seed, Stream, TrainStreams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CilConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub memory_capacity: usize,
    pub base: usize,
    pub increment: usize,
    /// Test images per seen class in the fixed nonlocality probe batch.
    pub probe_per_class: usize,
}

impl Default for CilConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            memory_capacity: 200,
            base: 4,
            increment: 4,
            probe_per_class: 4,
        }
    }
}

/// Train and test splits relabeled to class positions of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub scenario: Scenario,
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

fn relabel(set: &LabeledImageSet, positions: &[usize]) -> Result<LabeledImageSet> {
    let mut out = set.clone();
    for l in out.labels.iter_mut() {
        *l = *positions
            .get(*l)
            .ok_or_else(|| Error::Scenario(format!("label {l} outside the scenario's classes")))?;
    }
    Ok(out)
}

impl ScenarioData {
    pub fn new(
        train: &LabeledImageSet,
        test: &LabeledImageSet,
        base: usize,
        increment: usize,
        seed: u64,
    ) -> Result<Self> {
        if train.num_classes != test.num_classes {
            return Err(Error::Scenario(
                "train and test splits disagree on the class count".into(),
            ));
        }
        let scenario = build_scenario(train.num_classes, base, increment, derived_seed(seed, Stream::Scenario))?;
        let positions = scenario.positions();
        let train = relabel(train, &positions)?;
        let test = relabel(test, &positions)?;
        for (name, set) in [("train", &train), ("test", &test)] {
            if let Some(c) = set.class_counts().iter().position(|&n| n == 0) {
                return Err(Error::Scenario(format!(
                    "{name} split has no sample of class position {c}"
                )));
            }
        }
        Ok(Self { scenario, train, test })
    }

    fn indices_in(set: &LabeledImageSet, range: std::ops::Range<usize>) -> Vec<usize> {
        (0..set.len()).filter(|&i| range.contains(&set.labels[i])).collect()
    }

    pub fn train_indices(&self, t: usize) -> Vec<usize> {
        Self::indices_in(&self.train, self.scenario.task_range(t))
    }

    pub fn test_indices(&self, t: usize) -> Vec<usize> {
        Self::indices_in(&self.test, self.scenario.task_range(t))
    }

    /// The first `per_class` test images of every class seen after task `t`.
    pub fn probe(&self, t: usize, per_class: usize) -> Vec<usize> {
        let seen = self.scenario.seen_after(t);
        let mut taken = vec![0; seen];
        let mut out = Vec::new();
        for (i, &l) in self.test.labels.iter().enumerate() {
            if l < seen && taken[l] < per_class {
                taken[l] += 1;
                out.push(i);
            }
        }
        out
    }
}

fn probe_report(
    model: &Backbone,
    data: &ScenarioData,
    t: usize,
    per_class: usize,
    procedure: Procedure,
    seed: u64,
) -> Result<NonlocalityReport> {
    let idx = data.probe(t, per_class.max(1));
    let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data.test.images[i]).collect();
    let mut traces: Vec<AttentionTrace> = Vec::with_capacity(imgs.len());
    for part in imgs.chunks(32) {
        traces.extend(model.forward(part, true)?.traces);
    }
    Ok(nonlocality_mean(&traces, model.grid())?.with_meta(t, procedure, seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CilRun {
    pub seed: u64,
    pub scenario: Scenario,
    /// NME accuracies.
    pub accuracy: AccuracyMatrix,
    pub metrics: CilMetrics,
    /// Accuracies of the classifier head, for reference.
    pub head_accuracy: AccuracyMatrix,
    pub head_metrics: CilMetrics,
    pub nonlocality: Vec<NonlocalityReport>,
    pub task_logs: Vec<TaskLog>,
    pub memory_sizes: Vec<usize>,
}

fn accuracy_row(
    model: &Backbone,
    memory: &RehearsalMemory,
    data: &ScenarioData,
    t: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut nme = Vec::with_capacity(t + 1);
    let mut head = Vec::with_capacity(t + 1);
    for k in 0..=t {
        let c = evaluate(model, Some(memory), &data.test, &data.test_indices(k))?;
        let n = c.total.max(1) as f64;
        nme.push(c.nme_correct as f64 / n);
        head.push(c.head_correct as f64 / n);
    }
    Ok((nme, head))
}

/// Full class-incremental run. `on_task` sees the model after every task.
pub fn run_cil(
    cfg: &CilConfig,
    data: &ScenarioData,
    seed: u64,
    mut on_task: impl FnMut(usize, &Backbone) -> Result<()>,
) -> Result<(CilRun, Backbone)> {
    let scenario = &data.scenario;
    let mut streams = TrainStreams::new(seed);
    let mut model = Backbone::new(cfg.backbone.clone(), &mut streams.init)?;
    let mut memory = RehearsalMemory::new(cfg.memory_capacity);
    let test_sizes = (0..scenario.num_tasks())
        .map(|t| data.test_indices(t).len())
        .collect::<Vec<_>>();
    let mut accuracy = AccuracyMatrix::new(test_sizes.clone());
    let mut head_accuracy = AccuracyMatrix::new(test_sizes);
    let mut nonlocality = Vec::new();
    let mut task_logs = Vec::new();
    let mut memory_sizes = Vec::new();
    let mut old_model: Option<Backbone> = None;
    for t in 0..scenario.num_tasks() {
        let mut samples = data.train_indices(t);
        samples.extend(memory.indices());
        let log = train_task(
            &mut model,
            &data.train,
            &samples,
            scenario.tasks[t].len(),
            old_model.as_ref(),
            &cfg.train,
            &mut streams,
        )?;
        let new_classes: Vec<usize> = scenario.task_range(t).collect();
        memory.update(&data.train, &new_classes, &model)?;
        memory_sizes.push(memory.len());
        let (nme, head) = accuracy_row(&model, &memory, data, t)?;
        accuracy.push_row(nme)?;
        head_accuracy.push_row(head)?;
        nonlocality.push(probe_report(
            &model,
            data,
            t,
            cfg.probe_per_class,
            Procedure::Cil,
            seed,
        )?);
        task_logs.push(log);
        on_task(t, &model)?;
        old_model = Some(model.clone());
    }
    let run = CilRun {
        seed,
        scenario: scenario.clone(),
        metrics: accuracy.metrics()?,
        accuracy,
        head_metrics: head_accuracy.metrics()?,
        head_accuracy,
        nonlocality,
        task_logs,
        memory_sizes,
    };
    Ok((run, model))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointPoint {
    pub task: usize,
    pub classes: usize,
    /// Head accuracy over the test images of the presented classes.
    pub accuracy: f64,
    pub nonlocality: NonlocalityReport,
    pub log: TaskLog,
}

/// Joint baselines: for every task in `tasks`, a fresh model trained on the
/// union of the classes presented up to that task.
pub fn run_joint(
    cfg: &CilConfig,
    data: &ScenarioData,
    seed: u64,
    tasks: &[usize],
    mut on_point: impl FnMut(usize, &Backbone) -> Result<()>,
) -> Result<Vec<JointPoint>> {
    let mut points = Vec::with_capacity(tasks.len());
    for &t in tasks {
        if t >= data.scenario.num_tasks() {
            return Err(Error::Scenario(format!("task {t} outside the scenario")));
        }
        let mut streams = TrainStreams::new(seed);
        let fresh = Backbone::new(cfg.backbone.clone(), &mut streams.init)?;
        let classes = data.scenario.seen_after(t);
        let (model, log) = joint_train(fresh, &data.train, classes, &cfg.train, &mut streams)?;
        let test: Vec<usize> = (0..data.test.len())
            .filter(|&i| data.test.labels[i] < classes)
            .collect();
        let counts = evaluate(&model, None, &data.test, &test)?;
        points.push(JointPoint {
            task: t,
            classes,
            accuracy: counts.head_correct as f64 / counts.total.max(1) as f64,
            nonlocality: probe_report(&model, data, t, cfg.probe_per_class, Procedure::Joint, seed)?,
            log,
        });
        on_point(t, &model)?;
    }
    Ok(points)
}
