//! The experiment commands behind the `lpa` binary. Each writes its reports
//! under `RunConfig::out` and returns them.
//!
//! Layout of the output directory:
//!
//! ```text
//! config.txt                        effective config
//! train-cil.json                    per-seed runs and seed means
//! seed-<s>/task-<t>.ckpt            CIL model after task t
//! seed-<s>/nonlocality-task-<t>.csv
//! seed-<s>/run.json
//! train-joint.json
//! seed-<s>/joint-nonlocality-task-<t>.csv
//! ablate-lambda.{csv,json}, ablate-lpa-layers.{csv,json}
//! rollout.pgm, rollout.json, spectrum.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{checkpoint, Backbone};
use crate::cil::{run_cil, run_joint, CilConfig, CilMetrics, CilRun, JointPoint, ScenarioData};
use crate::config::{AttentionChoice, DataSource, RunConfig};
use crate::data::{load_raw, synth_local_textures, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    attention_rollout, covariance_spectrum, write_json, write_nonlocality_csv, write_pgm, RolloutOptions,
    SpectrumReport,
};
use crate::seeding::{derived_seed, Stream};
use crate::tensor::Tensor;

pub type ConfigEcho = BTreeMap<String, String>;

fn echo(cfg: &RunConfig) -> ConfigEcho {
    cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Creates the output directory and writes `config.txt` into it.
fn start(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn seed_dir(cfg: &RunConfig, seed: u64) -> Result<PathBuf> {
    let dir = cfg.out.join(format!("seed-{seed}"));
    create_dir(&dir)?;
    Ok(dir)
}

/// Train and test splits for one seed.
pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    match cfg.source {
        DataSource::Synth => {
            let ds = synth_local_textures(&cfg.synth, derived_seed(seed, Stream::Data))?;
            Ok((ds.train, ds.test))
        }
        DataSource::Raw => {
            let missing = || Error::Config("raw data needs data.train_path and data.test_path".into());
            let train = load_raw(cfg.train_path.as_deref().ok_or_else(missing)?, Split::Train)?;
            let test = load_raw(cfg.test_path.as_deref().ok_or_else(missing)?, Split::Test)?;
            Ok((train, test))
        }
    }
}

/// CIL settings and scenario data for one seed.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<(CilConfig, ScenarioData)> {
    let (train, test) = load_data(cfg, seed)?;
    let cil = cfg.cil(train.channels, train.height, train.width);
    let data = ScenarioData::new(&train, &test, cfg.base, cfg.increment, seed)?;
    Ok((cil, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub last: f64,
    pub avg: f64,
    pub forgetting: f64,
}

impl MeanMetrics {
    pub fn of(metrics: &[CilMetrics]) -> Self {
        let n = metrics.len().max(1) as f64;
        Self {
            last: metrics.iter().map(|m| m.last).sum::<f64>() / n,
            avg: metrics.iter().map(|m| m.avg).sum::<f64>() / n,
            forgetting: metrics.iter().map(|m| m.forgetting).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CilReport {
    pub config: ConfigEcho,
    pub runs: Vec<CilRun>,
    pub mean: MeanMetrics,
}

fn cil_seed(cfg: &RunConfig, seed: u64, write: bool) -> Result<CilRun> {
    let (cil, data) = prepare(cfg, seed)?;
    let dir = if write { Some(seed_dir(cfg, seed)?) } else { None };
    let save = cfg.save_checkpoints;
    let (run, _) = run_cil(&cil, &data, seed, |t, model| match &dir {
        Some(dir) if save => checkpoint::save(model, &dir.join(format!("task-{t}.ckpt"))),
        _ => Ok(()),
    })?;
    if let Some(dir) = dir {
        for report in &run.nonlocality {
            write_nonlocality_csv(
                std::slice::from_ref(report),
                &dir.join(format!("nonlocality-task-{}.csv", report.task)),
            )?;
        }
        write_json(&run, &dir.join("run.json"))?;
    }
    Ok(run)
}

pub fn train_cil(cfg: &RunConfig) -> Result<CilReport> {
    start(cfg)?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| cil_seed(cfg, s, true))
        .collect::<Result<Vec<_>>>()?;
    let report = CilReport {
        config: echo(cfg),
        mean: MeanMetrics::of(&runs.iter().map(|r| r.metrics).collect::<Vec<_>>()),
        runs,
    };
    write_json(&report, &cfg.out.join("train-cil.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSeed {
    pub seed: u64,
    pub points: Vec<JointPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointReport {
    pub config: ConfigEcho,
    pub runs: Vec<JointSeed>,
}

pub fn train_joint(cfg: &RunConfig) -> Result<JointReport> {
    start(cfg)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (cil, data) = prepare(cfg, seed)?;
        let tasks = match &cfg.joint_tasks {
            Some(t) => t.clone(),
            None => (0..data.scenario.num_tasks()).collect(),
        };
        let points = run_joint(&cil, &data, seed, &tasks, |_, _| Ok(()))?;
        let dir = seed_dir(cfg, seed)?;
        for p in &points {
            write_nonlocality_csv(
                std::slice::from_ref(&p.nonlocality),
                &dir.join(format!("joint-nonlocality-task-{}.csv", p.task)),
            )?;
        }
        runs.push(JointSeed { seed, points });
    }
    let report = JointReport {
        config: echo(cfg),
        runs,
    };
    write_json(&report, &cfg.out.join("train-joint.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub seed: u64,
    pub last: f64,
    pub avg: f64,
    pub forgetting: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    /// `lambda0` or `lpa_layers`.
    pub factor: String,
    pub config: ConfigEcho,
    pub rows: Vec<AblationRow>,
    /// `(value, seed-mean Avg)` per ablated value.
    pub mean_avg: Vec<(f64, f64)>,
}

impl AblationTable {
    pub fn mean_avg_at(&self, value: f64) -> Option<f64> {
        self.mean_avg.iter().find(|(v, _)| *v == value).map(|&(_, a)| a)
    }
}

fn ablate(cfg: &RunConfig, factor: &str, values: &[f64], apply: impl Fn(&mut RunConfig, f64)) -> Result<AblationTable> {
    start(cfg)?;
    if values.is_empty() {
        return Err(Error::Config(format!("no {factor} values to ablate")));
    }
    let mut rows = Vec::new();
    let mut mean_avg = Vec::new();
    for &value in values {
        let mut variant = cfg.clone();
        apply(&mut variant, value);
        let mut total = 0.0;
        for &seed in &cfg.seeds {
            let run = cil_seed(&variant, seed, false)?;
            total += run.metrics.avg;
            rows.push(AblationRow {
                value,
                seed,
                last: run.metrics.last,
                avg: run.metrics.avg,
                forgetting: run.metrics.forgetting,
            });
        }
        mean_avg.push((value, total / cfg.seeds.len() as f64));
    }
    let table = AblationTable {
        factor: factor.to_string(),
        config: echo(cfg),
        rows,
        mean_avg,
    };
    let stem = match factor {
        "lambda0" => "ablate-lambda",
        _ => "ablate-lpa-layers",
    };
    write_ablation_csv(&table, &cfg.out.join(format!("{stem}.csv")))?;
    write_json(&table, &cfg.out.join(format!("{stem}.json")))?;
    Ok(table)
}

fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    w.write_record([table.factor.as_str(), "seed", "last", "avg", "forgetting"])
        .map_err(ser)?;
    for r in &table.rows {
        w.write_record([
            r.value.to_string(),
            r.seed.to_string(),
            r.last.to_string(),
            r.avg.to_string(),
            r.forgetting.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Avg accuracy with every LPA head initialized at each λ₀ of
/// `cfg.lambdas`.
pub fn ablate_lambda(cfg: &RunConfig) -> Result<AblationTable> {
    ablate(cfg, "lambda0", &cfg.lambdas, |c, v| {
        c.attention = AttentionChoice::Lpa;
        c.model.lambda0 = v;
    })
}

/// Avg accuracy with the shallowest `count` blocks using LPA, for each count
/// in `cfg.layer_counts`.
pub fn ablate_lpa_layers(cfg: &RunConfig) -> Result<AblationTable> {
    let counts: Vec<f64> = cfg.layer_counts.iter().map(|&c| c as f64).collect();
    ablate(cfg, "lpa_layers", &counts, |c, v| {
        c.attention = AttentionChoice::Lpa;
        c.model.lpa_layers = v as usize;
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutReport {
    pub image_index: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub from_layer: usize,
    pub to_layer: usize,
    pub residual: bool,
    /// Class-token heat per patch, row-major; length `grid_h · grid_w`.
    pub heat: Vec<f64>,
}

fn check_geometry(model: &Backbone, set: &LabeledImageSet) -> Result<()> {
    let c = model.config();
    if (c.channels, c.image_height, c.image_width) != (set.channels, set.height, set.width) {
        return Err(Error::Config(format!(
            "images are {}×{}×{} but the checkpoint expects {}×{}×{}",
            set.channels, set.height, set.width, c.channels, c.image_height, c.image_width
        )));
    }
    Ok(())
}

/// Class-token rollout over every self-attention layer for one image of an
/// IMG1 file; writes `rollout.pgm` and `rollout.json`.
pub fn rollout(cfg: &RunConfig, checkpoint_path: &Path, images: &Path, index: usize) -> Result<RolloutReport> {
    create_dir(&cfg.out)?;
    let model = checkpoint::load(checkpoint_path)?;
    let set = load_raw(images, Split::Test)?;
    check_geometry(&model, &set)?;
    let image = set
        .images
        .get(index)
        .ok_or_else(|| Error::Config(format!("image index {index} outside a file of {} images", set.len())))?;
    let (_, _, trace) = model.forward_one(image, true)?;
    let trace = trace.ok_or_else(|| Error::Metrics("forward returned no attention trace".into()))?;
    let last = trace.num_layers() - 1;
    let map = attention_rollout(
        &trace,
        0,
        last,
        RolloutOptions {
            residual: cfg.rollout_residual,
        },
    )?;
    let grid = model.grid();
    let report = RolloutReport {
        image_index: index,
        grid_h: grid.grid_h(),
        grid_w: grid.grid_w(),
        from_layer: 0,
        to_layer: last,
        residual: cfg.rollout_residual,
        heat: map.class_heat,
    };
    write_pgm(&report.heat, report.grid_w, report.grid_h, &cfg.out.join("rollout.pgm"))?;
    write_json(&report, &cfg.out.join("rollout.json"))?;
    Ok(report)
}

/// Covariance spectrum of the representations of a dataset; the test split
/// of the configured data for the first seed when `images` is `None`.
pub fn spectrum(cfg: &RunConfig, checkpoint_path: &Path, images: Option<&Path>) -> Result<SpectrumReport> {
    create_dir(&cfg.out)?;
    let model = checkpoint::load(checkpoint_path)?;
    let set = match images {
        Some(path) => load_raw(path, Split::Test)?,
        None => {
            let seed = *cfg.seeds.first().ok_or_else(|| Error::Config("no seed given".into()))?;
            load_data(cfg, seed)?.1
        }
    };
    check_geometry(&model, &set)?;
    let refs: Vec<&Tensor> = set.images.iter().collect();
    let reps = model.representations(&refs, 64)?;
    let report = covariance_spectrum(&reps, cfg.spectrum_top)?;
    write_json(&report, &cfg.out.join("spectrum.json"))?;
    Ok(report)
}
