//! Experiment orchestration: TOML configs, single training runs with CSV,
//! checkpoint and manifest output, multi-seed comparisons and the `β` / `p̂₀`
//! sweeps. Independent runs execute on a bounded rayon pool; results are
//! collected in job order so reports do not depend on scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{AdaGrad, AdaGradConfig, AdamW, AdamWConfig};
use crate::data::{epoch_order, load_mnist_dir, Dataset, Stream};
use crate::error::{Error, Result};
use crate::metrics::{test_accuracy, MetricsRow, OnlineMetrics, StateSummary, CSV_HEADER, DEFAULT_WINDOW};
use crate::model::{read_weights, write_weights, Activation, InitScheme, Model, ModelBuilder, ParamMode, Shape};
use crate::optimizer::{init_state, write_checkpoint, KalmanState, LokoConfig, P0Init};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides `data.dir` when set.
pub const MNIST_DIR_ENV: &str = "LOKO_MNIST_DIR";
pub const DEFAULT_PROBE_STEPS: u64 = 1000;
pub const BETA_GRID: [f64; 5] = [0.5, 0.9, 0.95, 0.98, 0.999];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seeds: Seeds,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Frozen and initial weights, LoRA factors.
    pub model: u64,
    /// Initial variances.
    pub p0: u64,
    /// Per-epoch stream order.
    pub shuffle: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            model: seed,
            p0: seed,
            shuffle: seed,
        }
    }

    pub fn offset(self, k: u64) -> Self {
        Seeds {
            model: self.model + k,
            p0: self.p0 + k,
            shuffle: self.shuffle + k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// conv 6@5×5 (pad 2) → pool → conv 16@5×5 → pool → 120 → 84 → classes.
    Lenet5,
    /// conv 4@5×5 → pool → conv 8@5×5 → pool → classes.
    SmallCnn,
    /// Optional input pooling, then `hidden` dense layers and the head.
    Mlp,
}

fn full() -> ParamMode {
    ParamMode::Full
}

fn one() -> usize {
    1
}

fn tanh() -> Activation {
    Activation::Tanh
}

fn xavier() -> InitScheme {
    InitScheme::XavierUniform
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    #[serde(default = "tanh")]
    pub activation: Activation,
    #[serde(default = "xavier")]
    pub init: InitScheme,
    #[serde(default = "one")]
    pub input_pool: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Trainability of convolution layers.
    #[serde(default = "full")]
    pub conv: ParamMode,
    /// Trainability of hidden dense layers.
    #[serde(default = "full")]
    pub dense: ParamMode,
    /// Trainability of the output layer.
    #[serde(default = "full")]
    pub head: ParamMode,
    /// Pretrained weights replacing the initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Keep the output layer at its initialization when loading `weights`.
    #[serde(default)]
    pub fresh_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Loko(LokoConfig),
    Adamw(AdamWConfig),
    Adagrad(AdaGradConfig),
}

impl OptimizerSpec {
    pub fn label(&self) -> String {
        match self {
            OptimizerSpec::Loko(c) => format!("loko[{}]", c.r_method.name()),
            OptimizerSpec::Adamw(_) => "adamw".into(),
            OptimizerSpec::Adagrad(_) => "adagrad".into(),
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

fn default_epochs() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Keep only these digits for training (and testing unless `test_labels` is set).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<Vec<usize>>,
    /// Train on a fixed random subset of this size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    /// Stop after this many observations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(default = "yes")]
    pub evaluate: bool,
}

fn every_step() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Write a CSV row every this many steps (and always on the last step).
    #[serde(default = "every_step")]
    pub csv_every: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Checkpoint the optimizer state every this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            csv_every: 1,
            window: DEFAULT_WINDOW,
            checkpoint_every: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let OptimizerSpec::Loko(c) = &self.optimizer {
            c.validate()?;
        }
        if self.model.input_pool == 0 {
            return Err(Error::InvalidConfig("input_pool must be ≥ 1".into()));
        }
        if self.output.csv_every == 0 {
            return Err(Error::InvalidConfig("csv_every must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::all(seed);
        self
    }
}

/// Builds the network described by `spec` for `classes` outputs on 28×28 inputs.
pub fn build_model(spec: &ModelSpec, input: Shape, classes: usize, seed: u64) -> Result<Model> {
    let act = spec.activation;
    let b = ModelBuilder::new(input);
    let b = match spec.arch {
        Arch::Lenet5 => b
            .conv2d(6, 5, 2, spec.conv)
            .activation(act)
            .avg_pool(2)
            .conv2d(16, 5, 0, spec.conv)
            .activation(act)
            .avg_pool(2)
            .flatten()
            .dense(120, spec.dense)
            .activation(act)
            .dense(84, spec.dense)
            .activation(act)
            .dense(classes, spec.head),
        Arch::SmallCnn => b
            .conv2d(4, 5, 0, spec.conv)
            .activation(act)
            .avg_pool(2)
            .conv2d(8, 5, 0, spec.conv)
            .activation(act)
            .avg_pool(2)
            .flatten()
            .dense(classes, spec.head),
        Arch::Mlp => {
            let mut b = if spec.input_pool > 1 {
                b.avg_pool(spec.input_pool)
            } else {
                b
            };
            b = b.flatten();
            for &width in &spec.hidden {
                b = b.dense(width, spec.dense).activation(act);
            }
            b.dense(classes, spec.head)
        }
    };
    let mut model = b.softmax().build(spec.init, seed)?;
    if let Some(path) = &spec.weights {
        let mut weights = read_weights(path)?;
        if spec.fresh_head {
            let initial = model.export_weights(&model.initial_params())?;
            if let (Some(head), Some(init)) = (weights.last_mut(), initial.last()) {
                *head = init.clone();
            }
        }
        model.load_weights(&weights)?;
    }
    Ok(model)
}

pub struct Datasets {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub fn resolve_data_dir(spec: &DataSpec) -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| spec.dir.clone())
}

pub fn prepare_data(spec: &DataSpec) -> Result<Datasets> {
    let dir = resolve_data_dir(spec);
    let mut train = load_mnist_dir(&dir, true)?;
    if let Some(labels) = &spec.labels {
        train = train.filter_labels(labels);
    }
    if let Some(limit) = spec.train_limit {
        if limit < train.len() {
            let order = epoch_order(train.len(), spec.subset_seed, u64::MAX);
            let mut idx = order[..limit].to_vec();
            idx.sort_unstable();
            train = train.select(&idx);
        }
    }
    if train.is_empty() {
        return Err(Error::Empty("training set is empty after filtering"));
    }
    let test = if spec.evaluate {
        let mut test = load_mnist_dir(&dir, false)?;
        if let Some(labels) = spec.test_labels.as_ref().or(spec.labels.as_ref()) {
            test = test.filter_labels(labels);
        }
        if let Some(limit) = spec.test_limit {
            test = test.take(limit);
        }
        Some(test)
    } else {
        None
    };
    Ok(Datasets { train, test })
}

/// The optimizer driving one run.
pub enum Learner {
    Loko(KalmanState),
    AdamW { opt: AdamW, theta: Vec<f64> },
    AdaGrad { opt: AdaGrad, theta: Vec<f64> },
}

impl Learner {
    pub fn new(spec: &OptimizerSpec, model: &Model, p0_seed: u64, total_steps: u64) -> Result<Self> {
        let theta = model.initial_params();
        Ok(match spec {
            OptimizerSpec::Loko(c) => Learner::Loko(init_state(theta, model.output_dim(), *c, p0_seed)?),
            OptimizerSpec::Adamw(c) => Learner::AdamW {
                opt: AdamW::new(theta.len(), *c, total_steps.max(1))?,
                theta,
            },
            OptimizerSpec::Adagrad(c) => Learner::AdaGrad {
                opt: AdaGrad::new(theta.len(), *c),
                theta,
            },
        })
    }

    pub fn theta(&self) -> &[f64] {
        match self {
            Learner::Loko(s) => &s.theta,
            Learner::AdamW { theta, .. } | Learner::AdaGrad { theta, .. } => theta,
        }
    }

    /// Predicts on `x`, then learns from `(x, target)`. Returns the prediction made
    /// before the update.
    pub fn observe(&mut self, model: &Model, x: &[f64], target: &[f64], step: u64) -> Result<(Vec<f64>, StateSummary)> {
        match self {
            Learner::Loko(state) => {
                let out = state.step(model, x, target)?;
                let d = out.diagnostics;
                Ok((
                    out.prediction,
                    StateSummary {
                        trace_r: d.trace_r,
                        min_p: d.min_p,
                        max_p: d.max_p,
                    },
                ))
            }
            Learner::AdamW { opt, theta } => {
                let pred = gradient_step(model, x, target, theta, |t, g| opt.step(t, g))?;
                check_params(theta, step)?;
                Ok((pred, StateSummary::NONE))
            }
            Learner::AdaGrad { opt, theta } => {
                let pred = gradient_step(model, x, target, theta, |t, g| opt.step(t, g))?;
                check_params(theta, step)?;
                Ok((pred, StateSummary::NONE))
            }
        }
    }
}

fn gradient_step(
    model: &Model,
    x: &[f64],
    target: &[f64],
    theta: &mut [f64],
    apply: impl FnOnce(&mut [f64], &[f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    let tape = model.forward_tape(x, theta)?;
    let mut grad = vec![0.0; theta.len()];
    model.cross_entropy_gradient(&tape, theta, target, &mut grad)?;
    apply(theta, &grad)?;
    Ok(tape.output().to_vec())
}

fn check_params(theta: &[f64], step: u64) -> Result<()> {
    if theta.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "parameters",
            step: step + 1,
        })
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteActivation { .. } | Error::NotPositiveDefinite { .. }
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub optimizer: String,
    pub steps: u64,
    pub acc_top1: f64,
    pub acc_top5: f64,
    pub moving_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence_reason: Option<String>,
    pub wall_time_secs: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    config_hash: String,
    seeds: Seeds,
    wall_time_secs: f64,
    summary: RunSummary,
    config: ExperimentConfig,
}

/// Runs one experiment. With `out`, writes `metrics.csv`, `weights.bin`,
/// `state.ckpt` (Kalman runs) and `manifest.toml` into that directory.
pub fn run(cfg: &ExperimentConfig, data: &Datasets, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let (rows, cols) = data.train.image_shape();
    let classes = data.train.classes();
    let model = build_model(&cfg.model, Shape::image(1, rows, cols), classes, cfg.seeds.model)?;
    let stream = Stream::new(&data.train, cfg.seeds.shuffle, cfg.data.epochs);
    let planned = cfg
        .data
        .max_steps
        .map_or(stream.total_steps(), |m| m.min(stream.total_steps()));
    let mut learner = Learner::new(&cfg.optimizer, &model, cfg.seeds.p0, planned)?;
    let mut metrics = OnlineMetrics::new(classes, cfg.output.window);

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut csv = match out {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let mut diverged_at = None;
    let mut reason = None;
    let mut last_row: Option<MetricsRow> = None;
    for sample in stream.take(planned as usize) {
        match learner.observe(&model, &sample.x, &sample.y, sample.step) {
            Ok((pred, summary)) => {
                let row = metrics.record(&pred, &sample.y, summary)?;
                if let Some((w, path)) = csv.as_mut() {
                    if row.step % cfg.output.csv_every == 0 || row.step == planned {
                        row.write_csv(w).map_err(|e| Error::io(path.as_path(), e))?;
                    }
                }
                last_row = Some(row);
                if let (Some(every), Some(dir), Learner::Loko(state)) = (cfg.output.checkpoint_every, out, &learner) {
                    if row.step % every == 0 {
                        write_checkpoint(&dir.join(format!("state-{:08}.ckpt", row.step)), state)?;
                    }
                }
            }
            Err(e) if is_divergence(&e) => {
                metrics.mark_non_finite();
                diverged_at = Some(sample.step + 1);
                reason = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if let Some((mut w, path)) = csv {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let diverged = metrics.diverged();
    if diverged && reason.is_none() {
        reason = Some("online accuracy at chance level".into());
    }
    let test_accuracy = match (&data.test, diverged_at) {
        (Some(test), None) => Some(evaluate(&model, learner.theta(), test)?),
        _ => None,
    };
    let acc = metrics.accuracy();
    let summary = RunSummary {
        name: cfg.name.clone(),
        optimizer: cfg.optimizer.label(),
        steps: acc.seen,
        acc_top1: acc.top1(),
        acc_top5: acc.top5(),
        moving_loss: last_row.map_or(f64::NAN, |r| r.moving_loss),
        test_accuracy,
        diverged,
        diverged_at,
        divergence_reason: reason,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out {
        if diverged_at.is_none() {
            write_weights(&dir.join("weights.bin"), &model.export_weights(learner.theta())?)?;
            if let Learner::Loko(state) = &learner {
                write_checkpoint(&dir.join("state.ckpt"), state)?;
            }
        }
        let manifest = Manifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds,
            wall_time_secs: summary.wall_time_secs,
            summary: summary.clone(),
            config: cfg.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format {
            what: "manifest",
            detail: e.to_string(),
        })?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

/// Held-out Top-1 accuracy.
pub fn evaluate(model: &Model, theta: &[f64], test: &Dataset) -> Result<f64> {
    let preds = (0..test.len())
        .map(|i| model.forward(&test.image(i), theta))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..test.len()).map(|i| test.label(i)).collect();
    Ok(test_accuracy(&preds, &labels))
}

/// Reads the config embedded in a run manifest.
pub fn manifest_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        what: "manifest",
        detail: e.to_string(),
    })?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Format {
            what: "manifest",
            detail: "config hash does not match embedded config".into(),
        });
    }
    Ok(manifest.config)
}

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

/// Runs every config on the pool, results in input order.
pub fn run_all(cfgs: &[ExperimentConfig], data: &Datasets, workers: usize) -> Result<Vec<RunSummary>> {
    let pool = worker_pool(workers)?;
    pool.install(|| cfgs.par_iter().map(|c| run(c, data, None)).collect())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub runs: Vec<RunSummary>,
    pub acc_mean: f64,
    pub acc_std: f64,
}

/// Runs each config with seeds `s, s+1, …` (`seeds` runs each) and reports
/// mean ± std of the final average online accuracy.
pub fn compare(cfgs: &[ExperimentConfig], data: &Datasets, seeds: u64, workers: usize) -> Result<Vec<CompareRow>> {
    if cfgs.len() > 1 && cfgs.iter().any(|c| c.data != cfgs[0].data) {
        return Err(Error::InvalidConfig(
            "compared configs must share the data section".into(),
        ));
    }
    let jobs: Vec<ExperimentConfig> = cfgs
        .iter()
        .flat_map(|c| {
            (0..seeds).map(move |k| ExperimentConfig {
                seeds: c.seeds.offset(k),
                ..c.clone()
            })
        })
        .collect();
    let results = run_all(&jobs, data, workers)?;
    Ok(cfgs
        .iter()
        .zip(results.chunks(seeds as usize))
        .map(|(c, runs)| {
            let accs: Vec<f64> = runs.iter().map(|r| r.acc_top1).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            CompareRow {
                name: if c.name.is_empty() {
                    c.optimizer.label()
                } else {
                    c.name.clone()
                },
                runs: runs.to_vec(),
                acc_mean,
                acc_std,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BetaRow {
    pub beta: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub test_mean: Option<f64>,
    pub diverged: bool,
}

pub fn sweep_beta(
    cfg: &ExperimentConfig,
    data: &Datasets,
    values: &[f64],
    seeds: u64,
    workers: usize,
) -> Result<Vec<BetaRow>> {
    let OptimizerSpec::Loko(base) = cfg.optimizer else {
        return Err(Error::InvalidConfig("beta sweep needs a loko optimizer".into()));
    };
    if let Some(bad) = values.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
        return Err(Error::InvalidConfig(format!("beta {bad} outside (0, 1)")));
    }
    let cfgs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&beta| ExperimentConfig {
            optimizer: OptimizerSpec::Loko(LokoConfig { beta, ..base }),
            ..cfg.clone()
        })
        .collect();
    let rows = compare(&cfgs, data, seeds, workers)?;
    Ok(values
        .iter()
        .zip(rows)
        .map(|(&beta, row)| {
            let tests: Vec<f64> = row.runs.iter().filter_map(|r| r.test_accuracy).collect();
            BetaRow {
                beta,
                acc_mean: row.acc_mean,
                acc_std: row.acc_std,
                test_mean: (tests.len() == row.runs.len()).then(|| mean_std(&tests).0),
                diverged: row.runs.iter().any(|r| r.diverged),
            }
        })
        .collect())
}

/// `per_decade` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || per_decade == 0 {
        return Err(Error::InvalidConfig(format!(
            "grid [{lo}, {hi}] with {per_decade} points per decade"
        )));
    }
    let decades = (hi / lo).log10();
    let count = (decades * per_decade as f64).round() as usize;
    Ok((0..=count)
        .map(|i| lo * 10f64.powf(i as f64 / per_decade as f64))
        .collect())
}

/// Largest contiguous run of non-diverged grid points, earliest on ties.
pub fn stable_interval(grid: &[f64], diverged: &[bool]) -> Option<(f64, f64)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for i in 0..=grid.len() {
        let ok = i < grid.len() && !diverged[i];
        match (ok, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(a, b)| i - s > b - a + 1) {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    best.map(|(a, b)| (grid[a], grid[b]))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub p0: String,
    pub init: InitScheme,
    pub value: f64,
    pub acc_top1: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct P0Bounds {
    pub p0: String,
    pub init: InitScheme,
    pub interval: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct P0Report {
    pub probes: Vec<ProbeResult>,
    pub bounds: Vec<P0Bounds>,
}

fn p0_name(p: P0Init) -> &'static str {
    match p {
        P0Init::Constant { .. } => "constant",
        P0Init::Uniform { .. } => "uniform",
    }
}

/// Probes every `(p̂₀ method, init scheme, grid value)` for `steps` observations
/// and reports the stable interval per method and scheme.
pub fn sweep_p0(
    cfg: &ExperimentConfig,
    data: &Datasets,
    grid: &[f64],
    schemes: &[InitScheme],
    steps: u64,
    workers: usize,
) -> Result<P0Report> {
    let OptimizerSpec::Loko(base) = cfg.optimizer else {
        return Err(Error::InvalidConfig("p0 sweep needs a loko optimizer".into()));
    };
    if grid.is_empty() {
        return Err(Error::InvalidConfig("p0 grid is empty".into()));
    }
    let methods = [P0Init::Constant { value: 1.0 }, P0Init::Uniform { upper_bound: 1.0 }];
    let mut keys = Vec::new();
    let mut jobs = Vec::new();
    for method in methods {
        for &init in schemes {
            for &value in grid {
                keys.push((method, init, value));
                let mut c = cfg.clone();
                c.model.init = init;
                c.optimizer = OptimizerSpec::Loko(LokoConfig {
                    p0: method.with_scale(value),
                    ..base
                });
                c.data.max_steps = Some(steps);
                c.data.evaluate = false;
                jobs.push(c);
            }
        }
    }
    let data = Datasets {
        train: data.train.clone(),
        test: None,
    };
    let results = run_all(&jobs, &data, workers)?;
    let probes: Vec<ProbeResult> = keys
        .iter()
        .zip(&results)
        .map(|(&(method, init, value), r)| ProbeResult {
            p0: p0_name(method).into(),
            init,
            value,
            acc_top1: r.acc_top1,
            diverged: r.diverged,
        })
        .collect();
    let mut bounds = Vec::new();
    for chunk in probes.chunks(grid.len()) {
        let flags: Vec<bool> = chunk.iter().map(|p| p.diverged).collect();
        bounds.push(P0Bounds {
            p0: chunk[0].p0.clone(),
            init: chunk[0].init,
            interval: stable_interval(grid, &flags),
        });
    }
    Ok(P0Report { probes, bounds })
}
