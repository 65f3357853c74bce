//! The continual-learning loop: per-task training against the accumulated
//! penalty, posterior harvesting after each task, evaluation matrices and the
//! ACC / BWT summary metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curvature::{
    self, build_bfgs, build_sr1, sample_sy, z_from_sr1, CurvatureError, CurvatureFactor, FisherDiag,
    NetworkOracle, SamplingConfig, YMode,
};
use crate::data::{
    self, mix, permuted_mnist, rotated_mnist, synthetic_sequence, DataError, Dataset, MnistData,
    RotationSpec, SplitCaps, SyntheticSpec, TaskSequence,
};
use crate::nn::{self, Batch, MlpArchitecture, Mode, NnError, OptimizerConfig, OptimizerState, ParamVector};
use crate::regularizer::{MemoryCost, Method, RegularizerError, RegularizerState, Strategy};

const EVAL_BATCH: usize = 1000;

/// Wall-clock timer that reads zero where no system clock exists (browser wasm).
#[derive(Clone, Copy)]
struct Timer(#[cfg(not(target_family = "wasm"))] std::time::Instant);

impl Timer {
    fn start() -> Self {
        Timer(
            #[cfg(not(target_family = "wasm"))]
            std::time::Instant::now(),
        )
    }

    fn secs(&self) -> f64 {
        #[cfg(not(target_family = "wasm"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_family = "wasm")]
        0.0
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite training loss on task {task} at step {step}")]
    NonFiniteLoss { task: usize, step: usize },
    #[error("task {task}: {source}")]
    Curvature {
        task: usize,
        #[source]
        source: CurvatureError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

/// Broad failure classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    DataMissing,
    Numerical,
    Other,
}

impl TrainError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            TrainError::Config(_) => ErrorCategory::Config,
            TrainError::Data(DataError::Missing(_)) => ErrorCategory::DataMissing,
            TrainError::Data(_) => ErrorCategory::DataMissing,
            TrainError::NonFiniteLoss { .. } => ErrorCategory::Numerical,
            TrainError::Curvature { source, .. } => match source {
                CurvatureError::Io(_) => ErrorCategory::Other,
                _ => ErrorCategory::Numerical,
            },
            TrainError::Nn(NnError::NonFiniteGradient { .. }) => ErrorCategory::Numerical,
            TrainError::Regularizer(RegularizerError::Curvature(_)) => ErrorCategory::Numerical,
            _ => ErrorCategory::Other,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Task generator of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    RotatedMnist {
        tasks: usize,
        degrees_per_task: f64,
    },
    PermutedMnist {
        tasks: usize,
    },
    Synthetic {
        tasks: usize,
        dim: usize,
        classes: usize,
        shift: f64,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_synthetic_train")]
        train_per_task: usize,
        #[serde(default = "default_synthetic_eval")]
        valid_per_task: usize,
        #[serde(default = "default_synthetic_eval")]
        test_per_task: usize,
    },
}

fn default_separation() -> f64 {
    4.0
}
fn default_synthetic_train() -> usize {
    1000
}
fn default_synthetic_eval() -> usize {
    300
}

impl DatasetConfig {
    pub fn tasks(&self) -> usize {
        match self {
            DatasetConfig::RotatedMnist { tasks, .. }
            | DatasetConfig::PermutedMnist { tasks }
            | DatasetConfig::Synthetic { tasks, .. } => *tasks,
        }
    }

    pub fn needs_mnist(&self) -> bool {
        !matches!(self, DatasetConfig::Synthetic { .. })
    }
}

/// Everything that defines one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub method: Method,
    #[serde(default)]
    pub strategy: Strategy,
    pub lambda: f64,
    /// Requested curvature pairs per task.
    #[serde(rename = "M", default = "default_pairs")]
    pub pairs: usize,
    /// Column budget of the reducing strategies; defaults to `M`.
    #[serde(default)]
    pub target_cols: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub y_mode: YMode,
    #[serde(default = "default_curvature_batch")]
    pub curvature_batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train_cap: Option<usize>,
    #[serde(default)]
    pub valid_cap: Option<usize>,
    #[serde(default)]
    pub test_cap: Option<usize>,
    #[serde(default)]
    pub shuffle_task_order: bool,
    /// Output directory, if the run should persist artifacts.
    #[serde(default)]
    pub out: Option<String>,
}

fn default_pairs() -> usize {
    10
}
fn default_eps() -> f64 {
    1e-4
}
fn default_kappa() -> f64 {
    1e-12
}
fn default_fd_step() -> f64 {
    1e-3
}
fn default_curvature_batch() -> usize {
    2048
}
fn default_epochs() -> usize {
    3
}
fn default_batch_size() -> usize {
    64
}
fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_dropout() -> f32 {
    0.25
}

impl ExperimentConfig {
    /// Rotated MNIST at laptop scale: 5 tasks 10 degrees apart, 10k training
    /// images per task, 3 epochs.
    pub fn desk_mnist(method: Method, lambda: f64) -> Self {
        Self {
            dataset: DatasetConfig::RotatedMnist {
                tasks: 5,
                degrees_per_task: 10.0,
            },
            train_cap: Some(10_000),
            ..Self::base(method, lambda)
        }
    }

    /// Small drifting-blob sequence that trains in seconds.
    pub fn synthetic(method: Method, lambda: f64) -> Self {
        Self {
            dataset: DatasetConfig::Synthetic {
                tasks: 4,
                dim: 10,
                classes: 3,
                shift: 2.0,
                separation: default_separation(),
                train_per_task: 500,
                valid_per_task: 200,
                test_per_task: 200,
            },
            hidden: vec![16],
            dropout: 0.0,
            epochs: 10,
            batch_size: 32,
            curvature_batch: 256,
            optimizer: OptimizerConfig {
                lr: 5e-3,
                ..OptimizerConfig::default()
            },
            ..Self::base(method, lambda)
        }
    }

    fn base(method: Method, lambda: f64) -> Self {
        Self {
            dataset: DatasetConfig::PermutedMnist { tasks: 1 },
            method,
            strategy: Strategy::None,
            lambda,
            pairs: default_pairs(),
            target_cols: None,
            eps: default_eps(),
            kappa: default_kappa(),
            fd_step: default_fd_step(),
            y_mode: YMode::FdHvp,
            curvature_batch: default_curvature_batch(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            optimizer: OptimizerConfig::default(),
            hidden: default_hidden(),
            dropout: default_dropout(),
            seed: 0,
            train_cap: None,
            valid_cap: None,
            test_cap: None,
            shuffle_task_order: false,
            out: None,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            pairs: self.pairs,
            eps: self.eps,
            kappa: self.kappa,
            fd_step: self.fd_step,
            y_mode: self.y_mode,
            curvature_batch: self.curvature_batch,
        }
    }

    pub fn target_cols(&self) -> usize {
        self.target_cols.unwrap_or(self.pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.strategy != Strategy::None && !self.method.uses_curvature() {
            return bad(format!("strategy {} requires a csqn method, got {}", self.strategy, self.method));
        }
        if self.dataset.tasks() == 0 {
            return bad("at least one task is required".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("optimizer lr must be positive".into());
        }
        if self.method.uses_curvature() {
            self.sampling()
                .validate()
                .map_err(|e| TrainError::Config(e.to_string()))?;
            if self.target_cols() == 0 {
                return bad("target_cols must be positive".into());
            }
        }
        if let DatasetConfig::Synthetic { dim, classes, .. } = &self.dataset {
            if *dim < 2 || *classes < 2 {
                return bad("synthetic tasks need dim >= 2 and classes >= 2".into());
            }
        }
        Ok(())
    }

    /// Canonical JSON (sorted keys) of the config without `seed` and `out`,
    /// hashed with SHA-256. Replicates that differ only in seed share a hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("seed");
            map.remove("out");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn architecture(&self, input: usize, classes: usize) -> Result<MlpArchitecture> {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(classes);
        Ok(MlpArchitecture::new(widths, self.dropout)?)
    }
}

/// Builds the task sequence of a config.
pub fn build_sequence(cfg: &ExperimentConfig, mnist: Option<&Arc<MnistData>>) -> Result<TaskSequence> {
    let caps = SplitCaps {
        train: cfg.train_cap,
        valid: cfg.valid_cap,
        test: cfg.test_cap,
    };
    let need = || {
        mnist.cloned().ok_or_else(|| {
            TrainError::Data(DataError::Missing(PathBuf::from(
                "MNIST (set --data or CSQN_DATA to the directory holding the IDX files)",
            )))
        })
    };
    let seq = match &cfg.dataset {
        DatasetConfig::RotatedMnist {
            tasks,
            degrees_per_task,
        } => rotated_mnist(
            need()?,
            RotationSpec {
                tasks: *tasks,
                degrees_per_task: *degrees_per_task,
            },
            caps,
            cfg.seed,
        )?,
        DatasetConfig::PermutedMnist { tasks } => permuted_mnist(need()?, *tasks, caps, cfg.seed)?,
        DatasetConfig::Synthetic {
            tasks,
            dim,
            classes,
            shift,
            separation,
            train_per_task,
            valid_per_task,
            test_per_task,
        } => synthetic_sequence(&SyntheticSpec {
            tasks: *tasks,
            dim: *dim,
            classes: *classes,
            shift: *shift,
            seed: cfg.seed,
            separation: *separation,
            train_per_task: *train_per_task,
            valid_per_task: *valid_per_task,
            test_per_task: *test_per_task,
        })?,
    };
    Ok(if cfg.shuffle_task_order {
        seq.shuffled(cfg.seed)
    } else {
        seq
    })
}

/// Summary of one task's training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    /// Mean cross-entropy over the last epoch.
    pub final_loss: f64,
    /// Penalty value at the last step.
    pub final_penalty: f64,
}

fn gather(data: &Dataset, idx: &[usize], inputs: &mut Vec<f32>, labels: &mut Vec<u8>) {
    inputs.clear();
    labels.clear();
    for &i in idx {
        inputs.extend_from_slice(data.row(i));
        labels.push(data.labels[i]);
    }
}

/// Trains `theta` on one task with cross-entropy plus the state's penalty.
/// Optimizer state starts fresh for every task.
pub fn train_task(
    arch: &MlpArchitecture,
    theta: &mut ParamVector,
    state: &RegularizerState,
    data: &Dataset,
    cfg: &ExperimentConfig,
    task: usize,
) -> Result<TrainStats> {
    if data.is_empty() {
        return Err(TrainError::Config(format!("task {task} has no training data")));
    }
    let penalized = state.method != Method::FineTune && state.tasks_done > 0 && state.lambda != 0.0;
    let mut opt = OptimizerState::new(cfg.optimizer, theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, task as u64, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut inputs = Vec::with_capacity(cfg.batch_size * data.dim);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let mut step = 0;
    let mut final_loss = 0.0;
    let mut final_penalty = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            gather(data, chunk, &mut inputs, &mut labels);
            let batch = Batch::new(&inputs, &labels, data.dim)?;
            let (loss, mut grad) = nn::loss_and_grad(arch, &theta.0, &batch, Mode::Train, &mut rng)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { task, step });
            }
            if penalized {
                let p = state.penalty(&theta.to_f64())?;
                for (g, pg) in grad.iter_mut().zip(&p.gradient) {
                    *g += *pg as f32;
                }
                final_penalty = p.value;
            }
            opt.step(&mut theta.0, &grad).map_err(|e| match e {
                NnError::NonFiniteGradient { .. } => TrainError::NonFiniteLoss { task, step },
                other => other.into(),
            })?;
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        final_loss = epoch_loss / batches as f64;
    }
    Ok(TrainStats {
        steps: step,
        final_loss,
        final_penalty,
    })
}

/// What was harvested after a task.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub fisher: FisherDiag,
    pub factor: Option<CurvatureFactor>,
    pub accepted_pairs: usize,
    pub attempts: usize,
}

/// Seeded draw (without replacement) of the fixed curvature batch, in 64-bit.
fn curvature_batch(data: &Dataset, size: usize, seed: u64, task: usize) -> (Vec<f64>, Vec<u8>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, task as u64, 2)));
    idx.truncate(size.min(data.len()));
    idx.sort_unstable();
    let mut inputs = Vec::with_capacity(idx.len() * data.dim);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in &idx {
        inputs.extend(data.row(i).iter().map(|&v| v as f64));
        labels.push(data.labels[i]);
    }
    (inputs, labels)
}

/// Fisher diagonal and (for CSQN) the curvature factor at the trained
/// parameters, from one fixed batch of the task's training data.
pub fn harvest_posterior(
    arch: &MlpArchitecture,
    theta: &ParamVector,
    data: &Dataset,
    cfg: &ExperimentConfig,
    task: usize,
    threads: usize,
) -> Result<Posterior> {
    let n = theta.len();
    if cfg.method == Method::FineTune {
        return Ok(Posterior {
            fisher: FisherDiag::zeros(n),
            factor: None,
            accepted_pairs: 0,
            attempts: 0,
        });
    }
    let curv = |source| TrainError::Curvature { task, source };
    let (x, y) = curvature_batch(data, cfg.curvature_batch, cfg.seed, task);
    let batch = Batch::new(&x, &y, data.dim)?;
    let oracle = NetworkOracle { arch, batch };
    let theta64 = theta.to_f64();
    let (grad_star, fisher) = oracle.gradient_and_fisher(&theta64).map_err(curv)?;
    let Some(kind) = cfg.method.pair_kind() else {
        return Ok(Posterior {
            fisher,
            factor: None,
            accepted_pairs: 0,
            attempts: 0,
        });
    };
    let pairs = sample_sy(
        &theta64,
        &grad_star,
        &cfg.sampling(),
        kind,
        &fisher,
        &oracle,
        mix(cfg.seed, task as u64, 3),
        threads,
    )
    .map_err(curv)?;
    let provenance = vec![task];
    let factor = match kind {
        curvature::PairKind::Bfgs => {
            CurvatureFactor::Bfgs(build_bfgs(&fisher, &pairs, provenance).map_err(curv)?)
        }
        curvature::PairKind::Sr1 => {
            let parts = build_sr1(&fisher, &pairs).map_err(curv)?;
            CurvatureFactor::LowRank(z_from_sr1(&parts, provenance).map_err(curv)?)
        }
    };
    Ok(Posterior {
        fisher,
        factor: Some(factor),
        accepted_pairs: pairs.len(),
        attempts: pairs.attempts,
    })
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Eval-mode top-1 accuracy on a dataset, computed in chunks of `eval_batch`.
pub fn accuracy(arch: &MlpArchitecture, theta: &ParamVector, data: &Dataset, eval_batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let step = eval_batch.max(1);
    let mut start = 0;
    while start < data.len() {
        let end = (start + step).min(data.len());
        correct += nn::count_correct(arch, &theta.0, &data.batch(start..end))?;
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Test accuracy on every task of the sequence, rounded to 6 decimals.
pub fn evaluate(arch: &MlpArchitecture, theta: &ParamVector, seq: &TaskSequence) -> Result<Vec<f64>> {
    seq.tasks
        .iter()
        .map(|t| accuracy(arch, theta, &t.test(), EVAL_BATCH).map(round6))
        .collect()
}

fn evaluate_valid(arch: &MlpArchitecture, theta: &ParamVector, seq: &TaskSequence) -> Result<Vec<f64>> {
    seq.tasks
        .iter()
        .map(|t| accuracy(arch, theta, &t.valid(), EVAL_BATCH).map(round6))
        .collect()
}

/// `R[i][j]`: accuracy on task `j` after training task `i`. Rows exist for
/// completed tasks only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub tasks: usize,
    pub rows: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let tasks = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != tasks) || rows.len() > tasks {
            return Err(TrainError::Format("R rows must all have T entries and at most T rows".into()));
        }
        Ok(Self { tasks, rows })
    }

    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    /// Mean accuracy over tasks `1..=i` after training task `i`.
    pub fn average_accuracy_curve(&self) -> Vec<f64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| row[..=i].iter().sum::<f64>() / (i + 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// Undefined for fewer than two tasks.
    pub bwt: Option<f64>,
}

/// `ACC = mean_j R[T][j]`, `BWT = mean_{i<T} (R[T][i] - R[i][i])`, over the
/// completed rows.
pub fn metrics(r: &EvalMatrix) -> Metrics {
    let t = r.completed();
    if t == 0 {
        return Metrics { acc: 0.0, bwt: None };
    }
    let last = &r.rows[t - 1];
    let acc = last[..t].iter().sum::<f64>() / t as f64;
    let bwt = (t >= 2).then(|| (0..t - 1).map(|i| last[i] - r.rows[i][i]).sum::<f64>() / (t - 1) as f64);
    Metrics { acc, bwt }
}

/// Writes `R.csv`: header `task_1,...,task_T`, one 6-decimal row per completed task.
pub fn write_r_csv(path: &Path, r: &EvalMatrix) -> Result<()> {
    let mut out = (1..=r.tasks)
        .map(|j| format!("task_{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in &r.rows {
        out.push_str(&row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_r_csv(path: &Path) -> Result<EvalMatrix> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_r_csv(&text).map_err(|e| TrainError::Format(format!("{}: {e}", path.display())))
}

pub fn parse_r_csv(text: &str) -> std::result::Result<EvalMatrix, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty R file")?;
    let tasks = header.split(',').count();
    for (j, h) in header.split(',').enumerate() {
        if h.trim() != format!("task_{}", j + 1) {
            return Err(format!("unexpected header column {h:?}"));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if row.len() != tasks {
            return Err(format!("row {} has {} entries, expected {tasks}", i + 1, row.len()));
        }
        rows.push(row);
    }
    if rows.len() > tasks {
        return Err("more rows than tasks".into());
    }
    Ok(EvalMatrix { tasks, rows })
}

/// Per-task bookkeeping written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub name: String,
    pub train: TrainStats,
    pub train_time_s: f64,
    pub harvest_time_s: f64,
    pub accepted_pairs: usize,
    pub sampling_attempts: usize,
    pub clamped: bool,
    pub memory: MemoryCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub per_task_time_s: Vec<f64>,
    pub memory_vectors: Vec<usize>,
    /// Mean validation accuracy over all tasks after the last completed task.
    pub valid_acc: f64,
    pub valid_final: Vec<f64>,
    pub tasks_completed: usize,
    pub tasks: Vec<TaskRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub r: EvalMatrix,
    pub valid: EvalMatrix,
    pub metrics: Metrics,
    pub report: MetricsReport,
    pub theta: ParamVector,
    pub state: RegularizerState,
}

/// Shared inputs of a run that are not part of its configuration.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub mnist: Option<Arc<MnistData>>,
    pub threads: usize,
}

fn build_report(cfg: &ExperimentConfig, r: &EvalMatrix, valid: &EvalMatrix, records: &[TaskRecord]) -> MetricsReport {
    let m = metrics(r);
    let valid_final = valid.rows.last().cloned().unwrap_or_default();
    let valid_acc = if valid_final.is_empty() {
        0.0
    } else {
        valid_final.iter().sum::<f64>() / valid_final.len() as f64
    };
    MetricsReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        acc: m.acc,
        bwt: m.bwt,
        per_task_time_s: records.iter().map(|t| t.train_time_s + t.harvest_time_s).collect(),
        memory_vectors: records.iter().map(|t| t.memory.total_vectors()).collect(),
        valid_acc,
        valid_final,
        tasks_completed: records.len(),
        tasks: records.to_vec(),
    }
}

fn persist(dir: &Path, r: &EvalMatrix, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_r_csv(&dir.join("R.csv"), r)?;
    let path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

/// Runs the whole task sequence. When `cfg.out` is set, `R.csv` and
/// `metrics.json` are rewritten after every task, so a failed run leaves the
/// completed prefix on disk.
pub fn run_experiment(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentResult> {
    cfg.validate()?;
    let seq = build_sequence(cfg, ctx.mnist.as_ref())?;
    let arch = cfg.architecture(seq.dim, seq.classes)?;
    let mut theta = arch.init_params(mix(cfg.seed, 0, 7));
    let mut state = RegularizerState::new(theta.len(), cfg.method, cfg.strategy, cfg.lambda, cfg.target_cols());
    let t_total = seq.len();
    let mut r = EvalMatrix::new(t_total);
    let mut valid = EvalMatrix::new(t_total);
    let mut records = Vec::with_capacity(t_total);
    let out = cfg.out.as_ref().map(PathBuf::from);
    let threads = ctx.threads.max(1);
    for (i, task) in seq.tasks.iter().enumerate() {
        let t = i + 1;
        let started = Timer::start();
        let train = task.train();
        let step = (|| -> Result<(TrainStats, Posterior, f64, f64)> {
            let stats = train_task(&arch, &mut theta, &state, &train, cfg, t)?;
            let train_time = started.secs();
            let harvest_start = Timer::start();
            let post = harvest_posterior(&arch, &theta, &train, cfg, t, threads)?;
            Ok((stats, post, train_time, harvest_start.secs()))
        })();
        let (stats, post, train_time_s, harvest_time_s) = match step {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = &out {
                    persist(dir, &r, &build_report(cfg, &r, &valid, &records))?;
                }
                return Err(e);
            }
        };
        let clamped = post.factor.as_ref().is_some_and(|f| f.clamped());
        state.finish_task(theta.to_f64(), &post.fisher, post.factor)?;
        r.rows.push(evaluate(&arch, &theta, &seq)?);
        valid.rows.push(evaluate_valid(&arch, &theta, &seq)?);
        records.push(TaskRecord {
            task: t,
            name: task.name.clone(),
            train: stats,
            train_time_s,
            harvest_time_s,
            accepted_pairs: post.accepted_pairs,
            sampling_attempts: post.attempts,
            clamped,
            memory: state.memory_cost(),
        });
        let row_acc = metrics(&r).acc;
        log::info!(
            "{} task {t}/{t_total} ({}) avg acc {:.4} in {:.1}s",
            cfg.method,
            task.name,
            row_acc,
            train_time_s + harvest_time_s
        );
        if let Some(dir) = &out {
            persist(dir, &r, &build_report(cfg, &r, &valid, &records))?;
        }
    }
    let report = build_report(cfg, &r, &valid, &records);
    Ok(ExperimentResult {
        metrics: metrics(&r),
        r,
        valid,
        report,
        theta,
        state,
    })
}

/// Score of each grid point with the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub best: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Highest score wins; ties go to the smaller `lambda`.
pub fn pick_lambda(scores: &[(f64, f64)]) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (l, s) in sorted {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((l, s));
        }
    }
    best.map(|(l, _)| l)
}

/// Runs the sequence once per `lambda` and picks the best mean validation
/// accuracy over all tasks at the end of the sequence.
pub fn validation_select_lambda(cfg: &ExperimentConfig, grid: &[f64], ctx: &RunContext) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty lambda grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let run_cfg = ExperimentConfig {
            lambda,
            out: None,
            ..cfg.clone()
        };
        let res = run_experiment(&run_cfg, ctx)?;
        scores.push((lambda, res.report.valid_acc));
    }
    Ok(LambdaSelection {
        best: pick_lambda(&scores).expect("non-empty grid"),
        scores,
    })
}

/// Loads MNIST for configs that need it.
pub fn load_mnist_for(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Option<Arc<MnistData>>> {
    if !cfg.dataset.needs_mnist() {
        return Ok(None);
    }
    let dir = dir.ok_or_else(|| {
        TrainError::Data(DataError::Missing(PathBuf::from(
            "MNIST directory (pass --data or set CSQN_DATA)",
        )))
    })?;
    Ok(Some(Arc::new(data::load_mnist(dir, 0)?)))
}
