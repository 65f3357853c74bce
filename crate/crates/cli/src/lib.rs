//! Command implementations behind the `csqn` binary: config loading with
//! dotted overrides, single runs, parameter sweeps and multi-run reports.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, SecondsFormat, Utc};
use csqn::data::MnistData;
use csqn::report::{self, GroupSummary};
use csqn::trainer::{self, ErrorCategory, ExperimentConfig, ExperimentResult, RunContext, TrainError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CSQN_GIT_REV"), ")");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("incompatible runs: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Incompatible(_) => 2,
            CliError::Train(e) => match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::DataMissing => 3,
                ErrorCategory::Numerical => 4,
                ErrorCategory::Other => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a JSON object, creating intermediate objects.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?} descends into a non-object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {key:?} descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads a JSON config, applies overrides in order and validates the result.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    // Expand defaults first so overrides can target nested fields the file omits.
    if let Ok(full) = serde_json::from_value::<ExperimentConfig>(value.clone()) {
        value = serde_json::to_value(full).expect("config serializes");
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Options shared by `run` and `sweep`.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub data: Option<PathBuf>,
}

impl RunOptions {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        load_config(&self.config, &overrides)
    }

    fn mnist(&self, cfg: &ExperimentConfig) -> Result<Option<Arc<MnistData>>> {
        Ok(trainer::load_mnist_for(cfg, self.data.as_deref())?)
    }
}

fn default_out(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}-seed{}", cfg.method, &cfg.hash()[..8], cfg.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    pub artifacts: Vec<String>,
    pub version: String,
}

fn now() -> DateTime<Utc> {
    Utc::now()
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, started: DateTime<Utc>, status: &str, artifacts: &[&str]) -> Result<()> {
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        started_at: stamp(started),
        finished_at: stamp(now()),
        status: status.to_string(),
        artifacts: artifacts.iter().map(|a| a.to_string()).collect(),
        version: VERSION.to_string(),
    };
    let path = dir.join("manifest.json");
    write_file(&path, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
}

/// One experiment into `cfg.out`, including manifest and chart.
fn run_one(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentResult> {
    let dir = PathBuf::from(cfg.out.as_ref().expect("output directory set"));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let started = now();
    match trainer::run_experiment(cfg, ctx) {
        Ok(res) => {
            let groups = report::summarize(&[report::RunRecord {
                dir: dir.clone(),
                report: res.report.clone(),
                r: res.r.clone(),
            }]);
            write_file(&dir.join("report.svg"), &report::render_svg(&groups))?;
            write_manifest(
                &dir,
                cfg,
                started,
                "completed",
                &["R.csv", "metrics.json", "report.svg", "manifest.json"],
            )?;
            Ok(res)
        }
        Err(e) => {
            let _ = write_manifest(&dir, cfg, started, &format!("failed: {e}"), &["R.csv", "metrics.json", "manifest.json"]);
            Err(e.into())
        }
    }
}

pub fn cmd_run(opts: &RunOptions) -> Result<PathBuf> {
    let mut cfg = opts.config()?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| default_out(&cfg));
    cfg.out = Some(out.to_string_lossy().into_owned());
    let ctx = RunContext {
        mnist: opts.mnist(&cfg)?,
        threads: opts.threads.max(1),
    };
    let res = run_one(&cfg, &ctx)?;
    println!(
        "{}: ACC {:.2}%  BWT {}  -> {}",
        cfg.method,
        100.0 * res.metrics.acc,
        res.metrics
            .bwt
            .map_or("-".to_string(), |b| format!("{:.2}%", 100.0 * b)),
        out.display()
    );
    Ok(out)
}

/// `KEY=v1,v2,...` with numeric values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub key: String,
    pub values: Vec<f64>,
}

impl std::str::FromStr for Grid {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let (key, list) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("grid {s:?} is not KEY=v1,v2,...")))?;
        let values = list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("grid value {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() || key.trim().is_empty() {
            return Err(CliError::Config(format!("empty grid {s:?}")));
        }
        Ok(Grid {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub dir: String,
    pub valid_acc: f64,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub winner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub key: String,
    pub winner: f64,
    pub points: Vec<SweepPoint>,
}

fn format_value(v: f64) -> String {
    let s = format!("{v}");
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:e}")
    } else {
        s
    }
}

/// One run per grid point, at most `threads` at a time. The winner has the
/// best mean final validation accuracy, ties going to the smaller value.
pub fn cmd_sweep(opts: &RunOptions, grid: &Grid) -> Result<SweepSummary> {
    let base = opts.config()?;
    let out = opts
        .out
        .clone()
        .or_else(|| base.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| default_out(&base).with_extension("sweep"));
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut configs = Vec::with_capacity(grid.values.len());
    for &v in &grid.values {
        let mut overrides = opts.overrides.clone();
        if let Some(seed) = opts.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.push(format!("{}={}", grid.key, serde_json::to_string(&v).expect("number")));
        let dir = out.join(format!("{}={}", grid.key, format_value(v)));
        overrides.push(format!("out={}", serde_json::to_string(&dir.to_string_lossy()).expect("string")));
        configs.push(load_config(&opts.config, &overrides)?);
    }
    let mnist = opts.mnist(&base)?;
    let threads = opts.threads.max(1);
    let workers = threads.min(configs.len());
    let ctx = RunContext {
        mnist,
        threads: (threads / workers).max(1),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ExperimentResult>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = run_one(&configs[i], &ctx);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut done = Vec::with_capacity(results.len());
    for r in results {
        done.push(r.expect("every point ran")?);
    }
    let scores: Vec<(f64, f64)> = grid
        .values
        .iter()
        .zip(&done)
        .map(|(&v, r)| (v, r.report.valid_acc))
        .collect();
    let winner = trainer::pick_lambda(&scores).expect("non-empty grid");
    let points: Vec<SweepPoint> = grid
        .values
        .iter()
        .zip(&configs)
        .zip(&done)
        .map(|((&value, cfg), r)| SweepPoint {
            value,
            dir: cfg.out.clone().unwrap_or_default(),
            valid_acc: r.report.valid_acc,
            acc: r.metrics.acc,
            bwt: r.metrics.bwt,
            winner: value == winner,
        })
        .collect();
    let summary = SweepSummary {
        key: grid.key.clone(),
        winner,
        points,
    };
    write_file(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    let records: Vec<report::RunRecord> = configs
        .iter()
        .zip(&done)
        .map(|(c, r)| report::RunRecord {
            dir: PathBuf::from(c.out.clone().unwrap_or_default()),
            report: r.report.clone(),
            r: r.r.clone(),
        })
        .collect();
    write_file(&out.join("report.svg"), &report::render_svg(&report::summarize(&records)))?;
    println!("{:>12}  valid ACC   test ACC   BWT", grid.key);
    for p in &summary.points {
        println!(
            "{:>12}  {:8.2}%  {:8.2}%  {}{}",
            format_value(p.value),
            100.0 * p.valid_acc,
            100.0 * p.acc,
            p.bwt.map_or("-".to_string(), |b| format!("{:.2}%", 100.0 * b)),
            if p.winner { "  <- best" } else { "" }
        );
    }
    Ok(summary)
}

/// Curves CSV: one row per configuration, mean and std after each task.
pub fn curves_csv(groups: &[GroupSummary]) -> String {
    let tasks = groups.iter().map(|g| g.curve_mean.len()).max().unwrap_or(0);
    let mut s = String::from("label,config_hash,runs");
    for t in 1..=tasks {
        s.push_str(&format!(",task_{t}_mean,task_{t}_std"));
    }
    s.push_str(",acc_mean,acc_std,bwt_mean,bwt_std\n");
    for g in groups {
        s.push_str(&format!("\"{}\",{},{}", g.label.replace('"', "'"), g.config_hash, g.seeds.len()));
        for t in 0..tasks {
            match (g.curve_mean.get(t), g.curve_std.get(t)) {
                (Some(m), Some(sd)) => s.push_str(&format!(",{m:.6},{sd:.6}")),
                _ => s.push_str(",,"),
            }
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        s.push_str(&format!(
            ",{:.6},{:.6},{},{}\n",
            g.acc_mean,
            g.acc_std,
            opt(g.bwt_mean),
            opt(g.bwt_std)
        ));
    }
    s
}

/// Aggregates run directories into `curves.csv`, `report.json` and `report.svg`.
pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<Vec<GroupSummary>> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(report::load_runs(d)?);
    }
    if runs.is_empty() {
        return Err(CliError::Config("no run directories with R.csv and metrics.json found".into()));
    }
    let t = runs[0].r.tasks;
    if let Some(bad) = runs.iter().find(|r| r.r.tasks != t) {
        return Err(CliError::Incompatible(format!(
            "{} has {} tasks, {} has {t}",
            bad.dir.display(),
            bad.r.tasks,
            runs[0].dir.display()
        )));
    }
    let groups = report::summarize(&runs);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dirs[0].clone());
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_file(&out.join("curves.csv"), &curves_csv(&groups))?;
    write_file(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&groups).expect("groups serialize"),
    )?;
    write_file(&out.join("report.svg"), &report::render_svg(&groups))?;
    print!("{}", report::summary_table(&groups));
    Ok(groups)
}
