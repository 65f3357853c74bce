//! Task sequences: MNIST IDX ingestion, rotated / permuted pixel tasks and
//! drifting Gaussian-blob tasks for quick runs.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Batch;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;
pub const MNIST_TRAIN_SPLIT: usize = 55_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("MNIST file not found: {0}")]
    Missing(PathBuf),
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file ({got} bytes, need {need})")]
    Truncated {
        path: PathBuf,
        got: usize,
        need: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid task request: {0}")]
    InvalidTask(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labelled examples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f32>,
    pub labels: Vec<u8>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f32>, labels: Vec<u8>, dim: usize, classes: usize) -> Self {
        assert_eq!(inputs.len(), labels.len() * dim, "inputs/labels mismatch");
        Self {
            inputs,
            labels,
            dim,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self, range: std::ops::Range<usize>) -> Batch<'_, f32> {
        Batch::new(
            &self.inputs[range.start * self.dim..range.end * self.dim],
            &self.labels[range],
            self.dim,
        )
        .expect("consistent dataset")
    }

    pub fn full_batch(&self) -> Batch<'_, f32> {
        self.batch(0..self.len())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(inputs, labels, self.dim, self.classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    fn map_rows(&self, f: impl Fn(&[f32]) -> Vec<f32>) -> Self {
        let mut inputs = Vec::with_capacity(self.inputs.len());
        for i in 0..self.len() {
            inputs.extend(f(self.row(i)));
        }
        Self::new(inputs, self.labels.clone(), self.dim, self.classes)
    }
}

/// MNIST with the training file split into train / validation.
#[derive(Debug, Clone)]
pub struct MnistData {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path)
        .map_err(io)?
        .read_to_end(&mut raw)
        .map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn need(path: &Path, bytes: &[u8], n: usize) -> Result<()> {
    if bytes.len() < n {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            need: n,
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    need(path, bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let total = 16 + count * rows * cols;
    need(path, bytes, total)?;
    Ok((count, rows, cols, bytes[16..total].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    need(path, bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let count = be_u32(bytes, 4) as usize;
    need(path, bytes, 8 + count)?;
    Ok(bytes[8..8 + count].to_vec())
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(DataError::Missing(dir.join(stem)))
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let ip = locate(dir, images)?;
    let lp = locate(dir, labels)?;
    let (count, rows, cols, pixels) = parse_idx_images(&ip, &read_maybe_gz(&ip)?)?;
    let labels = parse_idx_labels(&lp, &read_maybe_gz(&lp)?)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::InvalidTask(format!("label {bad} outside 0..9")));
    }
    let inputs = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Dataset::new(inputs, labels, rows * cols, 10))
}

/// Loads the four MNIST IDX files (optionally gzip-compressed) from `dir` and
/// splits the 60k training images into 55k train / 5k validation by a seeded
/// shuffle.
pub fn load_mnist(dir: &Path, split_seed: u64) -> Result<MnistData> {
    let full = load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let mut idx: Vec<usize> = (0..full.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let cut = MNIST_TRAIN_SPLIT.min(full.len());
    let mut train_idx = idx[..cut].to_vec();
    let mut valid_idx = idx[cut..].to_vec();
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    Ok(MnistData {
        train: full.select(&train_idx),
        valid: full.select(&valid_idx),
        test,
    })
}

/// Rotates a square image about its centre by `degrees` (counter-clockwise
/// as displayed), with bilinear interpolation and zero padding.
pub fn rotate_image(img: &[f32], side: usize, degrees: f64) -> Vec<f32> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let c = (side as f64 - 1.0) / 2.0;
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= side as isize || col >= side as isize {
            0.0
        } else {
            img[r as usize * side + col as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let dx = col as f64 - c;
            let dy = r as f64 - c;
            let sx = c + dx * cos - dy * sin;
            let sy = c + dx * sin + dy * cos;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub tasks: usize,
    pub degrees_per_task: f64,
}

impl RotationSpec {
    /// Rotation of task `t` (1-based): `degrees_per_task * (t - 1)`.
    pub fn angle(&self, t: usize) -> f64 {
        self.degrees_per_task * (t as f64 - 1.0)
    }

    fn check(&self, t: usize) -> Result<()> {
        if self.tasks == 0 || t == 0 || t > self.tasks {
            return Err(DataError::InvalidTask(format!(
                "task {t} outside 1..={}",
                self.tasks
            )));
        }
        Ok(())
    }
}

/// Pixel transform applied to every image of a task.
#[derive(Debug, Clone, PartialEq)]
pub enum PixelTransform {
    Identity,
    Rotate { degrees: f64 },
    Permute { perm: Arc<Vec<usize>> },
}

impl PixelTransform {
    pub fn apply(&self, data: &Dataset) -> Dataset {
        match self {
            PixelTransform::Identity => data.clone(),
            PixelTransform::Rotate { degrees } if *degrees == 0.0 => data.clone(),
            PixelTransform::Rotate { degrees } => {
                let side = (data.dim as f64).sqrt() as usize;
                assert_eq!(side * side, data.dim, "rotation needs square images");
                data.map_rows(|row| rotate_image(row, side, *degrees))
            }
            PixelTransform::Permute { perm } => {
                data.map_rows(|row| perm.iter().map(|&p| row[p]).collect())
            }
        }
    }
}

/// Train / validation / test data of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Rotates every split of `raw` by the angle of task `t`. Task 1 is unchanged.
pub fn rotate_task(raw: &MnistData, spec: &RotationSpec, t: usize) -> Result<TaskData> {
    spec.check(t)?;
    let tf = PixelTransform::Rotate {
        degrees: spec.angle(t),
    };
    Ok(TaskData {
        train: tf.apply(&raw.train),
        valid: tf.apply(&raw.valid),
        test: tf.apply(&raw.test),
    })
}

/// Pixel permutation of task `t` (identity for `t = 1`).
pub fn task_permutation(dim: usize, seed: u64, t: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if t > 1 {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, t as u64, 0x9e37)));
    }
    perm
}

pub fn permute_task(raw: &MnistData, seed: u64, t: usize) -> Result<TaskData> {
    if t == 0 {
        return Err(DataError::InvalidTask("tasks are 1-based".into()));
    }
    let tf = PixelTransform::Permute {
        perm: Arc::new(task_permutation(raw.train.dim, seed, t)),
    };
    Ok(TaskData {
        train: tf.apply(&raw.train),
        valid: tf.apply(&raw.valid),
        test: tf.apply(&raw.test),
    })
}

/// Deterministic seed mixing (splitmix64 finaliser over the combined words).
pub fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gaussian blobs whose class means drift by `shift` per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub shift: f64,
    pub seed: u64,
    /// Norm of each class mean.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_train_per_task")]
    pub train_per_task: usize,
    #[serde(default = "default_eval_per_task")]
    pub valid_per_task: usize,
    #[serde(default = "default_eval_per_task")]
    pub test_per_task: usize,
}

fn default_separation() -> f64 {
    4.0
}
fn default_train_per_task() -> usize {
    1000
}
fn default_eval_per_task() -> usize {
    300
}

impl SyntheticSpec {
    pub fn new(tasks: usize, dim: usize, classes: usize, shift: f64, seed: u64) -> Self {
        Self {
            tasks,
            dim,
            classes,
            shift,
            seed,
            separation: default_separation(),
            train_per_task: default_train_per_task(),
            valid_per_task: default_eval_per_task(),
            test_per_task: default_eval_per_task(),
        }
    }

    /// Class means of task `t` (1-based), `classes x dim` row-major.
    pub fn means(&self, t: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0, 0x5eed));
        let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        };
        let mut base: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        if self.classes == 2 {
            let u = unit(&mut rng);
            base.push(u.iter().map(|x| x * self.separation).collect());
            base.push(u.iter().map(|x| -x * self.separation).collect());
        } else {
            for _ in 0..self.classes {
                base.push(unit(&mut rng).iter().map(|x| x * self.separation).collect());
            }
        }
        let drift: Vec<Vec<f64>> = (0..self.classes).map(|_| unit(&mut rng)).collect();
        let step = self.shift * (t as f64 - 1.0);
        base.iter()
            .zip(&drift)
            .flat_map(|(m, d)| m.iter().zip(d).map(move |(a, b)| a + step * b))
            .collect()
    }

    fn sample(&self, t: usize, split: u64, n: usize) -> Dataset {
        let means = self.means(t);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, t as u64, split));
        let mut inputs = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.random_range(0..self.classes);
            let mean = &means[k * self.dim..(k + 1) * self.dim];
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push((m + z) as f32);
            }
            labels.push(k as u8);
        }
        Dataset::new(inputs, labels, self.dim, self.classes)
    }
}

/// How a task's data is obtained.
#[derive(Debug, Clone)]
enum TaskSource {
    Materialized(Arc<TaskData>),
    Transformed {
        base: Arc<MnistData>,
        transform: PixelTransform,
        train_idx: Option<Arc<Vec<usize>>>,
        valid_idx: Option<Arc<Vec<usize>>>,
        test_idx: Option<Arc<Vec<usize>>>,
    },
}

/// One task of a sequence. Transformed tasks build their splits on demand.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    source: TaskSource,
}

impl Task {
    fn transformed(&self, base: &Dataset, transform: &PixelTransform, idx: &Option<Arc<Vec<usize>>>) -> Dataset {
        match idx {
            Some(idx) => transform.apply(&base.select(idx)),
            None => transform.apply(base),
        }
    }

    pub fn train(&self) -> Dataset {
        match &self.source {
            TaskSource::Materialized(d) => d.train.clone(),
            TaskSource::Transformed {
                base,
                transform,
                train_idx,
                ..
            } => self.transformed(&base.train, transform, train_idx),
        }
    }

    pub fn valid(&self) -> Dataset {
        match &self.source {
            TaskSource::Materialized(d) => d.valid.clone(),
            TaskSource::Transformed {
                base,
                transform,
                valid_idx,
                ..
            } => self.transformed(&base.valid, transform, valid_idx),
        }
    }

    pub fn test(&self) -> Dataset {
        match &self.source {
            TaskSource::Materialized(d) => d.test.clone(),
            TaskSource::Transformed {
                base,
                transform,
                test_idx,
                ..
            } => self.transformed(&base.test, transform, test_idx),
        }
    }
}

/// Generator description, echoed into experiment outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceDescriptor {
    RotatedMnist {
        tasks: usize,
        degrees_per_task: f64,
    },
    PermutedMnist {
        tasks: usize,
        seed: u64,
    },
    Synthetic(SyntheticSpec),
}

/// Ordered tasks sharing input dimension and class count.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub descriptor: SequenceDescriptor,
    pub dim: usize,
    pub classes: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Reorders tasks by a seeded shuffle.
    pub fn shuffled(mut self, seed: u64) -> Self {
        self.tasks
            .shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x04d3, 1)));
        self
    }
}

/// Per-task subsampling caps (`None` keeps the full split).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCaps {
    pub train: Option<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
}

fn cap_indices(len: usize, cap: Option<usize>, seed: u64, t: usize, split: u64) -> Option<Arc<Vec<usize>>> {
    match cap {
        Some(c) if c < len => {
            let mut idx: Vec<usize> = (0..len).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, t as u64, split)));
            idx.truncate(c);
            idx.sort_unstable();
            Some(Arc::new(idx))
        }
        _ => None,
    }
}

fn transformed_sequence(
    raw: Arc<MnistData>,
    transforms: Vec<(String, PixelTransform)>,
    caps: SplitCaps,
    seed: u64,
    descriptor: SequenceDescriptor,
) -> TaskSequence {
    let dim = raw.train.dim;
    let classes = raw.train.classes;
    let tasks = transforms
        .into_iter()
        .enumerate()
        .map(|(i, (name, transform))| {
            let t = i + 1;
            Task {
                name,
                source: TaskSource::Transformed {
                    train_idx: cap_indices(raw.train.len(), caps.train, seed, t, 1),
                    valid_idx: cap_indices(raw.valid.len(), caps.valid, seed, t, 2),
                    test_idx: cap_indices(raw.test.len(), caps.test, seed, t, 3),
                    base: raw.clone(),
                    transform,
                },
            }
        })
        .collect();
    TaskSequence {
        tasks,
        descriptor,
        dim,
        classes,
    }
}

/// Rotated MNIST: task `t` rotated by `degrees_per_task * (t - 1)`.
pub fn rotated_mnist(raw: Arc<MnistData>, spec: RotationSpec, caps: SplitCaps, seed: u64) -> Result<TaskSequence> {
    spec.check(1)?;
    let transforms = (1..=spec.tasks)
        .map(|t| {
            let degrees = spec.angle(t);
            (format!("rot{degrees}"), PixelTransform::Rotate { degrees })
        })
        .collect();
    Ok(transformed_sequence(
        raw,
        transforms,
        caps,
        seed,
        SequenceDescriptor::RotatedMnist {
            tasks: spec.tasks,
            degrees_per_task: spec.degrees_per_task,
        },
    ))
}

/// Permuted MNIST: a fixed seeded pixel permutation per task, identity first.
pub fn permuted_mnist(raw: Arc<MnistData>, tasks: usize, caps: SplitCaps, seed: u64) -> Result<TaskSequence> {
    if tasks == 0 {
        return Err(DataError::InvalidTask("need at least one task".into()));
    }
    let dim = raw.train.dim;
    let transforms = (1..=tasks)
        .map(|t| {
            (
                format!("perm{t}"),
                PixelTransform::Permute {
                    perm: Arc::new(task_permutation(dim, seed, t)),
                },
            )
        })
        .collect();
    Ok(transformed_sequence(
        raw,
        transforms,
        caps,
        seed,
        SequenceDescriptor::PermutedMnist { tasks, seed },
    ))
}

/// Drifting Gaussian-blob tasks.
pub fn synthetic_sequence(spec: &SyntheticSpec) -> Result<TaskSequence> {
    if spec.dim < 2 || spec.classes < 2 || spec.tasks == 0 {
        return Err(DataError::InvalidTask(format!(
            "synthetic tasks need dim >= 2, classes >= 2, tasks >= 1 (got {}, {}, {})",
            spec.dim, spec.classes, spec.tasks
        )));
    }
    if spec.classes > u8::MAX as usize + 1 {
        return Err(DataError::InvalidTask("too many classes".into()));
    }
    let tasks = (1..=spec.tasks)
        .map(|t| Task {
            name: format!("blobs{t}"),
            source: TaskSource::Materialized(Arc::new(TaskData {
                train: spec.sample(t, 1, spec.train_per_task),
                valid: spec.sample(t, 2, spec.valid_per_task),
                test: spec.sample(t, 3, spec.test_per_task),
            })),
        })
        .collect();
    Ok(TaskSequence {
        tasks,
        descriptor: SequenceDescriptor::Synthetic(spec.clone()),
        dim: spec.dim,
        classes: spec.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fake_mnist(n_train: usize, n_test: usize) -> MnistData {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut make = |n: usize| {
            let inputs = (0..n * MNIST_PIXELS)
                .map(|_| if rng.random_bool(0.2) { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect();
            let labels = (0..n).map(|i| (i % 10) as u8).collect();
            Dataset::new(inputs, labels, MNIST_PIXELS, 10)
        };
        MnistData {
            train: make(n_train),
            valid: make(n_train / 5),
            test: make(n_test),
        }
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_constants() {
        assert_eq!(IMAGE_MAGIC, 2051);
        assert_eq!(LABEL_MAGIC, 2049);
    }

    #[test]
    fn idx_parsing_and_errors() {
        let p = Path::new("x");
        let bytes = idx_images(2, 2, 2, &[0, 255, 1, 2, 3, 4, 5, 6]);
        let (n, r, c, px) = parse_idx_images(p, &bytes).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px.len(), 8);
        assert!(matches!(
            parse_idx_images(p, &bytes[..20]),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_images(p, &idx_labels(&[1; 12])),
            Err(DataError::BadMagic { found: 2049, .. })
        ));
        assert_eq!(parse_idx_labels(p, &idx_labels(&[3, 4])).unwrap(), vec![3, 4]);
    }

    #[test]
    fn load_mnist_from_small_files_with_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let n = 60usize;
        let pixels: Vec<u8> = (0..n * 4).map(|i| (i % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), idx_images(n as u32, 2, 2, &pixels)).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_labels(&labels)).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte.gz"), gz.finish().unwrap()).unwrap();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(10, 2, 2, &pixels[..40])).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&labels[..10])).unwrap();

        let data = load_mnist(dir.path(), 7).unwrap();
        assert_eq!(data.train.len() + data.valid.len(), n);
        assert_eq!(data.test.len(), 10);
        assert!(data.train.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = load_mnist(dir.path(), 7).unwrap();
        assert_eq!(again.train, data.train);

        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&labels[..9])).unwrap();
        assert!(matches!(
            load_mnist(dir.path(), 7),
            Err(DataError::CountMismatch { images: 10, labels: 9 })
        ));
        assert!(matches!(
            load_mnist(&dir.path().join("nope"), 7),
            Err(DataError::Missing(_))
        ));
    }

    #[test]
    fn first_task_is_unrotated() {
        let raw = fake_mnist(5, 3);
        let spec = RotationSpec {
            tasks: 3,
            degrees_per_task: 15.0,
        };
        let t1 = rotate_task(&raw, &spec, 1).unwrap();
        assert_eq!(t1.train, raw.train);
        assert!(rotate_task(&raw, &spec, 4).is_err());
        assert!(rotate_task(&raw, &spec, 0).is_err());
    }

    #[test]
    fn quarter_turn_moves_single_pixel() {
        for &(r, c) in &[(3usize, 20usize), (0, 0), (14, 5)] {
            let mut img = vec![0.0f32; MNIST_PIXELS];
            img[r * 28 + c] = 1.0;
            let out = rotate_image(&img, 28, 90.0);
            let target = (27 - c) * 28 + r;
            assert!((out[target] - 1.0).abs() < 1e-6, "pixel ({r},{c})");
            let rest: f32 = out.iter().enumerate().filter(|(i, _)| *i != target).map(|(_, v)| v).sum();
            assert!(rest < 1e-6);
        }
    }

    /// Independent rasteriser: polar coordinates about the centre, bilinear
    /// weights from the distances to the four surrounding pixel centres.
    fn polar_rotate(img: &[f32], degrees: f64) -> Vec<f32> {
        let c = 13.5;
        let mut out = vec![0.0f32; MNIST_PIXELS];
        for r in 0..28 {
            for col in 0..28 {
                let (x, y) = (col as f64 - c, r as f64 - c);
                let radius = (x * x + y * y).sqrt();
                let phi = y.atan2(x) + degrees.to_radians();
                let (sx, sy) = (c + radius * phi.cos(), c + radius * phi.sin());
                let mut acc = 0.0;
                for yy in (sy.floor() as isize)..=(sy.floor() as isize + 1) {
                    for xx in (sx.floor() as isize)..=(sx.floor() as isize + 1) {
                        let wx = 1.0 - (sx - xx as f64).abs();
                        let wy = 1.0 - (sy - yy as f64).abs();
                        if (0..28).contains(&yy) && (0..28).contains(&xx) && wx > 0.0 && wy > 0.0 {
                            acc += wx * wy * img[yy as usize * 28 + xx as usize] as f64;
                        }
                    }
                }
                out[r * 28 + col] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn rotation_matches_polar_oracle_and_round_trips() {
        let raw = fake_mnist(5, 1);
        for i in 0..5 {
            let img = raw.train.row(i);
            for deg in [10.0, -25.0, 37.5] {
                let a = rotate_image(img, 28, deg);
                let b = polar_rotate(img, deg);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-5, "deg {deg}: {x} vs {y}");
                }
            }
            // A smooth blob survives +g/-g with small loss.
            let blob: Vec<f32> = (0..MNIST_PIXELS)
                .map(|p| {
                    let (r, c) = ((p / 28) as f32 - 13.5, (p % 28) as f32 - 10.0);
                    (-(r * r + c * c) / 18.0).exp()
                })
                .collect();
            let back = rotate_image(&rotate_image(&blob, 28, 10.0), 28, -10.0);
            let err: f32 = back.iter().zip(&blob).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
            let norm: f32 = blob.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(err < 0.05 * norm);
        }
    }

    #[test]
    fn rotation_keeps_unit_range() {
        let raw = fake_mnist(3, 1);
        for i in 0..3 {
            let out = rotate_image(raw.train.row(i), 28, 33.0);
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn permutations() {
        assert_eq!(task_permutation(784, 3, 1), (0..784).collect::<Vec<_>>());
        let p = task_permutation(784, 3, 2);
        assert_eq!(p, task_permutation(784, 3, 2));
        assert_ne!(p, task_permutation(784, 3, 3));
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..784).collect::<Vec<_>>());
        let raw = fake_mnist(4, 2);
        assert_eq!(permute_task(&raw, 3, 1).unwrap().test, raw.test);
    }

    #[test]
    fn synthetic_properties() {
        let spec = SyntheticSpec::new(3, 5, 3, 0.0, 4);
        let seq = synthetic_sequence(&spec).unwrap();
        assert_eq!(spec.means(1), spec.means(3));
        assert_eq!(seq.len(), 3);
        let other = synthetic_sequence(&SyntheticSpec::new(3, 5, 3, 0.0, 5)).unwrap();
        assert_ne!(seq.tasks[0].train(), other.tasks[0].train());
        let again = synthetic_sequence(&spec).unwrap();
        assert_eq!(seq.tasks[2].test(), again.tasks[2].test());
        let drifting = SyntheticSpec::new(3, 5, 3, 1.5, 4);
        assert_ne!(drifting.means(1), drifting.means(2));
        assert!(synthetic_sequence(&SyntheticSpec::new(3, 1, 3, 0.0, 4)).is_err());
        assert!(synthetic_sequence(&SyntheticSpec::new(3, 4, 1, 0.0, 4)).is_err());
    }

    #[test]
    fn rotated_sequence_caps_and_determinism() {
        let raw = Arc::new(fake_mnist(50, 20));
        let caps = SplitCaps {
            train: Some(12),
            valid: None,
            test: Some(7),
        };
        let spec = RotationSpec {
            tasks: 3,
            degrees_per_task: 10.0,
        };
        let seq = rotated_mnist(raw.clone(), spec, caps, 1).unwrap();
        assert_eq!(seq.tasks[1].train().len(), 12);
        assert_eq!(seq.tasks[1].test().len(), 7);
        assert_eq!(seq.tasks[1].valid().len(), raw.valid.len());
        assert_eq!(seq.tasks[2].train(), seq.tasks[2].train());
        let again = rotated_mnist(raw, spec, caps, 1).unwrap();
        assert_eq!(seq.tasks[2].test(), again.tasks[2].test());
    }
}
