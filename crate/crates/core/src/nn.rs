//! Feed-forward ReLU network with hand-written backpropagation.
//!
//! Parameters live in one flat vector: for every layer, the `in x out`
//! row-major weight block followed by the `out` biases. The same code runs in
//! 32-bit for training and in 64-bit when the curvature machinery needs
//! gradients at perturbed parameters.

use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Mul, Sub};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input width {got} does not match the network input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, architecture needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("batch has {inputs} input rows but {labels} labels")]
    BatchShape { inputs: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("gradient has length {got}, expected {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Floating-point element type the network can run in.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    /// `C <- alpha * A B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:ident) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every index matrixmultiply touches.
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f32>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

/// One layer's parameters after unflattening.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// `inputs x outputs`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Layer widths `[input, hidden..., classes]`, ReLU on hidden layers, inverted dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub widths: Vec<usize>,
    pub dropout: f32,
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>, dropout: f32) -> Result<Self> {
        if widths.len() < 3 {
            return Err(NnError::Architecture(
                "need an input width, at least one hidden layer and a class count".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(NnError::Architecture("zero layer width".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(NnError::Architecture(format!(
                "dropout {dropout} outside [0, 1)"
            )));
        }
        Ok(Self { widths, dropout })
    }

    /// The 784-256-256-10 MNIST network with 25% dropout.
    pub fn mnist_mlp() -> Self {
        Self::new(vec![784, 256, 256, 10], 0.25).expect("valid")
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (fi, fo) = (w[0], w[1]);
                let entry = (off, off + fi * fo, fi, fo);
                off += fi * fo + fo;
                entry
            })
            .collect()
    }

    /// Uniform `+-1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(self.param_count());
        for (_, _, fi, fo) in self.layout() {
            let bound = 1.0 / (fi as f32).sqrt();
            for _ in 0..fi * fo + fo {
                theta.push(rng.random_range(-bound..bound));
            }
        }
        ParamVector(theta)
    }

    pub fn unflatten<T: Scalar>(&self, theta: &[T]) -> Result<Vec<LayerParams<T>>> {
        self.check_params(theta.len())?;
        Ok(self
            .layout()
            .into_iter()
            .map(|(w, b, fi, fo)| LayerParams {
                weights: theta[w..w + fi * fo].to_vec(),
                bias: theta[b..b + fo].to_vec(),
            })
            .collect())
    }

    pub fn flatten<T: Scalar>(&self, layers: &[LayerParams<T>]) -> Result<Vec<T>> {
        let layout = self.layout();
        if layers.len() != layout.len() {
            return Err(NnError::Architecture(format!(
                "expected {} layers, got {}",
                layout.len(),
                layers.len()
            )));
        }
        let mut out = Vec::with_capacity(self.param_count());
        for (l, (_, _, fi, fo)) in layers.iter().zip(layout) {
            if l.weights.len() != fi * fo || l.bias.len() != fo {
                return Err(NnError::Architecture("layer shape mismatch".into()));
            }
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        Ok(out)
    }

    fn check_params(&self, len: usize) -> Result<()> {
        if len != self.param_count() {
            return Err(NnError::ParamLength {
                expected: self.param_count(),
                got: len,
            });
        }
        Ok(())
    }
}

/// A borrowed minibatch: `len x dim` row-major inputs plus class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T = f32> {
    inputs: &'a [T],
    labels: &'a [u8],
    dim: usize,
}

impl<'a, T: Scalar> Batch<'a, T> {
    pub fn new(inputs: &'a [T], labels: &'a [u8], dim: usize) -> Result<Self> {
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(NnError::BatchShape {
                inputs: if dim == 0 { 0 } else { inputs.len() / dim },
                labels: labels.len(),
            });
        }
        Ok(Self {
            inputs,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &'a [T] {
        self.inputs
    }

    pub fn labels(&self) -> &'a [u8] {
        self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything backprop needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord<T> {
    /// Input to each layer (`layer_inputs[0]` is the batch itself).
    pub layer_inputs: Vec<Vec<T>>,
    /// Per hidden layer, the factor applied after ReLU: 0 where the unit was
    /// inactive or dropped, `1/keep` (or 1 in eval mode) otherwise.
    pub gates: Vec<Vec<T>>,
    /// `batch x classes`.
    pub logits: Vec<T>,
}

fn validate<T: Scalar>(arch: &MlpArchitecture, theta: &[T], batch: &Batch<'_, T>) -> Result<()> {
    arch.check_params(theta.len())?;
    if batch.dim() != arch.input_dim() {
        return Err(NnError::WidthMismatch {
            expected: arch.input_dim(),
            got: batch.dim(),
        });
    }
    let classes = arch.classes();
    if let Some(&bad) = batch.labels().iter().find(|&&l| l as usize >= classes) {
        return Err(NnError::LabelRange {
            label: bad as usize,
            classes,
        });
    }
    Ok(())
}

/// Forward pass. Eval mode draws nothing from `rng`.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    arch: &MlpArchitecture,
    theta: &[T],
    batch: &Batch<'_, T>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardRecord<T>> {
    validate(arch, theta, batch)?;
    let n = batch.len();
    let layout = arch.layout();
    let keep = 1.0 - arch.dropout;
    let drop = mode == Mode::Train && arch.dropout > 0.0;
    let inv_keep = T::from_f64(1.0 / keep as f64);

    let mut layer_inputs: Vec<Vec<T>> = vec![batch.inputs().to_vec()];
    let mut gates = Vec::with_capacity(layout.len() - 1);
    let mut logits = Vec::new();
    for (l, &(w_off, b_off, fi, fo)) in layout.iter().enumerate() {
        let h = layer_inputs.last().expect("non-empty");
        let bias = &theta[b_off..b_off + fo];
        let mut z: Vec<T> = Vec::with_capacity(n * fo);
        for _ in 0..n {
            z.extend_from_slice(bias);
        }
        T::gemm(
            n,
            fi,
            fo,
            T::ONE,
            h,
            fi as isize,
            1,
            &theta[w_off..w_off + fi * fo],
            fo as isize,
            1,
            T::ONE,
            &mut z,
            fo as isize,
            1,
        );
        if l + 1 == layout.len() {
            logits = z;
            break;
        }
        let mut gate = vec![T::ZERO; n * fo];
        for (zi, g) in z.iter_mut().zip(gate.iter_mut()) {
            let active = *zi > T::ZERO;
            let kept = !drop || rng.random::<f32>() < keep;
            if active && kept {
                *g = if drop { inv_keep } else { T::ONE };
                *zi = *zi * *g;
            } else {
                *zi = T::ZERO;
            }
        }
        gates.push(gate);
        layer_inputs.push(z);
    }
    Ok(ForwardRecord {
        layer_inputs,
        gates,
        logits,
    })
}

/// Row-wise softmax in 64-bit, returning probabilities and the summed
/// negative log-likelihood of the labels.
fn softmax_nll<T: Scalar>(logits: &[T], labels: &[u8], classes: usize) -> (Vec<f64>, f64) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut nll = 0.0;
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        nll += sum.ln() - (row[y as usize].to_f64() - max);
        probs.extend(exps.iter().map(|e| e / sum));
    }
    (probs, nll)
}

/// Output-layer error `p - onehot(y)` per sample (no batch averaging).
fn output_delta<T: Scalar>(probs: &[f64], labels: &[u8], classes: usize) -> Vec<T> {
    let mut delta: Vec<T> = probs.iter().map(|&p| T::from_f64(p)).collect();
    for (i, &y) in labels.iter().enumerate() {
        let idx = i * classes + y as usize;
        delta[idx] = T::from_f64(probs[idx] - 1.0);
    }
    delta
}

/// Walks the layers backwards, handing each layer's input and per-sample
/// error to `visit(layer, input, delta, fan_in, fan_out, weight_offset, bias_offset)`.
fn backprop<T: Scalar>(
    arch: &MlpArchitecture,
    theta: &[T],
    record: &ForwardRecord<T>,
    mut delta: Vec<T>,
    n: usize,
    mut visit: impl FnMut(&[T], &[T], usize, usize, usize, usize),
) {
    let layout = arch.layout();
    for l in (0..layout.len()).rev() {
        let (w_off, b_off, fi, fo) = layout[l];
        let h = &record.layer_inputs[l];
        visit(h, &delta, fi, fo, w_off, b_off);
        if l == 0 {
            break;
        }
        // delta_prev = (delta W^T) * gate
        let mut prev = vec![T::ZERO; n * fi];
        T::gemm(
            n,
            fo,
            fi,
            T::ONE,
            &delta,
            fo as isize,
            1,
            &theta[w_off..w_off + fi * fo],
            1,
            fo as isize,
            T::ZERO,
            &mut prev,
            fi as isize,
            1,
        );
        for (p, &g) in prev.iter_mut().zip(&record.gates[l - 1]) {
            *p = *p * g;
        }
        delta = prev;
    }
}

/// Mean cross-entropy over the batch and its gradient with respect to `theta`.
pub fn loss_and_grad<T: Scalar, R: Rng + ?Sized>(
    arch: &MlpArchitecture,
    theta: &[T],
    batch: &Batch<'_, T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, Vec<T>)> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let record = forward(arch, theta, batch, mode, rng)?;
    let n = batch.len();
    let classes = arch.classes();
    let (probs, nll) = softmax_nll(&record.logits, batch.labels(), classes);
    let delta = output_delta::<T>(&probs, batch.labels(), classes);
    let scale = T::from_f64(1.0 / n as f64);
    let mut grad = vec![T::ZERO; theta.len()];
    backprop(arch, theta, &record, delta, n, |h, d, fi, fo, w_off, b_off| {
        // dW = h^T delta / n
        T::gemm(
            fi,
            n,
            fo,
            scale,
            h,
            1,
            fi as isize,
            d,
            fo as isize,
            1,
            T::ZERO,
            &mut grad[w_off..w_off + fi * fo],
            fo as isize,
            1,
        );
        let gb = &mut grad[b_off..b_off + fo];
        for row in d.chunks_exact(fo) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        for g in gb.iter_mut() {
            *g = *g * scale;
        }
    });
    Ok((nll / n as f64, grad))
}

/// Mean gradient of the cross-entropy together with the mean of the
/// elementwise-squared per-sample gradients (the empirical Fisher diagonal),
/// both in eval mode from one forward/backward pass.
pub fn grad_and_sq_grad<T: Scalar>(
    arch: &MlpArchitecture,
    theta: &[T],
    batch: &Batch<'_, T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut no_rng = ChaCha8Rng::seed_from_u64(0);
    let record = forward(arch, theta, batch, Mode::Eval, &mut no_rng)?;
    let n = batch.len();
    let classes = arch.classes();
    let (probs, _) = softmax_nll(&record.logits, batch.labels(), classes);
    let delta = output_delta::<T>(&probs, batch.labels(), classes);
    let scale = T::from_f64(1.0 / n as f64);
    let mut grad = vec![T::ZERO; theta.len()];
    let mut sq = vec![T::ZERO; theta.len()];
    backprop(arch, theta, &record, delta, n, |h, d, fi, fo, w_off, b_off| {
        T::gemm(
            fi,
            n,
            fo,
            scale,
            h,
            1,
            fi as isize,
            d,
            fo as isize,
            1,
            T::ZERO,
            &mut grad[w_off..w_off + fi * fo],
            fo as isize,
            1,
        );
        // A single-sample weight gradient is the outer product h_b d_b^T, so
        // its square is (h_b * h_b)(d_b * d_b)^T.
        let h2: Vec<T> = h.iter().map(|&v| v * v).collect();
        let d2: Vec<T> = d.iter().map(|&v| v * v).collect();
        T::gemm(
            fi,
            n,
            fo,
            scale,
            &h2,
            1,
            fi as isize,
            &d2,
            fo as isize,
            1,
            T::ZERO,
            &mut sq[w_off..w_off + fi * fo],
            fo as isize,
            1,
        );
        for (row, row2) in d.chunks_exact(fo).zip(d2.chunks_exact(fo)) {
            for j in 0..fo {
                grad[b_off + j] += row[j];
                sq[b_off + j] += row2[j];
            }
        }
        for j in 0..fo {
            grad[b_off + j] = grad[b_off + j] * scale;
            sq[b_off + j] = sq[b_off + j] * scale;
        }
    });
    Ok((grad, sq))
}

/// `(1/B) sum_b g_b * g_b` with `g_b` the single-sample log-likelihood gradient, eval mode.
pub fn per_sample_sq_grad<T: Scalar>(
    arch: &MlpArchitecture,
    theta: &[T],
    batch: &Batch<'_, T>,
) -> Result<Vec<T>> {
    grad_and_sq_grad(arch, theta, batch).map(|(_, sq)| sq)
}

/// Eval-mode logits.
pub fn predict_logits<T: Scalar>(
    arch: &MlpArchitecture,
    theta: &[T],
    batch: &Batch<'_, T>,
) -> Result<Vec<T>> {
    let mut no_rng = ChaCha8Rng::seed_from_u64(0);
    forward(arch, theta, batch, Mode::Eval, &mut no_rng).map(|r| r.logits)
}

/// Number of correct top-1 predictions (ties resolve to the lowest class index).
pub fn count_correct<T: Scalar>(
    arch: &MlpArchitecture,
    theta: &[T],
    batch: &Batch<'_, T>,
) -> Result<usize> {
    let logits = predict_logits(arch, theta, batch)?;
    let classes = arch.classes();
    Ok(logits
        .chunks_exact(classes)
        .zip(batch.labels())
        .filter(|(row, &y)| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best == y as usize
        })
        .count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f32,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_adam_eps")]
        eps: f32,
    },
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f32,
    #[serde(flatten)]
    pub kind: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }
}

/// Adam or SGD-with-momentum state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<f32>,
    second: Vec<f32>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n: usize) -> Self {
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; n],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first: vec![0.0; n],
            second,
        }
    }

    /// One update of `theta` along `grad`. A non-finite gradient aborts
    /// without touching `theta` or the state.
    pub fn step(&mut self, theta: &mut [f32], grad: &[f32]) -> Result<()> {
        if grad.len() != theta.len() || grad.len() != self.first.len() {
            return Err(NnError::GradientLength {
                expected: self.first.len(),
                got: grad.len(),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index });
        }
        self.step += 1;
        let lr = self.config.lr;
        match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, &g), buf) in theta.iter_mut().zip(grad).zip(&mut self.first) {
                    *buf = momentum * *buf + g;
                    *p -= lr * *buf;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - (beta1 as f64).powi(t);
                let bc2 = 1.0 - (beta2 as f64).powi(t);
                let bc1 = bc1 as f32;
                let bc2_sqrt = bc2.sqrt() as f32;
                for (((p, &g), m), v) in theta
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat_sqrt = v.sqrt() / bc2_sqrt;
                    *p -= lr * m_hat / (v_hat_sqrt + eps);
                }
            }
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSQN";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `CSQN | version | N | layer-count | widths... | theta` (little-endian).
pub fn write_checkpoint<W: Write>(mut w: W, arch: &MlpArchitecture, theta: &ParamVector) -> Result<()> {
    arch.check_params(theta.len())?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(theta.len() as u64).to_le_bytes())?;
    w.write_all(&(arch.widths.len() as u32).to_le_bytes())?;
    for &width in &arch.widths {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    for v in &theta.0 {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a checkpoint back as `(widths, theta)`.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Vec<usize>, ParamVector)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = read_u64(&mut r)? as usize;
    let layers = read_u32(&mut r)? as usize;
    let widths = (0..layers)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if expected != n {
        return Err(NnError::Checkpoint(format!(
            "widths {widths:?} imply {expected} parameters, header says {n}"
        )));
    }
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let theta = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((widths, ParamVector(theta)))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
