//! Sampled quasi-Newton curvature: pair sampling around a trained solution,
//! compact BFGS and SR1 representations, the low-rank `Z` factorization and
//! products against the implied Hessian estimates.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, cholesky, dot, matmul, qr, sym_eig, DenseMatrix, LinalgError};
use crate::nn::{self, Batch, MlpArchitecture, Mode, NnError};

/// Largest tolerated condition number of a middle matrix.
pub const MAX_CONDITION: f64 = 1e12;
const FACTOR_MAGIC: &[u8; 4] = b"CSQF";
const FACTOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CurvatureError {
    #[error("Fisher diagonal is identically zero; sampling covariance undefined")]
    ZeroFisher,
    #[error("Fisher diagonal entry {index} is negative or non-finite ({value})")]
    InvalidFisher { index: usize, value: f64 },
    #[error("invalid sampling configuration: {0}")]
    InvalidConfig(String),
    #[error("no curvature pair accepted after {attempts} attempts (kappa = {kappa:e})")]
    NoAcceptedPairs { attempts: usize, kappa: f64 },
    #[error("{what} with {pairs} pairs is singular (condition number {condition:e})")]
    IllConditioned {
        what: &'static str,
        pairs: usize,
        condition: f64,
    },
    #[error("vector length {got} does not match dimension {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("factor blob: {0}")]
    Format(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CurvatureError>;

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(CurvatureError::LengthMismatch { expected, got });
    }
    Ok(())
}

/// Diagonal of the empirical Fisher information.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag(Vec<f64>);

impl FisherDiag {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(CurvatureError::InvalidFisher { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Elementwise accumulation.
    pub fn add_assign(&mut self, other: &FisherDiag) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }
}

/// How `y` is formed from a sampled step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum YMode {
    /// Directional finite difference of gradients along `s`.
    #[default]
    FdHvp,
    /// `grad f(theta*) - grad f(x)` at the sampled point.
    GradDiff,
}

/// Which acceptance test sampled pairs must pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Bfgs,
    Sr1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Requested pair count `M`.
    pub pairs: usize,
    pub eps: f64,
    pub kappa: f64,
    pub fd_step: f64,
    pub y_mode: YMode,
    pub curvature_batch: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            pairs: 10,
            eps: 1e-4,
            kappa: 1e-12,
            fd_step: 1e-3,
            y_mode: YMode::FdHvp,
            curvature_batch: 2048,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CurvatureError::InvalidConfig(m.to_string()));
        if self.pairs == 0 {
            return bad("M must be at least 1");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be positive");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be positive");
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return bad("fd_step must be positive");
        }
        if self.curvature_batch == 0 {
            return bad("curvature batch must be non-empty");
        }
        Ok(())
    }
}

/// Gradient of a loss at arbitrary parameters, evaluated deterministically.
pub trait GradientOracle: Sync {
    fn dim(&self) -> usize;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `f(x) = 1/2 x^T H x + b^T x`.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    pub h: DenseMatrix,
    pub b: Vec<f64>,
}

impl QuadraticOracle {
    pub fn new(h: DenseMatrix) -> Self {
        let n = h.rows();
        Self { h, b: vec![0.0; n] }
    }
}

impl GradientOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.h.rows()
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.h.matvec(theta)?;
        for (gi, bi) in g.iter_mut().zip(&self.b) {
            *gi += bi;
        }
        Ok(g)
    }
}

/// Mean cross-entropy gradient of a network on a fixed batch, eval mode, 64-bit.
pub struct NetworkOracle<'a> {
    pub arch: &'a MlpArchitecture,
    pub batch: Batch<'a, f64>,
}

impl NetworkOracle<'_> {
    /// Gradient and empirical Fisher diagonal at `theta` from one pass.
    pub fn gradient_and_fisher(&self, theta: &[f64]) -> Result<(Vec<f64>, FisherDiag)> {
        let (g, sq) = nn::grad_and_sq_grad(self.arch, theta, &self.batch)?;
        Ok((g, FisherDiag::new(sq)?))
    }
}

impl GradientOracle for NetworkOracle<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (_, g) = nn::loss_and_grad(self.arch, theta, &self.batch, Mode::Eval, &mut unused)?;
        Ok(g)
    }
}

/// `Sigma_i = 1 / (Omega_i + eps * max(Omega))`.
pub fn sampling_covariance(omega: &FisherDiag, eps: f64) -> Result<Vec<f64>> {
    let max = omega.max();
    if max <= 0.0 {
        return Err(CurvatureError::ZeroFisher);
    }
    let damping = eps * max;
    Ok(omega.as_slice().iter().map(|&o| 1.0 / (o + damping)).collect())
}

/// Accepted curvature pairs as columns of `S` and `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePairs {
    pub s: DenseMatrix,
    pub y: DenseMatrix,
    /// Sampling attempts consumed.
    pub attempts: usize,
}

impl CurvaturePairs {
    pub fn from_columns(n: usize, s: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Self> {
        if s.len() != y.len() {
            return Err(CurvatureError::LengthMismatch {
                expected: s.len(),
                got: y.len(),
            });
        }
        Ok(Self {
            s: DenseMatrix::from_columns(n, s)?,
            y: DenseMatrix::from_columns(n, y)?,
            attempts: s.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.s.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.s.cols() == 0
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }
}

/// Acceptance test for one pair. `b0` is the initial Hessian estimate.
pub fn pair_accepted(kind: PairKind, s: &[f64], y: &[f64], b0: &[f64], kappa: f64) -> bool {
    let ss = dot(s, s);
    if !(ss > 0.0) || y.iter().any(|v| !v.is_finite()) {
        return false;
    }
    match kind {
        PairKind::Bfgs => dot(s, y) > kappa * ss,
        PairKind::Sr1 => {
            let r: f64 = s
                .iter()
                .zip(y)
                .zip(b0)
                .map(|((&si, &yi), &bi)| si * (yi - bi * si))
                .sum();
            r.abs() >= kappa * ss
        }
    }
}

fn attempt_rng(seed: u64, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt as u64);
    rng
}

fn draw_pair(
    theta: &[f64],
    grad_star: &[f64],
    cfg: &SamplingConfig,
    sqrt_sigma: &[f64],
    oracle: &dyn GradientOracle,
    seed: u64,
    attempt: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = attempt_rng(seed, attempt);
    // s = theta* - x with x ~ N(theta*, Sigma).
    let s: Vec<f64> = sqrt_sigma
        .iter()
        .map(|&r| {
            let z: f64 = StandardNormal.sample(&mut rng);
            -(r * z)
        })
        .collect();
    let y = match cfg.y_mode {
        YMode::FdHvp => {
            let norm = linalg::norm2(&s);
            if norm == 0.0 {
                return Ok((s, vec![0.0; theta.len()]));
            }
            let probe: Vec<f64> = theta
                .iter()
                .zip(&s)
                .map(|(&t, &si)| t + cfg.fd_step * (si / norm))
                .collect();
            let g = oracle.gradient(&probe)?;
            let scale = norm / cfg.fd_step;
            g.iter()
                .zip(grad_star)
                .map(|(&a, &b)| (a - b) * scale)
                .collect()
        }
        YMode::GradDiff => {
            let x: Vec<f64> = theta.iter().zip(&s).map(|(&t, &si)| t - si).collect();
            let g = oracle.gradient(&x)?;
            grad_star.iter().zip(&g).map(|(&a, &b)| a - b).collect()
        }
    };
    Ok((s, y))
}

/// Samples up to `M` curvature pairs around `theta` (the trained solution).
///
/// `grad_star` is the gradient at `theta`, shared with the Fisher pass.
/// Attempt `k` draws from its own RNG stream of `seed`, so results do not
/// depend on `threads`.
#[allow(clippy::too_many_arguments)]
pub fn sample_sy(
    theta: &[f64],
    grad_star: &[f64],
    cfg: &SamplingConfig,
    kind: PairKind,
    omega: &FisherDiag,
    oracle: &dyn GradientOracle,
    seed: u64,
    threads: usize,
) -> Result<CurvaturePairs> {
    cfg.validate()?;
    let sigma = sampling_covariance(omega, cfg.eps)?;
    sample_sy_with_covariance(theta, grad_star, cfg, kind, omega, &sigma, oracle, seed, threads)
}

/// [`sample_sy`] with an explicit diagonal sampling covariance.
#[allow(clippy::too_many_arguments)]
pub fn sample_sy_with_covariance(
    theta: &[f64],
    grad_star: &[f64],
    cfg: &SamplingConfig,
    kind: PairKind,
    b0: &FisherDiag,
    sigma: &[f64],
    oracle: &dyn GradientOracle,
    seed: u64,
    threads: usize,
) -> Result<CurvaturePairs> {
    cfg.validate()?;
    let n = theta.len();
    check_len(n, oracle.dim())?;
    check_len(n, grad_star.len())?;
    check_len(n, b0.len())?;
    check_len(n, sigma.len())?;
    let sqrt_sigma: Vec<f64> = sigma.iter().map(|v| v.sqrt()).collect();
    let budget = 3 * cfg.pairs;
    let threads = threads.max(1);
    let mut s_cols = Vec::with_capacity(cfg.pairs);
    let mut y_cols = Vec::with_capacity(cfg.pairs);
    let mut next = 0;
    while s_cols.len() < cfg.pairs && next < budget {
        // The round size depends only on how many pairs are still missing,
        // which keeps the accepted set independent of the thread count.
        let round = (cfg.pairs - s_cols.len()).min(budget - next);
        let attempts: Vec<usize> = (next..next + round).collect();
        next += round;
        let draw = |k: usize| draw_pair(theta, grad_star, cfg, &sqrt_sigma, oracle, seed, k);
        let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = if threads == 1 || round == 1 {
            attempts.iter().map(|&k| draw(k)).collect()
        } else {
            let per = round.div_ceil(threads.min(round));
            std::thread::scope(|scope| {
                let handles: Vec<_> = attempts
                    .chunks(per)
                    .map(|chunk| scope.spawn(move || chunk.iter().map(|&k| draw(k)).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("sampling thread panicked"))
                    .collect()
            })
        };
        for r in results {
            let (s, y) = r?;
            if s_cols.len() < cfg.pairs && pair_accepted(kind, &s, &y, b0.as_slice(), cfg.kappa) {
                s_cols.push(s);
                y_cols.push(y);
            }
        }
    }
    if s_cols.is_empty() {
        return Err(CurvatureError::NoAcceptedPairs {
            attempts: next,
            kappa: cfg.kappa,
        });
    }
    log::debug!("accepted {} of {} curvature samples", s_cols.len(), next);
    let mut pairs = CurvaturePairs::from_columns(n, &s_cols, &y_cols)?;
    pairs.attempts = next;
    Ok(pairs)
}

/// Inverse of a symmetric matrix through its eigen-decomposition, guarded by
/// [`MAX_CONDITION`].
fn guarded_inverse(a: &DenseMatrix, what: &'static str, pairs: usize) -> Result<(DenseMatrix, linalg::SymEig)> {
    let eig = sym_eig(a)?;
    let condition = eig.condition_number();
    if !(condition <= MAX_CONDITION) {
        return Err(CurvatureError::IllConditioned {
            what,
            pairs,
            condition,
        });
    }
    Ok((eig.reconstruct_with(|l| 1.0 / l).symmetrized(), eig))
}

/// `S^T Y` split into its diagonal and strictly lower triangle.
fn sy_blocks(pairs: &CurvaturePairs) -> Result<(Vec<f64>, DenseMatrix)> {
    let sty = pairs.s.tr_matmul(&pairs.y)?;
    let m = pairs.len();
    let d = (0..m).map(|i| sty.get(i, i)).collect();
    let l = DenseMatrix::from_fn(m, m, |i, j| if i > j { sty.get(i, j) } else { 0.0 });
    Ok((d, l))
}

/// `B = B0 - U mid^{-1} U^T` with `U = [B0 S | Y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactBfgsFactor {
    pub u: DenseMatrix,
    /// `[[S^T B0 S, L], [L^T, -D]]`.
    pub mid: DenseMatrix,
    pub mid_inv: DenseMatrix,
    pub provenance: Vec<usize>,
}

impl CompactBfgsFactor {
    pub fn from_parts(u: DenseMatrix, mid: DenseMatrix, provenance: Vec<usize>) -> Result<Self> {
        let pairs = mid.rows() / 2;
        let (mid_inv, _) = guarded_inverse(&mid, "BFGS middle matrix", pairs)?;
        Ok(Self {
            u,
            mid,
            mid_inv,
            provenance,
        })
    }

    pub fn pairs(&self) -> usize {
        self.mid.rows() / 2
    }
}

/// Compact BFGS representation of the pairs with initial estimate `b0`.
pub fn build_bfgs(b0: &FisherDiag, pairs: &CurvaturePairs, provenance: Vec<usize>) -> Result<CompactBfgsFactor> {
    check_len(b0.len(), pairs.dim())?;
    let m = pairs.len();
    let b0s = pairs.s.scale_rows(b0.as_slice())?;
    let stb0s = pairs.s.tr_matmul(&b0s)?.symmetrized();
    let (d, l) = sy_blocks(pairs)?;
    let mid = DenseMatrix::from_fn(2 * m, 2 * m, |i, j| match (i < m, j < m) {
        (true, true) => stb0s.get(i, j),
        (true, false) => l.get(i, j - m),
        (false, true) => l.get(j, i - m),
        (false, false) => {
            if i == j {
                -d[i - m]
            } else {
                0.0
            }
        }
    });
    let u = b0s.hcat(&pairs.y)?;
    CompactBfgsFactor::from_parts(u, mid, provenance)
}

/// `X = Y - B0 S` and `A = D + L + L^T - S^T B0 S`, so `B = B0 + X A^{-1} X^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sr1Parts {
    pub x: DenseMatrix,
    pub a: DenseMatrix,
}

pub fn build_sr1(b0: &FisherDiag, pairs: &CurvaturePairs) -> Result<Sr1Parts> {
    check_len(b0.len(), pairs.dim())?;
    let m = pairs.len();
    let b0s = pairs.s.scale_rows(b0.as_slice())?;
    let x = pairs.y.sub(&b0s)?;
    let stb0s = pairs.s.tr_matmul(&b0s)?;
    let (d, l) = sy_blocks(pairs)?;
    let a = DenseMatrix::from_fn(m, m, |i, j| {
        let dl = if i == j {
            d[i]
        } else if i > j {
            l.get(i, j)
        } else {
            l.get(j, i)
        };
        dl - stb0s.get(i, j)
    })
    .symmetrized();
    let eig = sym_eig(&a)?;
    let condition = eig.condition_number();
    if !(condition <= MAX_CONDITION) {
        return Err(CurvatureError::IllConditioned {
            what: "SR1 middle matrix",
            pairs: m,
            condition,
        });
    }
    Ok(Sr1Parts { x, a })
}

/// `Z` with `Z Z^T` a positive semidefinite curvature correction.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub z: DenseMatrix,
    /// Tasks (1-based) whose curvature this factor carries.
    pub provenance: Vec<usize>,
    /// Set when negative eigenvalues were dropped while forming `Z`.
    pub clamped: bool,
}

impl LowRankFactor {
    pub fn empty(n: usize) -> Self {
        Self {
            z: DenseMatrix::zeros(n, 0),
            provenance: Vec::new(),
            clamped: false,
        }
    }

    pub fn cols(&self) -> usize {
        self.z.cols()
    }
}

/// `Z` with `Z Z^T = X A^{-1} X^T` when `A^{-1}` is positive definite
/// (Cholesky route), otherwise the projection onto its nonnegative
/// eigenvalues (eigen + QR route, `clamped` set).
pub fn z_from_sr1(parts: &Sr1Parts, provenance: Vec<usize>) -> Result<LowRankFactor> {
    let m = parts.a.rows();
    let (a_inv, eig) = guarded_inverse(&parts.a, "SR1 middle matrix", m)?;
    if eig.eigenvalues.iter().all(|&l| l > 0.0) {
        if let Some(l) = cholesky(&a_inv)?.factor() {
            return Ok(LowRankFactor {
                z: matmul(&parts.x, &l)?,
                provenance,
                clamped: false,
            });
        }
    }
    // A^{-1} = V Gamma V^T with Gamma = 1 / eigenvalues of A.
    let gamma: Vec<f64> = eig.eigenvalues.iter().map(|&l| 1.0 / l).collect();
    let clamped = gamma.iter().any(|&g| g < 0.0);
    let root: Vec<f64> = gamma.iter().map(|&g| g.max(0.0).sqrt()).collect();
    let w = eig.eigenvectors.scale_columns(&root)?;
    let r = qr(&w.transpose())?.r;
    Ok(LowRankFactor {
        z: matmul(&parts.x, &r.transpose())?,
        provenance,
        clamped,
    })
}

/// Positive semidefinite part of the BFGS correction `-U mid^{-1} U^T` as a
/// `Z` factor, via a thin QR of `U` and the eigen-decomposition of the small
/// core `-R mid^{-1} R^T`.
pub fn bfgs_to_low_rank(f: &CompactBfgsFactor) -> Result<LowRankFactor> {
    let n = f.u.rows();
    if f.u.cols() == 0 {
        return Ok(LowRankFactor {
            provenance: f.provenance.clone(),
            ..LowRankFactor::empty(n)
        });
    }
    let decomposition = qr(&f.u)?;
    let r = &decomposition.r;
    let core = matmul(&matmul(r, &f.mid_inv)?, &r.transpose())?
        .scaled(-1.0)
        .symmetrized();
    let eig = sym_eig(&core)?;
    let clamped = eig.eigenvalues.iter().any(|&l| l < 0.0);
    let root: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let w = eig.eigenvectors.scale_columns(&root)?;
    Ok(LowRankFactor {
        z: matmul(&decomposition.q, &w)?,
        provenance: f.provenance.clone(),
        clamped,
    })
}

/// A stored per-task curvature correction on top of the diagonal `B0`.
#[derive(Debug, Clone, PartialEq)]
pub enum CurvatureFactor {
    Bfgs(CompactBfgsFactor),
    LowRank(LowRankFactor),
}

impl CurvatureFactor {
    pub fn dim(&self) -> usize {
        match self {
            CurvatureFactor::Bfgs(f) => f.u.rows(),
            CurvatureFactor::LowRank(f) => f.z.rows(),
        }
    }

    /// Stored `N`-vectors.
    pub fn columns(&self) -> usize {
        match self {
            CurvatureFactor::Bfgs(f) => f.u.cols(),
            CurvatureFactor::LowRank(f) => f.z.cols(),
        }
    }

    pub fn provenance(&self) -> &[usize] {
        match self {
            CurvatureFactor::Bfgs(f) => &f.provenance,
            CurvatureFactor::LowRank(f) => &f.provenance,
        }
    }

    pub fn clamped(&self) -> bool {
        match self {
            CurvatureFactor::Bfgs(_) => false,
            CurvatureFactor::LowRank(f) => f.clamped,
        }
    }

    /// Converts to `Z` form (BFGS corrections are projected to their PSD part).
    pub fn to_low_rank(&self) -> Result<LowRankFactor> {
        match self {
            CurvatureFactor::Bfgs(f) => bfgs_to_low_rank(f),
            CurvatureFactor::LowRank(f) => Ok(f.clone()),
        }
    }

    /// The low-rank correction applied to `v` (excluding `B0`).
    pub fn correction_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), v.len())?;
        match self {
            CurvatureFactor::Bfgs(f) => {
                let inner = f.mid_inv.matvec(&f.u.tr_matvec(v)?)?;
                Ok(f.u.matvec(&inner)?.into_iter().map(|x| -x).collect())
            }
            CurvatureFactor::LowRank(f) => Ok(f.z.matvec(&f.z.tr_matvec(v)?)?),
        }
    }

    /// `d^T C d` for the correction `C`.
    pub fn correction_quad(&self, d: &[f64]) -> Result<f64> {
        check_len(self.dim(), d.len())?;
        match self {
            CurvatureFactor::Bfgs(f) => {
                let ud = f.u.tr_matvec(d)?;
                Ok(-dot(&ud, &f.mid_inv.matvec(&ud)?))
            }
            CurvatureFactor::LowRank(f) => {
                let zd = f.z.tr_matvec(d)?;
                Ok(dot(&zd, &zd))
            }
        }
    }

    /// Correction value and its matvec sharing the projection `U^T d` / `Z^T d`.
    pub fn correction_quad_and_matvec(&self, d: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(self.dim(), d.len())?;
        match self {
            CurvatureFactor::Bfgs(f) => {
                let ud = f.u.tr_matvec(d)?;
                let inner = f.mid_inv.matvec(&ud)?;
                let mv = f.u.matvec(&inner)?.into_iter().map(|x| -x).collect();
                Ok((-dot(&ud, &inner), mv))
            }
            CurvatureFactor::LowRank(f) => {
                let zd = f.z.tr_matvec(d)?;
                Ok((dot(&zd, &zd), f.z.matvec(&zd)?))
            }
        }
    }
}

/// `B v` with `B = diag(b0) + correction`.
pub fn factor_matvec(b0: &[f64], factor: Option<&CurvatureFactor>, v: &[f64]) -> Result<Vec<f64>> {
    check_len(b0.len(), v.len())?;
    let mut out: Vec<f64> = b0.iter().zip(v).map(|(b, x)| b * x).collect();
    if let Some(f) = factor {
        for (o, c) in out.iter_mut().zip(f.correction_matvec(v)?) {
            *o += c;
        }
    }
    Ok(out)
}

/// `d^T B d`. Warns when a BFGS-based value is noticeably negative.
pub fn quad_form(b0: &[f64], factor: Option<&CurvatureFactor>, d: &[f64]) -> Result<f64> {
    check_len(b0.len(), d.len())?;
    let diag: f64 = b0.iter().zip(d).map(|(b, x)| b * x * x).sum();
    let corr = match factor {
        Some(f) => f.correction_quad(d)?,
        None => 0.0,
    };
    let q = diag + corr;
    if matches!(factor, Some(CurvatureFactor::Bfgs(_))) && q < -1e-8 * dot(d, d) {
        log::warn!("BFGS quadratic form is negative ({q:e})");
    }
    Ok(q)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_column_major<W: Write>(w: &mut W, m: &DenseMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(m.rows() * 8);
    for c in 0..m.cols() {
        buf.clear();
        for r in 0..m.rows() {
            buf.extend_from_slice(&m.get(r, c).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<R: Read, const K: usize>(r: &mut R) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_column_major<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(rows, cols);
    let mut buf = vec![0u8; rows * 8];
    for c in 0..cols {
        r.read_exact(&mut buf)?;
        for (row, chunk) in buf.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(CurvatureError::Format(format!("non-finite entry at ({row}, {c})")));
            }
            m.set(row, c, v);
        }
    }
    Ok(m)
}

/// Writes a factor blob: magic, version, kind, `N`, column count, clamped
/// flag, provenance, then column-major little-endian `f64` data (`U` and the
/// middle matrix for BFGS, `Z` otherwise).
pub fn write_factor<W: Write>(w: &mut W, factor: &CurvatureFactor) -> Result<()> {
    w.write_all(FACTOR_MAGIC)?;
    write_u32(w, FACTOR_VERSION)?;
    let kind = match factor {
        CurvatureFactor::Bfgs(_) => 0u8,
        CurvatureFactor::LowRank(_) => 1u8,
    };
    w.write_all(&[kind, factor.clamped() as u8])?;
    write_u64(w, factor.dim() as u64)?;
    write_u64(w, factor.columns() as u64)?;
    let prov = factor.provenance();
    write_u32(w, prov.len() as u32)?;
    for &t in prov {
        write_u32(w, t as u32)?;
    }
    match factor {
        CurvatureFactor::Bfgs(f) => {
            write_column_major(w, &f.u)?;
            write_column_major(w, &f.mid)?;
        }
        CurvatureFactor::LowRank(f) => write_column_major(w, &f.z)?,
    }
    Ok(())
}

pub fn read_factor<R: Read>(r: &mut R) -> Result<CurvatureFactor> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != FACTOR_MAGIC {
        return Err(CurvatureError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FACTOR_VERSION {
        return Err(CurvatureError::Format(format!("unsupported version {version}")));
    }
    let [kind, clamped]: [u8; 2] = read_array(r)?;
    let n = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let count = read_u32(r)? as usize;
    let provenance = (0..count)
        .map(|_| read_u32(r).map(|t| t as usize))
        .collect::<Result<Vec<_>>>()?;
    match kind {
        0 => {
            let u = read_column_major(r, n, cols)?;
            let mid = read_column_major(r, cols, cols)?;
            Ok(CurvatureFactor::Bfgs(CompactBfgsFactor::from_parts(u, mid, provenance)?))
        }
        1 => Ok(CurvatureFactor::LowRank(LowRankFactor {
            z: read_column_major(r, n, cols)?,
            provenance,
            clamped: clamped != 0,
        })),
        other => Err(CurvatureError::Format(format!("unknown factor kind {other}"))),
    }
}
