//! Posterior bookkeeping across tasks: the EWC and CSQN quadratic penalties,
//! accumulation of Fisher diagonals and the memory-reduction strategies that
//! bound how many curvature vectors are kept.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::{
    self, read_factor, write_factor, CurvatureError, CurvatureFactor, FisherDiag, LowRankFactor,
};
use crate::linalg::{gram_thin_svd, LinalgError};

const STATE_MAGIC: &[u8; 4] = b"CSQR";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("parameter vector has length {got}, state holds {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{method} needs a curvature factor for every task")]
    MissingFactor { method: Method },
    #[error("state file: {0}")]
    Format(String),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RegularizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "finetune")]
    FineTune,
    #[serde(rename = "ewc")]
    Ewc,
    #[serde(rename = "csqn-b")]
    CsqnB,
    #[serde(rename = "csqn-s")]
    CsqnS,
}

impl Method {
    pub fn uses_curvature(self) -> bool {
        matches!(self, Method::CsqnB | Method::CsqnS)
    }

    pub fn pair_kind(self) -> Option<curvature::PairKind> {
        match self {
            Method::CsqnB => Some(curvature::PairKind::Bfgs),
            Method::CsqnS => Some(curvature::PairKind::Sr1),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::FineTune => "finetune",
            Method::Ewc => "ewc",
            Method::CsqnB => "csqn-b",
            Method::CsqnS => "csqn-s",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Method::FineTune => 0,
            Method::Ewc => 1,
            Method::CsqnB => 2,
            Method::CsqnS => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [Method::FineTune, Method::Ewc, Method::CsqnB, Method::CsqnS]
            .into_iter()
            .find(|m| m.tag() == t)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Method::FineTune, Method::Ewc, Method::CsqnB, Method::CsqnS]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (finetune, ewc, csqn-b, csqn-s)"))
    }
}

/// How per-task curvature factors are retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Keep every task's factor.
    #[default]
    None,
    /// Concatenate and truncate to a fixed column budget after every task.
    Ct,
    /// Binary-counter merging: equal-level factors are merged and truncated.
    Btree,
    /// Keep only the most recent task's factor.
    Mrt,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Ct => "ct",
            Strategy::Btree => "btree",
            Strategy::Mrt => "mrt",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Strategy::None => 0,
            Strategy::Ct => 1,
            Strategy::Btree => 2,
            Strategy::Mrt => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [Strategy::None, Strategy::Ct, Strategy::Btree, Strategy::Mrt]
            .into_iter()
            .find(|s| s.tag() == t)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Strategy::None, Strategy::Ct, Strategy::Btree, Strategy::Mrt]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (none, ct, btree, mrt)"))
    }
}

/// Penalty value and its gradient with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl Penalty {
    pub fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            gradient: vec![0.0; n],
        }
    }
}

/// Stored-vector accounting for a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryCost {
    /// `N`-vectors held in curvature factors.
    pub factor_columns: usize,
    /// `N`-vectors held as diagonals.
    pub diagonals: usize,
    pub factors: usize,
}

impl MemoryCost {
    pub fn total_vectors(&self) -> usize {
        self.factor_columns + self.diagonals
    }
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerState {
    pub method: Method,
    pub strategy: Strategy,
    pub lambda: f64,
    /// Column budget `c` for the reducing strategies.
    pub target_cols: usize,
    /// Parameters after the most recent task.
    pub anchor: Option<Vec<f64>>,
    /// Sum of all tasks' Fisher diagonals.
    pub b0_acc: FisherDiag,
    /// Per-strategy factor storage. For [`Strategy::Btree`] entries are
    /// `(level, factor)` with the top of the stack last.
    pub factors: Vec<(u32, CurvatureFactor)>,
    pub tasks_done: usize,
}

impl RegularizerState {
    pub fn new(n: usize, method: Method, strategy: Strategy, lambda: f64, target_cols: usize) -> Self {
        Self {
            method,
            strategy,
            lambda,
            target_cols,
            anchor: None,
            b0_acc: FisherDiag::zeros(n),
            factors: Vec::new(),
            tasks_done: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b0_acc.len()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(RegularizerError::Dimension {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Penalty for the state's method; zero before the first task and for
    /// fine-tuning.
    pub fn penalty(&self, theta: &[f64]) -> Result<Penalty> {
        self.check_dim(theta.len())?;
        match (self.method, &self.anchor) {
            (Method::FineTune, _) | (_, None) => Ok(Penalty::zero(theta.len())),
            (Method::Ewc, Some(_)) => self.ewc_penalty(theta),
            (_, Some(_)) => self.csqn_penalty(theta),
        }
    }

    fn displacement(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(theta.len())?;
        Ok(match &self.anchor {
            Some(a) => theta.iter().zip(a).map(|(t, a)| t - a).collect(),
            None => vec![0.0; theta.len()],
        })
    }

    /// `(lambda / 2) sum_i B0_i d_i^2` and `lambda B0 * d` with `d = theta - anchor`.
    pub fn ewc_penalty(&self, theta: &[f64]) -> Result<Penalty> {
        let d = self.displacement(theta)?;
        let mut value = 0.0;
        let gradient = self
            .b0_acc
            .as_slice()
            .iter()
            .zip(&d)
            .map(|(&b, &di)| {
                value += b * di * di;
                self.lambda * b * di
            })
            .collect();
        Ok(Penalty {
            value: 0.5 * self.lambda * value,
            gradient,
        })
    }

    /// The EWC term plus every stored low-rank correction.
    pub fn csqn_penalty(&self, theta: &[f64]) -> Result<Penalty> {
        let mut p = self.ewc_penalty(theta)?;
        if self.factors.is_empty() {
            return Ok(p);
        }
        let d = self.displacement(theta)?;
        let mut corr = 0.0;
        for (_, f) in &self.factors {
            let (q, mv) = f.correction_quad_and_matvec(&d)?;
            corr += q;
            for (g, m) in p.gradient.iter_mut().zip(mv) {
                *g += self.lambda * m;
            }
        }
        p.value += 0.5 * self.lambda * corr;
        if matches!(self.method, Method::CsqnB)
            && self.factors.iter().any(|(_, f)| matches!(f, CurvatureFactor::Bfgs(_)))
        {
            let dd: f64 = d.iter().map(|x| x * x).sum();
            if p.value < -1e-8 * dd {
                log::warn!("BFGS penalty is negative ({:e})", p.value);
            }
        }
        Ok(p)
    }

    /// Records a finished task: new anchor, accumulated Fisher and the new
    /// factor stored or merged according to the strategy.
    pub fn finish_task(
        &mut self,
        theta: Vec<f64>,
        omega: &FisherDiag,
        factor: Option<CurvatureFactor>,
    ) -> Result<()> {
        self.check_dim(theta.len())?;
        self.check_dim(omega.len())?;
        if let Some(f) = &factor {
            self.check_dim(f.dim())?;
        }
        if self.method.uses_curvature() && factor.is_none() {
            return Err(RegularizerError::MissingFactor {
                method: self.method,
            });
        }
        self.anchor = Some(theta);
        self.b0_acc.add_assign(omega)?;
        self.tasks_done += 1;
        let Some(factor) = factor.filter(|_| self.method.uses_curvature()) else {
            return Ok(());
        };
        match self.strategy {
            Strategy::None => self.factors.push((0, factor)),
            Strategy::Mrt => self.factors = vec![(0, factor)],
            Strategy::Ct => {
                let new = factor.to_low_rank()?;
                let merged = match self.factors.pop() {
                    Some((_, prev)) => reduce_ct(Some(&prev.to_low_rank()?), &new, self.target_cols)?,
                    None => reduce_ct(None, &new, self.target_cols)?,
                };
                self.factors = vec![(0, CurvatureFactor::LowRank(merged))];
            }
            Strategy::Btree => {
                let mut stack = self
                    .factors
                    .drain(..)
                    .map(|(level, f)| f.to_low_rank().map(|z| (level, z)))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                reduce_btree(&mut stack, factor.to_low_rank()?, self.target_cols)?;
                self.factors = stack
                    .into_iter()
                    .map(|(level, z)| (level, CurvatureFactor::LowRank(z)))
                    .collect();
            }
        }
        Ok(())
    }

    pub fn memory_cost(&self) -> MemoryCost {
        strategy_memory_cost(self)
    }
}

/// Concatenates `[prev | new]` and, when the result exceeds `c` columns,
/// keeps its top-`c` singular directions scaled by `sqrt(M_b / M_a)`.
pub fn reduce_ct(prev: Option<&LowRankFactor>, new: &LowRankFactor, c: usize) -> Result<LowRankFactor> {
    let (z, mut provenance, clamped) = match prev {
        Some(p) => (
            p.z.hcat(&new.z)?,
            p.provenance.iter().chain(&new.provenance).copied().collect::<Vec<_>>(),
            p.clamped || new.clamped,
        ),
        None => (new.z.clone(), new.provenance.clone(), new.clamped),
    };
    provenance.sort_unstable();
    provenance.dedup();
    let mb = z.cols();
    if mb <= c || c == 0 {
        return Ok(LowRankFactor {
            z,
            provenance,
            clamped,
        });
    }
    let reduced = gram_thin_svd(&z, c)?.scaled((mb as f64 / c as f64).sqrt());
    Ok(LowRankFactor {
        z: reduced,
        provenance,
        clamped,
    })
}

/// Pushes `new` at level 0 and merges equal-level neighbours on top of the
/// stack, like incrementing a binary counter.
pub fn reduce_btree(stack: &mut Vec<(u32, LowRankFactor)>, new: LowRankFactor, c: usize) -> Result<()> {
    stack.push((0, new));
    while stack.len() >= 2 && stack[stack.len() - 1].0 == stack[stack.len() - 2].0 {
        let (level, top) = stack.pop().expect("len >= 2");
        let (_, below) = stack.pop().expect("len >= 2");
        stack.push((level + 1, reduce_ct(Some(&below), &top, c)?));
    }
    Ok(())
}

/// Number of stored `N`-vectors: factor columns plus the accumulated diagonal.
pub fn strategy_memory_cost(state: &RegularizerState) -> MemoryCost {
    MemoryCost {
        factor_columns: state.factors.iter().map(|(_, f)| f.columns()).sum(),
        diagonals: usize::from(state.method != Method::FineTune),
        factors: state.factors.len(),
    }
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn read_bytes<R: Read, const K: usize>(r: &mut R) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Writes the state: magic, version, method and strategy tags, `lambda`,
/// column budget, task count, `N`, optional anchor, accumulated diagonal and
/// the factor blobs with their levels. Little-endian throughout.
pub fn write_state<W: Write>(w: &mut W, s: &RegularizerState) -> Result<()> {
    w.write_all(STATE_MAGIC)?;
    w.write_all(&STATE_VERSION.to_le_bytes())?;
    w.write_all(&[s.method.tag(), s.strategy.tag(), s.anchor.is_some() as u8])?;
    w.write_all(&s.lambda.to_le_bytes())?;
    w.write_all(&(s.target_cols as u64).to_le_bytes())?;
    w.write_all(&(s.tasks_done as u64).to_le_bytes())?;
    w.write_all(&(s.dim() as u64).to_le_bytes())?;
    if let Some(a) = &s.anchor {
        write_f64s(w, a)?;
    }
    write_f64s(w, s.b0_acc.as_slice())?;
    w.write_all(&(s.factors.len() as u32).to_le_bytes())?;
    for (level, f) in &s.factors {
        w.write_all(&level.to_le_bytes())?;
        write_factor(w, f)?;
    }
    Ok(())
}

pub fn read_state<R: Read>(r: &mut R) -> Result<RegularizerState> {
    let magic: [u8; 4] = read_bytes(r)?;
    if &magic != STATE_MAGIC {
        return Err(RegularizerError::Format(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_bytes(r)?);
    if version != STATE_VERSION {
        return Err(RegularizerError::Format(format!("unsupported version {version}")));
    }
    let [m, st, has_anchor]: [u8; 3] = read_bytes(r)?;
    let method = Method::from_tag(m).ok_or_else(|| RegularizerError::Format(format!("method tag {m}")))?;
    let strategy = Strategy::from_tag(st).ok_or_else(|| RegularizerError::Format(format!("strategy tag {st}")))?;
    let lambda = f64::from_le_bytes(read_bytes(r)?);
    let target_cols = u64::from_le_bytes(read_bytes(r)?) as usize;
    let tasks_done = u64::from_le_bytes(read_bytes(r)?) as usize;
    let n = u64::from_le_bytes(read_bytes(r)?) as usize;
    let anchor = if has_anchor != 0 { Some(read_f64s(r, n)?) } else { None };
    let b0_acc = FisherDiag::new(read_f64s(r, n)?)?;
    let count = u32::from_le_bytes(read_bytes(r)?) as usize;
    let mut factors = Vec::with_capacity(count);
    for _ in 0..count {
        let level = u32::from_le_bytes(read_bytes(r)?);
        let f = read_factor(r)?;
        if f.dim() != n {
            return Err(RegularizerError::Format(format!("factor dimension {} != {n}", f.dim())));
        }
        factors.push((level, f));
    }
    Ok(RegularizerState {
        method,
        strategy,
        lambda,
        target_cols,
        anchor,
        b0_acc,
        factors,
        tasks_done,
    })
}
