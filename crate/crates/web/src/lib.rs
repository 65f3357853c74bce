//! Browser demo. Three operations, each a plain Rust function returning a
//! serializable result plus a `wasm_bindgen` wrapper that hands JSON to the page:
//!
//! * [`curvature_ellipse`]: true, diagonal and quasi-Newton curvature of a 2-D quadratic.
//! * [`synthetic_run`]: a small continual-learning run on drifting Gaussian blobs.
//! * [`memory_layout`]: how each strategy stores curvature factors as tasks accumulate.

use csqn::curvature::{
    build_bfgs, build_sr1, factor_matvec, sample_sy, z_from_sr1, CurvatureFactor, FisherDiag, LowRankFactor,
    PairKind, QuadraticOracle, SamplingConfig,
};
use csqn::data::mix;
use csqn::linalg::DenseMatrix;
use csqn::regularizer::{Method, RegularizerState, Strategy};
use csqn::trainer::{run_experiment, DatasetConfig, ExperimentConfig, RunContext};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Symmetric 2x2 matrix as `[a, b, c]` for `[[a, b], [b, c]]`.
pub type Sym2 = [f64; 3];

#[derive(Debug, Clone, Serialize)]
pub struct EllipseResult {
    pub hessian: Sym2,
    pub diagonal: Sym2,
    pub quasi_newton: Sym2,
    /// Accepted sampling directions `s`.
    pub directions: Vec<[f64; 2]>,
    pub clamped: bool,
}

fn sym2_of(b0: &[f64], factor: Option<&CurvatureFactor>) -> Result<Sym2, String> {
    let c0 = factor_matvec(b0, factor, &[1.0, 0.0]).map_err(|e| e.to_string())?;
    let c1 = factor_matvec(b0, factor, &[0.0, 1.0]).map_err(|e| e.to_string())?;
    Ok([c0[0], 0.5 * (c0[1] + c1[0]), c1[1]])
}

/// Samples `pairs` curvature pairs of `f(x) = x^T H x / 2` around the origin,
/// with the diagonal of `H` as base matrix, and returns the resulting
/// curvature next to the exact one.
pub fn curvature_ellipse(h: Sym2, pairs: usize, sr1: bool, seed: u64) -> Result<EllipseResult, String> {
    let hm = DenseMatrix::from_rows(&[vec![h[0], h[1]], vec![h[1], h[2]]]).map_err(|e| e.to_string())?;
    let omega = FisherDiag::new(vec![h[0].abs(), h[2].abs()]).map_err(|e| e.to_string())?;
    let diagonal = [omega.as_slice()[0], 0.0, omega.as_slice()[1]];
    if pairs == 0 {
        return Ok(EllipseResult {
            hessian: h,
            diagonal,
            quasi_newton: diagonal,
            directions: vec![],
            clamped: false,
        });
    }
    let oracle = QuadraticOracle::new(hm);
    let cfg = SamplingConfig {
        pairs,
        ..SamplingConfig::default()
    };
    let kind = if sr1 { PairKind::Sr1 } else { PairKind::Bfgs };
    let sampled = sample_sy(&[0.0, 0.0], &[0.0, 0.0], &cfg, kind, &omega, &oracle, seed, 1).map_err(|e| e.to_string())?;
    let factor = if sr1 {
        let parts = build_sr1(&omega, &sampled).map_err(|e| e.to_string())?;
        CurvatureFactor::LowRank(z_from_sr1(&parts, vec![1]).map_err(|e| e.to_string())?)
    } else {
        CurvatureFactor::Bfgs(build_bfgs(&omega, &sampled, vec![1]).map_err(|e| e.to_string())?)
    };
    let directions = (0..sampled.len())
        .map(|j| [sampled.s.get(0, j), sampled.s.get(1, j)])
        .collect();
    Ok(EllipseResult {
        hessian: h,
        diagonal,
        quasi_newton: sym2_of(omega.as_slice(), Some(&factor))?,
        directions,
        clamped: factor.clamped(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub r: Vec<Vec<f64>>,
    pub average_accuracy: Vec<f64>,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub memory_vectors: Vec<usize>,
}

/// Continual run over `tasks` drifting blob tasks.
pub fn synthetic_run(method: &str, lambda: f64, pairs: usize, tasks: usize, shift: f64, seed: u64) -> Result<RunSummary, String> {
    let method: Method = method.parse()?;
    let mut cfg = ExperimentConfig::synthetic(method, lambda);
    cfg.pairs = pairs.max(1);
    cfg.seed = seed;
    if let DatasetConfig::Synthetic { tasks: t, shift: s, .. } = &mut cfg.dataset {
        *t = tasks;
        *s = shift;
    }
    let res = run_experiment(&cfg, &RunContext { mnist: None, threads: 1 }).map_err(|e| e.to_string())?;
    Ok(RunSummary {
        average_accuracy: res.r.average_accuracy_curve(),
        acc: res.metrics.acc,
        bwt: res.metrics.bwt,
        memory_vectors: res.report.memory_vectors,
        r: res.r.rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoredFactor {
    pub level: u32,
    pub tasks: Vec<usize>,
    pub columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutStep {
    pub task: usize,
    pub factors: Vec<StoredFactor>,
    pub total_columns: usize,
}

/// Factors held after each task when every task contributes `cols` columns.
pub fn memory_layout(strategy: &str, tasks: usize, cols: usize) -> Result<Vec<LayoutStep>, String> {
    let strategy: Strategy = strategy.parse()?;
    let cols = cols.max(1);
    let n = (4 * cols).max(16);
    let mut state = RegularizerState::new(n, Method::CsqnS, strategy, 1.0, cols);
    let omega = FisherDiag::new(vec![1.0; n]).map_err(|e| e.to_string())?;
    let mut steps = Vec::with_capacity(tasks);
    for t in 1..=tasks {
        let z = DenseMatrix::from_fn(n, cols, |i, j| {
            (mix(t as u64, i as u64, j as u64) >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let factor = CurvatureFactor::LowRank(LowRankFactor {
            z,
            provenance: vec![t],
            clamped: false,
        });
        state
            .finish_task(vec![0.0; n], &omega, Some(factor))
            .map_err(|e| e.to_string())?;
        let factors: Vec<StoredFactor> = state
            .factors
            .iter()
            .map(|(level, f)| StoredFactor {
                level: *level,
                tasks: f.provenance().to_vec(),
                columns: f.columns(),
            })
            .collect();
        steps.push(LayoutStep {
            task: t,
            total_columns: factors.iter().map(|f| f.columns).sum(),
            factors,
        });
    }
    Ok(steps)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("result serializes"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = curvatureEllipse)]
pub fn curvature_ellipse_js(h11: f64, h12: f64, h22: f64, pairs: usize, sr1: bool, seed: u32) -> Result<String, JsValue> {
    to_js(curvature_ellipse([h11, h12, h22], pairs, sr1, seed.into()))
}

#[wasm_bindgen(js_name = syntheticRun)]
pub fn synthetic_run_js(method: &str, lambda: f64, pairs: usize, tasks: usize, shift: f64, seed: u32) -> Result<String, JsValue> {
    to_js(synthetic_run(method, lambda, pairs, tasks, shift, seed.into()))
}

#[wasm_bindgen(js_name = memoryLayout)]
pub fn memory_layout_js(strategy: &str, tasks: usize, cols: usize) -> Result<String, JsValue> {
    to_js(memory_layout(strategy, tasks, cols))
}
