//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line with its
//! measured quantity, then asserts. Oracles (dense update recursions, a small
//! Jacobi eigen-solver, Gaussian elimination, finite differences) live here and
//! share no code with the library's numerics.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use csqn::curvature::{
    build_bfgs, build_sr1, factor_matvec, quad_form, sample_sy, z_from_sr1, CurvatureFactor, CurvaturePairs,
    FisherDiag, LowRankFactor, PairKind, QuadraticOracle, SamplingConfig,
};
use csqn::data::{load_mnist, MnistData};
use csqn::linalg::{gram_thin_svd, DenseMatrix};
use csqn::nn::{self, Batch, MlpArchitecture, Mode};
use csqn::regularizer::{Method, RegularizerState, Strategy};
use csqn::trainer::{metrics, run_experiment, EvalMatrix, ExperimentConfig, RunContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, pass: bool, detail: String, started: Instant) {
    println!(
        "criterion {id:>2} {}: {name} [{detail}] ({:.2}s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

// ---------- independent dense helpers ----------

type Mat = Vec<Vec<f64>>;

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

fn mat_vec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normv(a: &[f64]) -> f64 {
    dotv(a, a).sqrt()
}

fn outer_add(a: &mut Mat, u: &[f64], v: &[f64], scale: f64) {
    for (i, row) in a.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x += scale * u[i] * v[j];
        }
    }
}

fn diag_mat(d: &[f64]) -> Mat {
    let mut m = zeros(d.len(), d.len());
    for (i, &x) in d.iter().enumerate() {
        m[i][i] = x;
    }
    m
}

fn frob_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).powi(2)))
        .sum::<f64>()
        .sqrt()
}

fn frob(a: &Mat) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn from_dense(m: &DenseMatrix) -> Mat {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
}

fn column(m: &DenseMatrix, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m.get(i, j)).collect()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Mat = a.iter().zip(b).map(|(r, &v)| r.iter().copied().chain([v]).collect()).collect();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        m.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k..=n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (m[i][n] - (i + 1..n).map(|j| m[i][j] * x[j]).sum::<f64>()) / m[i][i];
    }
    x
}

/// Cyclic Jacobi: eigenvalues and eigenvectors (as columns) of a symmetric matrix.
fn jacobi(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut m = a.clone();
    let mut v = diag_mat(&vec![1.0; n]);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g: Mat = (0..n).map(|_| gauss(rng, n)).collect();
    let mut h = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[i][j] = (0..n).map(|k| g[i][k] * g[j][k]).sum::<f64>() / n as f64;
        }
        h[i][i] += 0.5;
    }
    h
}

fn to_dense(m: &Mat) -> DenseMatrix {
    DenseMatrix::from_rows(m).unwrap()
}

fn pairs_from(s: &[Vec<f64>], y: &[Vec<f64>]) -> CurvaturePairs {
    CurvaturePairs::from_columns(s[0].len(), s, y).unwrap()
}

/// Dense BFGS recursion from `B0` through the pairs in order.
fn dense_bfgs(b0: &[f64], s: &[Vec<f64>], y: &[Vec<f64>]) -> Mat {
    let mut b = diag_mat(b0);
    for (si, yi) in s.iter().zip(y) {
        let bs = mat_vec(&b, si);
        let sbs = dotv(si, &bs);
        outer_add(&mut b, &bs, &bs, -1.0 / sbs);
        outer_add(&mut b, yi, yi, 1.0 / dotv(yi, si));
    }
    b
}

/// Dense SR1 recursion from `B0` through the pairs in order.
fn dense_sr1(b0: &[f64], s: &[Vec<f64>], y: &[Vec<f64>]) -> Mat {
    let mut b = diag_mat(b0);
    for (si, yi) in s.iter().zip(y) {
        let r: Vec<f64> = yi.iter().zip(mat_vec(&b, si)).map(|(a, c)| a - c).collect();
        let den = dotv(&r, si);
        outer_add(&mut b, &r, &r, 1.0 / den);
    }
    b
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------- criteria ----------

#[test]
fn criterion_01_dense_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for n in [20, 30, 50] {
        for m in [1, 3, 5] {
            let b0: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let omega = FisherDiag::new(b0.clone()).unwrap();
            // y = H s with H = B0 + Q, Q PSD of rank > m: accepted for both updates
            // and the SR1 middle matrix is positive definite.
            let q_factor: Mat = (0..n).map(|_| gauss(&mut rng, m + 2)).collect();
            let mut h = diag_mat(&b0);
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += dotv(&q_factor[i], &q_factor[j]);
                }
            }
            let s: Vec<Vec<f64>> = (0..m).map(|_| gauss(&mut rng, n)).collect();
            let y: Vec<Vec<f64>> = s.iter().map(|si| mat_vec(&h, si)).collect();
            let pairs = pairs_from(&s, &y);
            let bfgs = CurvatureFactor::Bfgs(build_bfgs(&omega, &pairs, vec![1]).unwrap());
            let parts = build_sr1(&omega, &pairs).unwrap();
            let sr1 = CurvatureFactor::LowRank(z_from_sr1(&parts, vec![1]).unwrap());
            assert!(!sr1.clamped());
            let dense_b = dense_bfgs(&b0, &s, &y);
            let dense_s = dense_sr1(&b0, &s, &y);
            for _ in 0..100 {
                let d = gauss(&mut rng, n);
                for (f, dense) in [(&bfgs, &dense_b), (&sr1, &dense_s)] {
                    let want_v = mat_vec(dense, &d);
                    let got_v = factor_matvec(&b0, Some(f), &d).unwrap();
                    let err_v = normv(&want_v.iter().zip(&got_v).map(|(a, b)| a - b).collect::<Vec<_>>()) / normv(&want_v);
                    let want_q = dotv(&d, &want_v);
                    let got_q = quad_form(&b0, Some(f), &d).unwrap();
                    worst = worst.max(err_v).max(rel(got_q, want_q));
                }
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-8 && elapsed < 10.0;
    report(1, "compact BFGS/SR1 match dense recursions", pass, format!("max rel err {worst:.2e}, tol 1e-8"), t0);
    assert!(pass);
}

#[test]
fn criterion_02_sr1_multi_secant() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for trial in 0..40 {
        let n = 12 + trial % 9;
        // Indefinite H for half the trials.
        let mut h = random_spd(&mut rng, n);
        if trial % 2 == 1 {
            for i in 0..n {
                h[i][i] -= 1.0;
            }
        }
        let omega = FisherDiag::new((0..n).map(|i| h[i][i].abs() + 0.05).collect()).unwrap();
        let oracle = QuadraticOracle::new(to_dense(&h));
        let cfg = SamplingConfig {
            pairs: 1 + trial % 6,
            ..SamplingConfig::default()
        };
        let zero = vec![0.0; n];
        let pairs = sample_sy(&zero, &zero, &cfg, PairKind::Sr1, &omega, &oracle, trial as u64, 1).unwrap();
        let parts = build_sr1(&omega, &pairs).unwrap();
        let a = from_dense(&parts.a);
        let (ev, _) = jacobi(&a);
        let amax = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let amin = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if amax / amin > 1e8 {
            skipped += 1;
            continue;
        }
        let x = from_dense(&parts.x);
        let b0 = omega.as_slice();
        for j in 0..pairs.len() {
            let s = column(&pairs.s, j);
            let y = column(&pairs.y, j);
            // B s = B0 s + X A^{-1} X^T s
            let xts: Vec<f64> = (0..a.len()).map(|k| (0..n).map(|i| x[i][k] * s[i]).sum()).collect();
            let w = solve(&a, &xts);
            let bs: Vec<f64> = (0..n).map(|i| b0[i] * s[i] + dotv(&x[i], &w)).collect();
            let err = normv(&bs.iter().zip(&y).map(|(p, q)| p - q).collect::<Vec<_>>()) / normv(&y);
            worst = worst.max(err);
            checked += 1;
        }
    }
    let pass = worst <= 1e-6 && checked > 50 && t0.elapsed().as_secs_f64() < 5.0;
    report(
        2,
        "SR1 satisfies every secant",
        pass,
        format!("{checked} pairs, {skipped} ill-conditioned sets skipped, max rel residual {worst:.2e}, tol 1e-6"),
        t0,
    );
    assert!(pass);
}

#[test]
fn criterion_03_sr1_factorization() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_pd: f64 = 0.0;
    let mut worst_clamped: f64 = 0.0;
    let mut min_quad = f64::INFINITY;
    let mut clamped_cases = 0;
    for trial in 0..30 {
        let n = 25;
        let m = 2 + trial % 4;
        let x: Mat = (0..n).map(|_| gauss(&mut rng, m)).collect();
        let x_dense = to_dense(&x);
        let g: Mat = (0..m).map(|_| gauss(&mut rng, m)).collect();
        // PD A for even trials, indefinite for odd ones.
        let mut a = zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                a[i][j] = (0..m).map(|k| g[i][k] * g[j][k]).sum::<f64>();
            }
            a[i][i] += if trial % 2 == 0 { 0.5 } else { -1.5 };
        }
        let (ev, v) = jacobi(&a);
        let parts = csqn::curvature::Sr1Parts {
            x: x_dense,
            a: to_dense(&a),
        };
        let f = z_from_sr1(&parts, vec![1]).unwrap();
        let z = from_dense(&f.z);
        let zzt: Mat = (0..n).map(|i| (0..n).map(|j| dotv(&z[i], &z[j])).collect()).collect();
        // X V diag(g) V^T X^T with g = 1/lambda, or max(1/lambda, 0) when clamped.
        let xv: Mat = (0..n).map(|i| (0..m).map(|k| (0..m).map(|l| x[i][l] * v[l][k]).sum()).collect()).collect();
        let gamma: Vec<f64> = ev.iter().map(|&l| 1.0 / l).collect();
        let any_negative = gamma.iter().any(|&g| g < 0.0);
        let gp: Vec<f64> = gamma.iter().map(|&g| g.max(0.0)).collect();
        let want: Mat = (0..n)
            .map(|i| (0..n).map(|j| (0..m).map(|k| xv[i][k] * gp[k] * xv[j][k]).sum()).collect())
            .collect();
        let err = frob_diff(&zzt, &want) / frob(&want).max(1e-300);
        assert_eq!(f.clamped, any_negative);
        if any_negative {
            clamped_cases += 1;
            worst_clamped = worst_clamped.max(err);
            let factor = CurvatureFactor::LowRank(f);
            let b0 = vec![0.0; n];
            for _ in 0..10_000 {
                let d = gauss(&mut rng, n);
                min_quad = min_quad.min(quad_form(&b0, Some(&factor), &d).unwrap());
            }
        } else {
            worst_pd = worst_pd.max(err);
        }
    }
    let pass = worst_pd <= 1e-8
        && worst_clamped <= 1e-8
        && clamped_cases > 0
        && min_quad >= 0.0
        && t0.elapsed().as_secs_f64() < 10.0;
    report(
        3,
        "Z Z^T reproduces the SR1 correction, clamped when indefinite",
        pass,
        format!(
            "PD rel err {worst_pd:.2e}, clamped rel err {worst_clamped:.2e} over {clamped_cases} cases, min quad {min_quad:.2e}"
        ),
        t0,
    );
    assert!(pass);
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, method: Method, strategy: Strategy, tasks: usize) -> RegularizerState {
    let c = 4;
    let mut state = RegularizerState::new(n, method, strategy, 3.7, c);
    for t in 1..=tasks {
        let theta = gauss(rng, n);
        let omega = FisherDiag::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let factor = match method {
            Method::CsqnB => {
                let h = random_spd(rng, n);
                let s: Vec<Vec<f64>> = (0..3).map(|_| gauss(rng, n)).collect();
                let y: Vec<Vec<f64>> = s.iter().map(|si| mat_vec(&h, si)).collect();
                let b0 = FisherDiag::new(omega.as_slice().iter().map(|v| v + 0.1).collect()).unwrap();
                Some(CurvatureFactor::Bfgs(build_bfgs(&b0, &pairs_from(&s, &y), vec![t]).unwrap()))
            }
            Method::CsqnS => {
                let z: Mat = (0..n).map(|_| gauss(rng, 3)).collect();
                Some(CurvatureFactor::LowRank(LowRankFactor {
                    z: to_dense(&z),
                    provenance: vec![t],
                    clamped: false,
                }))
            }
            _ => None,
        };
        state.finish_task(theta, &omega, factor).unwrap();
    }
    state
}

#[test]
fn criterion_04_penalty_gradients() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let n = 30;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut configs = vec![(Method::Ewc, Strategy::None, 3)];
    for method in [Method::CsqnB, Method::CsqnS] {
        for strategy in [Strategy::None, Strategy::Ct, Strategy::Mrt, Strategy::Btree] {
            // 3 tasks leaves BTREE mid-merge (levels 1 and 0); 4 fully merged.
            configs.push((method, strategy, 3));
            configs.push((method, strategy, 4));
        }
    }
    for (method, strategy, tasks) in configs {
        let state = random_state(&mut rng, n, method, strategy, tasks);
        if strategy == Strategy::Btree && tasks == 3 {
            assert_eq!(state.factors.iter().map(|f| f.0).collect::<Vec<_>>(), vec![1, 0]);
        }
        let theta = gauss(&mut rng, n);
        let p = state.penalty(&theta).unwrap();
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let mut a = theta.clone();
                let mut b = theta.clone();
                a[i] += h;
                b[i] -= h;
                (state.penalty(&a).unwrap().value - state.penalty(&b).unwrap().value) / (2.0 * h)
            })
            .collect();
        let err = normv(&p.gradient.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>()) / normv(&fd);
        worst = worst.max(err);
        cases += 1;
    }
    let pass = worst <= 1e-6 && t0.elapsed().as_secs_f64() < 30.0;
    report(4, "penalty gradients match central differences", pass, format!("{cases} states, max rel err {worst:.2e}, tol 1e-6"), t0);
    assert!(pass);
}

#[test]
fn criterion_05_backprop() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for (widths, seed) in [(vec![6, 10, 8, 4], 1u64), (vec![12, 20, 5], 2), (vec![5, 7, 7, 7, 3], 3)] {
        let arch = MlpArchitecture::new(widths.clone(), 0.0).unwrap();
        assert!(arch.param_count() <= 500);
        let theta32 = arch.init_params(seed).0;
        let b = 16;
        let x32: Vec<f32> = (0..b * widths[0]).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..*widths.last().unwrap() as u8)).collect();
        let batch32 = Batch::new(&x32, &labels, widths[0]).unwrap();
        let (_, g32) = nn::loss_and_grad(&arch, &theta32, &batch32, Mode::Eval, &mut rng).unwrap();
        // Finite differences of the same network evaluated in 64-bit.
        let x64: Vec<f64> = x32.iter().map(|&v| v as f64).collect();
        let batch64 = Batch::new(&x64, &labels, widths[0]).unwrap();
        let theta64: Vec<f64> = theta32.iter().map(|&v| v as f64).collect();
        let h = 1e-6;
        let loss = |t: &[f64]| nn::loss_and_grad(&arch, t, &batch64, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().0;
        let fd: Vec<f64> = (0..theta64.len())
            .map(|i| {
                let mut a = theta64.clone();
                let mut c = theta64.clone();
                a[i] += h;
                c[i] -= h;
                (loss(&a) - loss(&c)) / (2.0 * h)
            })
            .collect();
        let err = normv(&g32.iter().zip(&fd).map(|(a, b)| *a as f64 - b).collect::<Vec<_>>()) / normv(&fd);
        worst = worst.max(err);
    }
    let pass = worst <= 1e-3 && t0.elapsed().as_secs_f64() < 10.0;
    report(5, "32-bit backprop matches finite differences", pass, format!("max rel err {worst:.2e}, tol 1e-3"), t0);
    assert!(pass);
}

#[test]
fn criterion_06_reduction_fidelity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_svd: f64 = 0.0;
    for (n, m, keep) in [(40, 8, 3), (30, 10, 5), (60, 6, 1), (25, 12, 11)] {
        let z: Mat = (0..n).map(|_| gauss(&mut rng, m)).collect();
        let zd = to_dense(&z);
        let reduced = from_dense(&gram_thin_svd(&zd, keep).unwrap());
        let zzt: Mat = (0..n).map(|i| (0..n).map(|j| dotv(&z[i], &z[j])).collect()).collect();
        let rrt: Mat = (0..n).map(|i| (0..n).map(|j| dotv(&reduced[i], &reduced[j])).collect()).collect();
        let err = frob_diff(&zzt, &rrt);
        // Eigenvalues of Z^T Z are the squared singular values of Z; the best
        // rank-k error of Z Z^T is the norm of the discarded ones.
        let gram: Mat = (0..m).map(|i| (0..m).map(|j| (0..n).map(|k| z[k][i] * z[k][j]).sum()).collect()).collect();
        let (mut ev, _) = jacobi(&gram);
        ev.sort_by(|a, b| b.total_cmp(a));
        let tail = ev[keep..].iter().map(|l| l * l).sum::<f64>().sqrt();
        worst_svd = worst_svd.max((err - tail).abs() / frob(&zzt));
    }
    let n = 40;
    let t = 4;
    let cols = 3;
    let mut none = RegularizerState::new(n, Method::CsqnS, Strategy::None, 1.0, cols * t);
    let mut btree = RegularizerState::new(n, Method::CsqnS, Strategy::Btree, 1.0, cols * t);
    for task in 1..=t {
        let theta = gauss(&mut rng, n);
        let omega = FisherDiag::new((0..n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
        let z: Mat = (0..n).map(|_| gauss(&mut rng, cols)).collect();
        let f = CurvatureFactor::LowRank(LowRankFactor {
            z: to_dense(&z),
            provenance: vec![task],
            clamped: false,
        });
        none.finish_task(theta.clone(), &omega, Some(f.clone())).unwrap();
        btree.finish_task(theta, &omega, Some(f)).unwrap();
    }
    assert_eq!(btree.factors.len(), 1);
    let mut worst_tree: f64 = 0.0;
    for _ in 0..200 {
        let theta = gauss(&mut rng, n);
        let a = none.penalty(&theta).unwrap().value;
        let b = btree.penalty(&theta).unwrap().value;
        worst_tree = worst_tree.max(rel(b, a));
    }
    let pass = worst_svd <= 1e-8 && worst_tree <= 1e-9 && t0.elapsed().as_secs_f64() < 10.0;
    report(
        6,
        "thin SVD error equals tail energy; lossless BTREE equals NONE",
        pass,
        format!("svd err gap {worst_svd:.2e} (tol 1e-8), btree rel diff {worst_tree:.2e} (tol 1e-9)"),
        t0,
    );
    assert!(pass);
}

#[test]
fn criterion_07_degenerate_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let n = 50;
    let mut ewc = RegularizerState::new(n, Method::Ewc, Strategy::None, 12.5, 10);
    let mut csqn = RegularizerState::new(n, Method::CsqnS, Strategy::None, 12.5, 10);
    for _ in 0..3 {
        let theta = gauss(&mut rng, n);
        let omega = FisherDiag::new((0..n).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        ewc.finish_task(theta.clone(), &omega, None).unwrap();
        csqn.finish_task(theta, &omega, Some(CurvatureFactor::LowRank(LowRankFactor::empty(n))))
            .unwrap();
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let theta = gauss(&mut rng, n);
        let a = ewc.penalty(&theta).unwrap();
        let b = csqn.penalty(&theta).unwrap();
        worst = worst.max(rel(b.value, a.value));
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            worst = worst.max((x - y).abs() / a.gradient.iter().map(|g| g.abs()).fold(0.0, f64::max));
        }
    }
    let ft = run_experiment(&ExperimentConfig::synthetic(Method::FineTune, 0.0), &RunContext::default()).unwrap();
    let mut same = true;
    for method in [Method::Ewc, Method::CsqnS, Method::CsqnB] {
        let cfg = ExperimentConfig {
            pairs: 4,
            ..ExperimentConfig::synthetic(method, 0.0)
        };
        let r = run_experiment(&cfg, &RunContext::default()).unwrap();
        same &= r.theta == ft.theta && r.r == ft.r;
    }
    let pass = worst <= 1e-12 && same && t0.elapsed().as_secs_f64() < 120.0;
    report(
        7,
        "zero pairs equals EWC; lambda 0 equals fine-tuning",
        pass,
        format!("penalty rel diff {worst:.2e} (tol 1e-12), lambda=0 trajectories bit-identical: {same}"),
        t0,
    );
    assert!(pass);
}

fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("CSQN_DATA").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates.into_iter().flatten().find(|p| p.join("train-images-idx3-ubyte").exists() || p.join("train-images-idx3-ubyte.gz").exists())
}

/// Regularization strengths for the desk-scale comparison, picked on the
/// validation split (see README).
const DESK_EWC_LAMBDA: f64 = 1000.0;
const DESK_CSQN_LAMBDA: f64 = 100.0;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

#[test]
fn criterion_08_desk_scale_ordering() {
    let t0 = Instant::now();
    let Some(dir) = mnist_dir() else {
        report(8, "desk-scale method ordering", false, "MNIST not found: set CSQN_DATA or place the IDX files in data/mnist".into(), t0);
        panic!("MNIST data required for the desk-scale comparison");
    };
    let mnist = Arc::new(load_mnist(&dir, 0).unwrap());
    let ctx = RunContext {
        mnist: Some(mnist),
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let run = |method: Method, lambda: f64| -> (f64, f64) {
        let mut accs = Vec::new();
        let mut bwts = Vec::new();
        for seed in DESK_SEEDS {
            let cfg = ExperimentConfig {
                seed,
                ..ExperimentConfig::desk_mnist(method, lambda)
            };
            let res = run_experiment(&cfg, &ctx).unwrap();
            println!("  {method} lambda={lambda} seed={seed}: ACC {:.4} BWT {:.4}", res.metrics.acc, res.metrics.bwt.unwrap());
            accs.push(res.metrics.acc);
            bwts.push(res.metrics.bwt.unwrap());
        }
        let k = accs.len() as f64;
        (accs.iter().sum::<f64>() / k, bwts.iter().sum::<f64>() / k)
    };
    let (ft_acc, ft_bwt) = run(Method::FineTune, 0.0);
    let (ewc_acc, ewc_bwt) = run(Method::Ewc, DESK_EWC_LAMBDA);
    let (cs_acc, cs_bwt) = run(Method::CsqnS, DESK_CSQN_LAMBDA);
    let checks = [
        ("CSQN-EWC >= 2 pts", cs_acc - ewc_acc >= 0.02),
        ("EWC-FT >= 5 pts", ewc_acc - ft_acc >= 0.05),
        ("BWT(FT) < 0", ft_bwt < 0.0),
        ("|BWT(CSQN)| < |BWT(EWC)|", cs_bwt.abs() < ewc_bwt.abs()),
        ("runtime < 20 min", t0.elapsed().as_secs_f64() < 1200.0),
    ];
    let pass = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        8,
        "desk-scale ordering CSQN-S(10) > EWC > FT",
        pass,
        format!(
            "ACC FT {:.2} / EWC {:.2} / CSQN {:.2}, BWT FT {:.2} / EWC {:.2} / CSQN {:.2}{}",
            100.0 * ft_acc,
            100.0 * ewc_acc,
            100.0 * cs_acc,
            100.0 * ft_bwt,
            100.0 * ewc_bwt,
            100.0 * cs_bwt,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
        t0,
    );
    assert!(pass);
}

#[test]
fn criterion_09_metrics_formula() {
    let t0 = Instant::now();
    let r = EvalMatrix::from_rows(vec![vec![0.9, 0.1, 0.1], vec![0.85, 0.95, 0.2], vec![0.8, 0.9, 0.95]]).unwrap();
    let m = metrics(&r);
    // ACC = (0.8 + 0.9 + 0.95) / 3, BWT = ((0.8 - 0.9) + (0.9 - 0.95)) / 2.
    let acc = (0.8 + 0.9 + 0.95) / 3.0;
    let bwt = ((0.8 - 0.9) + (0.9 - 0.95)) / 2.0;
    let ones = metrics(&EvalMatrix::from_rows(vec![vec![1.0; 4]; 4]).unwrap());
    let pass = m.acc == acc
        && m.bwt == Some(bwt)
        && (bwt - -0.075f64).abs() < 1e-15
        && ones.acc == 1.0
        && ones.bwt == Some(0.0)
        && t0.elapsed().as_secs_f64() < 1.0;
    report(9, "ACC and BWT by hand", pass, format!("ACC {:.6} BWT {:.6}", m.acc, m.bwt.unwrap()), t0);
    assert!(pass);
}

#[test]
#[ignore = "hours of CPU time; run with --ignored"]
fn criterion_10_full_rotated_mnist() {
    let t0 = Instant::now();
    let dir = mnist_dir().expect("MNIST data required");
    let mnist: Arc<MnistData> = Arc::new(load_mnist(&dir, 0).unwrap());
    let mut cfg = ExperimentConfig::desk_mnist(Method::CsqnS, 1e4);
    cfg.dataset = csqn::trainer::DatasetConfig::RotatedMnist {
        tasks: 20,
        degrees_per_task: 5.0,
    };
    cfg.pairs = 20;
    cfg.epochs = 10;
    cfg.train_cap = None;
    let res = run_experiment(
        &cfg,
        &RunContext {
            mnist: Some(mnist),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    )
    .unwrap();
    let acc = 100.0 * res.metrics.acc;
    let bwt = 100.0 * res.metrics.bwt.unwrap();
    let within = (acc - 86.22).abs() <= 2.0 && (bwt + 7.46).abs() <= 2.0;
    println!(
        "criterion 10 {}: full Rotated MNIST CSQN-S(20) [ACC {acc:.2} (published 86.22), BWT {bwt:.2} (published -7.46), band +-2] ({:.0}s)",
        if within { "PASS" } else { "OUTSIDE BAND" },
        t0.elapsed().as_secs_f64()
    );
}
