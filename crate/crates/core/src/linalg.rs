//! Dense 64-bit kernels sized for tall-skinny `N x c` curvature factors and
//! small `c x c` symmetric systems.
//!
//! Every routine uses a fixed loop order, so identical inputs give
//! bit-identical outputs on every platform.

use thiserror::Error;

/// Relative asymmetry tolerated by the symmetric routines.
const SYMMETRY_TOL: f64 = 1e-8;
const MAX_JACOBI_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { op: &'static str, asymmetry: f64 },
    #[error("{op}: invalid rank {keep} for a matrix with {cols} columns")]
    InvalidRank {
        op: &'static str,
        keep: usize,
        cols: usize,
    },
    #[error("matrix data has {len} entries, expected {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Validated constructor: the length must match and every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: idx / cols.max(1),
                col: idx % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds an `n x columns.len()` matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(n: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        for c in columns {
            if c.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    op: "from_columns",
                    left: (n, cols),
                    right: (c.len(), 1),
                });
            }
        }
        let mut data = vec![0.0; n * cols];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Self::new(n, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape("sub", other)?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape("add", other)?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "hcat",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self::from_raw(self.rows, cols, data))
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c]))
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// `A^T x`, streaming over rows.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "tr_matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
        Ok(out)
    }

    /// `A^T B` for two matrices with the same row count, streaming over rows.
    pub fn tr_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "tr_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (p, q) = (self.cols, other.cols);
        let mut out = vec![0.0; p * q];
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut out[i * q..(i + 1) * q];
                for (o, &bj) in dst.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        Ok(Self::from_raw(p, q, out))
    }

    /// `A^T A`.
    pub fn gram(&self) -> Self {
        self.tr_matmul(self).expect("same row count")
    }

    /// Multiplies every row by the matching entry of `d`, i.e. `diag(d) A`.
    pub fn scale_rows(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_rows",
                left: self.shape(),
                right: (d.len(), 1),
            });
        }
        let mut out = self.clone();
        for (r, &s) in d.iter().enumerate() {
            for v in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// Multiplies every column by the matching entry of `d`, i.e. `A diag(d)`.
    pub fn scale_columns(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_columns",
                left: self.shape(),
                right: (1, d.len()),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, &s) in out.data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(d)
            {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| {
            0.5 * (self.get(r, c) + self.get(c, r))
        })
    }

    /// `||A - A^T||_F / ||A||_F` (zero for the zero matrix).
    pub fn relative_asymmetry(&self) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let d = self.get(r, c) - self.get(c, r);
                acc += d * d;
            }
        }
        acc.sqrt() / norm
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard product `a b` with `i-k-j` loop order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, p) = (a.rows, b.cols);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let dst = &mut out[i * p..(i + 1) * p];
        for k in 0..a.cols {
            let aik = a.get(i, k);
            for (o, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(DenseMatrix::from_raw(n, p, out))
}

fn require_square(op: &'static str, a: &DenseMatrix) -> Result<()> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            op,
            rows: a.rows,
            cols: a.cols,
        });
    }
    Ok(())
}

fn require_symmetric(op: &'static str, a: &DenseMatrix) -> Result<()> {
    require_square(op, a)?;
    let asymmetry = a.relative_asymmetry();
    if asymmetry > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric { op, asymmetry });
    }
    Ok(())
}

/// Outcome of a Cholesky attempt. Indefiniteness is a result, not an error.
#[derive(Debug, Clone, PartialEq)]
pub enum Cholesky {
    Factor(DenseMatrix),
    NotPositiveDefinite { pivot: usize },
}

impl Cholesky {
    pub fn factor(self) -> Option<DenseMatrix> {
        match self {
            Cholesky::Factor(l) => Some(l),
            Cholesky::NotPositiveDefinite { .. } => None,
        }
    }
}

/// Lower-triangular `L` with `L L^T = a`.
pub fn cholesky(a: &DenseMatrix) -> Result<Cholesky> {
    require_symmetric("cholesky", a)?;
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let ljk = l.get(j, k);
            d -= ljk * ljk;
        }
        if !(d > 0.0) {
            return Ok(Cholesky::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(Cholesky::Factor(l))
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal columns; column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix,
}

impl SymEig {
    /// `V diag(f(lambda)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let g: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        DenseMatrix::from_fn(n, n, |r, c| {
            (0..n).map(|k| v.get(r, k) * g[k] * v.get(c, k)).sum()
        })
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_with(|l| l)
    }

    /// `max |lambda| / min |lambda|`; infinite when an eigenvalue is exactly zero.
    pub fn condition_number(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for &l in &self.eigenvalues {
            lo = lo.min(l.abs());
            hi = hi.max(l.abs());
        }
        if self.eigenvalues.is_empty() {
            1.0
        } else if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// Cyclic Jacobi eigensolver with a fixed `(p, q)` sweep order.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEig> {
    require_symmetric("sym_eig", a)?;
    let n = a.rows;
    let mut m = a.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let scale = m.frobenius_norm();

    for _ in 0..MAX_JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| m.get(p, q) * m.get(p, q))
            .sum();
        if off == 0.0 || off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps index order on ties.
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let eigenvalues = order.iter().map(|&i| m.get(i, i)).collect();
    let mut eigenvectors = v.select_columns(&order);
    // Sign convention: the largest-magnitude entry of each eigenvector is positive.
    for c in 0..n {
        let mut best = 0;
        for r in 0..n {
            if eigenvectors.get(r, c).abs() > eigenvectors.get(best, c).abs() {
                best = r;
            }
        }
        if eigenvectors.get(best, c) < 0.0 {
            for r in 0..n {
                let x = eigenvectors.get(r, c);
                eigenvectors.set(r, c, -x);
            }
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Thin QR factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct Qr {
    /// `rows x cols`, orthonormal columns.
    pub q: DenseMatrix,
    /// `cols x cols`, upper triangular with a nonnegative diagonal.
    pub r: DenseMatrix,
}

/// Householder QR of a matrix with `rows >= cols`.
pub fn qr(a: &DenseMatrix) -> Result<Qr> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::DimensionMismatch {
            op: "qr",
            left: (m, n),
            right: (n, n),
        });
    }
    let mut w = a.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for k in 0..n {
        let x: Vec<f64> = (k..m).map(|i| w.get(i, k)).collect();
        let xnorm = norm2(&x);
        if xnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = norm2(&v);
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        for e in &mut v {
            *e /= vnorm;
        }
        apply_reflector(&mut w, &v, k, k);
        reflectors.push(Some(v));
    }

    let mut r = DenseMatrix::from_fn(n, n, |i, j| if j >= i { w.get(i, j) } else { 0.0 });
    let mut q = DenseMatrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        if let Some(v) = &reflectors[k] {
            apply_reflector(&mut q, v, k, 0);
        }
    }
    for i in 0..n {
        if r.get(i, i) < 0.0 {
            for j in 0..n {
                let x = r.get(i, j);
                r.set(i, j, -x);
            }
            for row in 0..m {
                let x = q.get(row, i);
                q.set(row, i, -x);
            }
        }
    }
    Ok(Qr { q, r })
}

/// Applies `I - 2 v v^T` (acting on rows `k..`) to columns `col0..` of `w`.
fn apply_reflector(w: &mut DenseMatrix, v: &[f64], k: usize, col0: usize) {
    let cols = w.cols;
    let mut proj = vec![0.0; cols - col0];
    for (off, &vi) in v.iter().enumerate() {
        let row = &w.data[(k + off) * cols + col0..(k + off + 1) * cols];
        for (p, &x) in proj.iter_mut().zip(row) {
            *p += vi * x;
        }
    }
    for (off, &vi) in v.iter().enumerate() {
        let row = &mut w.data[(k + off) * cols + col0..(k + off + 1) * cols];
        for (x, &p) in row.iter_mut().zip(&proj) {
            *x -= 2.0 * vi * p;
        }
    }
}

/// Rank-`keep` column reduction of `z` through the eigen-decomposition of the
/// Gram matrix `z^T z`.
///
/// Returns `z V_keep`, whose outer product is the best Frobenius rank-`keep`
/// approximation of `z z^T`.
pub fn gram_thin_svd(z: &DenseMatrix, keep: usize) -> Result<DenseMatrix> {
    if keep == 0 || keep > z.cols {
        return Err(LinalgError::InvalidRank {
            op: "gram_thin_svd",
            keep,
            cols: z.cols,
        });
    }
    let eig = sym_eig(&z.gram())?;
    let mut order: Vec<usize> = (0..z.cols).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    order.truncate(keep);
    let v_keep = eig.eigenvectors.select_columns(&order);
    matmul(z, &v_keep)
}
