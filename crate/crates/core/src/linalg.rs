//! Minimal dense linear algebra shared by every numeric module.
//!
//! All storage is row-major `f64`. The single matrix type is [`DataMatrix`],
//! a dense rectangular array with optional per-row class labels; algorithms
//! that need structure (symmetry, positive definiteness) check it at the call
//! boundary rather than encoding it in types.
//!
//! The symmetric eigensolver runs cyclic Jacobi sweeps up to
//! [`JACOBI_MAX_DIM`] and switches to Householder tridiagonalization followed
//! by implicit-shift QL above that; both paths return ascending eigenvalues
//! with orthonormal column eigenvectors and satisfy the same residual bound
//! (`‖Av − λv‖ ≤ 1e-8 · ‖A‖`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Pivot floor below which a Cholesky factorization is declared singular.
pub const SPD_PIVOT_MIN: f64 = 1e-12;
/// Sweep cap for the cyclic Jacobi eigensolver.
pub const MAX_JACOBI_SWEEPS: usize = 100;
/// Largest dimension solved by cyclic Jacobi before [`sym_eig`] dispatches to
/// the tridiagonal QL path.
pub const JACOBI_MAX_DIM: usize = 128;
/// Absolute symmetry tolerance enforced by [`solve_spd`] and [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {rows} x {cols} = {expected} values, got {got}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row} has {got} values, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("value at ({row}, {col}) is not finite")]
    NotFinite { row: usize, col: usize },
    #[error("labels length {got} does not match row count {rows}")]
    LabelMismatch { rows: usize, got: usize },
    #[error("vector length {got} does not match dimension {expected}")]
    VectorLength { expected: usize, got: usize },
    #[error("matrix is not square: {rows} x {cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {delta:.3e}")]
    NotSymmetric { i: usize, j: usize, delta: f64 },
    #[error("matrix is singular after regularization: pivot {pivot:.3e} at row {row} is below the 1e-12 floor")]
    SingularAfterRegularization { row: usize, pivot: f64 },
    #[error("eigensolver failed to converge within {0} sweeps")]
    NoConvergence(usize),
}

/// Dense row-major `f64` matrix with optional per-row class labels.
///
/// Constructors reject non-finite values, so a `DataMatrix` always holds
/// finite entries unless code mutates it through [`DataMatrix::values_mut`]
/// on a hot path (the trainer re-checks loss finiteness instead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl DataMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                rows,
                cols,
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NotFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            labels: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            labels: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::RaggedRow {
                    row: i,
                    expected: cols,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::LabelMismatch {
                rows: self.rows,
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<usize>>) -> Result<()> {
        if let Some(ref l) = labels {
            if l.len() != self.rows {
                return Err(Error::LabelMismatch {
                    rows: self.rows,
                    got: l.len(),
                });
            }
        }
        self.labels = labels;
        Ok(())
    }

    /// Transposed copy. Labels are per-row and do not survive a transpose.
    pub fn transpose(&self) -> DataMatrix {
        let mut out = DataMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// Copy of the selected rows, in the given order, carrying labels along.
    ///
    /// Panics if any index is out of range.
    pub fn select_rows(&self, indices: &[usize]) -> DataMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        DataMatrix {
            rows: indices.len(),
            cols: self.cols,
            values,
            labels,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mutable views of two distinct rows at once.
    pub(crate) fn two_rows_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert!(a < b, "two_rows_mut requires a < b");
        let (lo, hi) = self.values.split_at_mut(b * self.cols);
        (
            &mut lo[a * self.cols..(a + 1) * self.cols],
            &mut hi[..self.cols],
        )
    }
}

/// Dot product with four-way accumulation; deterministic but not
/// bit-identical to a naive left-to-right sum.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let ra = a.chunks_exact(4).remainder();
    let rb = b.chunks_exact(4).remainder();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn nrm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const PAR_FLOP_THRESHOLD: usize = 1 << 22;

/// `A · Bᵀ` for `A (m×k)` and `B (n×k)`: every output entry is a dot product
/// of two contiguous rows. This is the layout used for `X · Wᵀ` forward
/// passes.
pub fn matmul_nt(a: &DataMatrix, b: &DataMatrix) -> DataMatrix {
    assert_eq!(a.cols, b.cols, "matmul_nt: inner dimensions differ");
    let (m, n, k) = (a.rows, b.rows, a.cols);
    let mut out = DataMatrix::zeros(m, n);
    let body = |(i, out_row): (usize, &mut [f64])| {
        let ar = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.values.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.values.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// `A · B` for `A (m×k)` and `B (k×n)`, accumulated row-wise.
pub fn matmul_nn(a: &DataMatrix, b: &DataMatrix) -> DataMatrix {
    assert_eq!(a.cols, b.rows, "matmul_nn: inner dimensions differ");
    let (m, n, k) = (a.rows, b.cols, a.cols);
    let mut out = DataMatrix::zeros(m, n);
    let body = |(i, out_row): (usize, &mut [f64])| {
        for l in 0..k {
            axpy(a.get(i, l), b.row(l), out_row);
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.values.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.values.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// `Aᵀ · B` for `A (k×m)` and `B (k×n)`. This is the layout used for
/// gradient accumulations `δᵀ · X`.
pub fn matmul_tn(a: &DataMatrix, b: &DataMatrix) -> DataMatrix {
    assert_eq!(a.rows, b.rows, "matmul_tn: inner dimensions differ");
    let (m, n, k) = (a.cols, b.cols, a.rows);
    let mut out = DataMatrix::zeros(m, n);
    let body = |(i, out_row): (usize, &mut [f64])| {
        for l in 0..k {
            axpy(a.get(l, i), b.row(l), out_row);
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.values.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.values.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// Matrix of squared Euclidean distances between all row pairs of `x`.
///
/// Each entry is the plain left-to-right sum `Σ_k (x_ik − x_jk)²`, so the
/// result is bit-identical to a scalar double loop; the matrix is exactly
/// symmetric with an exactly zero diagonal because every pair is computed
/// once and mirrored.
pub fn pairwise_sq_dist(x: &DataMatrix) -> DataMatrix {
    let n = x.rows;
    let mut out = DataMatrix::zeros(n, n);
    let fill_row = |(i, row): (usize, &mut [f64])| {
        let xi = x.row(i);
        for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
            let xj = x.row(j);
            let mut s = 0.0;
            for k in 0..x.cols {
                let d = xi[k] - xj[k];
                s += d * d;
            }
            *slot = s;
        }
    };
    if n * x.cols >= 1 << 14 {
        out.values.par_chunks_mut(n).enumerate().for_each(fill_row);
    } else {
        out.values.chunks_mut(n).enumerate().for_each(fill_row);
    }
    for i in 0..n {
        for j in 0..i {
            out.values[i * n + j] = out.values[j * n + i];
        }
    }
    out
}

fn check_square_symmetric(a: &DataMatrix) -> Result<usize> {
    if a.rows != a.cols {
        return Err(Error::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (a.values[i * n + j] - a.values[j * n + i]).abs();
            if delta > SYMMETRY_TOL {
                return Err(Error::NotSymmetric { i, j, delta });
            }
        }
    }
    Ok(n)
}

/// Solve `A x = b` for symmetric positive-definite `A` by Cholesky
/// factorization. The caller supplies any ridge; no regularization happens
/// here, and a pivot at or below `1e-12` is reported as
/// [`Error::SingularAfterRegularization`].
pub fn solve_spd(a: &DataMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = check_square_symmetric(a)?;
    if b.len() != n {
        return Err(Error::VectorLength {
            expected: n,
            got: b.len(),
        });
    }
    let l = cholesky(a)?;
    // Forward: L y = b
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    // Backward: Lᵀ x = y
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

fn cholesky(a: &DataMatrix) -> Result<Vec<f64>> {
    let n = a.rows;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.values[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= SPD_PIVOT_MIN {
            return Err(Error::SingularAfterRegularization { row: j, pivot: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a.values[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, matching `eigenvalues` by index.
    pub eigenvectors: DataMatrix,
}

/// Full eigendecomposition of a symmetric matrix (checked to `1e-10`).
///
/// Dimensions up to [`JACOBI_MAX_DIM`] use cyclic Jacobi sweeps (capped at
/// [`MAX_JACOBI_SWEEPS`]); larger problems use Householder reduction plus
/// implicit-shift QL, which has the same contract. Output order is fully
/// deterministic: eigenvalues ascending, ties kept in sweep order.
pub fn sym_eig(a: &DataMatrix) -> Result<SymEigResult> {
    let n = check_square_symmetric(a)?;
    if n == 0 {
        return Ok(SymEigResult {
            eigenvalues: vec![],
            eigenvectors: DataMatrix::zeros(0, 0),
        });
    }
    let (values, vectors_t) = if n <= JACOBI_MAX_DIM {
        jacobi_eig(a)?
    } else {
        householder_ql(a)?
    };
    // Sort ascending; eigenvectors live in rows of vectors_t until here.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| values[p].total_cmp(&values[q]).then(p.cmp(&q)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut eigenvectors = DataMatrix::zeros(n, n);
    for (new_col, &old_row) in order.iter().enumerate() {
        let src = vectors_t.row(old_row);
        for r in 0..n {
            eigenvectors.values[r * n + new_col] = src[r];
        }
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Cyclic Jacobi; returns unsorted eigenvalues and eigenvectors as **rows**.
fn jacobi_eig(a: &DataMatrix) -> Result<(Vec<f64>, DataMatrix)> {
    let n = a.rows;
    let mut m = a.values.clone();
    let mut vt = DataMatrix::identity(n);
    let frob: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-12 * (1.0 + frob);

    for _sweep in 0..=MAX_JACOBI_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            let values = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((values, vt));
        }
        if _sweep == MAX_JACOBI_SWEEPS {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = m[i * n + p];
                    let aiq = m[i * n + q];
                    let new_p = c * aip - s * aiq;
                    let new_q = s * aip + c * aiq;
                    m[i * n + p] = new_p;
                    m[p * n + i] = new_p;
                    m[i * n + q] = new_q;
                    m[q * n + i] = new_q;
                }
                // Accumulate V·J; vt stores Vᵀ, so columns become rows.
                let (vp, vq) = vt.two_rows_mut(p, q);
                for k in 0..n {
                    let o_p = vp[k];
                    let o_q = vq[k];
                    vp[k] = c * o_p - s * o_q;
                    vq[k] = s * o_p + c * o_q;
                }
            }
        }
    }
    Err(Error::NoConvergence(MAX_JACOBI_SWEEPS))
}

/// Householder tridiagonalization plus implicit-shift QL; returns unsorted
/// eigenvalues and eigenvectors as **rows**. Used above [`JACOBI_MAX_DIM`].
fn householder_ql(a: &DataMatrix) -> Result<(Vec<f64>, DataMatrix)> {
    let n = a.rows;
    let mut w = a.values.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut hs = vec![0.0; n];

    // Reduction: step i eliminates row/column i against the leading block.
    for i in (1..n).rev() {
        let scale: f64 = w[i * n..i * n + i].iter().map(|v| v.abs()).sum();
        if i == 1 || scale == 0.0 {
            e[i] = w[i * n + i - 1];
            hs[i] = 0.0;
            continue;
        }
        let mut h = 0.0;
        for k in 0..i {
            w[i * n + k] /= scale;
            h += w[i * n + k] * w[i * n + k];
        }
        let f = w[i * n + i - 1];
        let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
        e[i] = scale * g;
        h -= f * g;
        w[i * n + i - 1] = f - g;
        // p = A·u / h over the leading block (full symmetric storage, so the
        // inner products run over contiguous rows).
        let mut p = vec![0.0; i];
        for j in 0..i {
            let mut s = 0.0;
            let rowj = &w[j * n..j * n + i];
            let u = &w[i * n..i * n + i];
            for k in 0..i {
                s += rowj[k] * u[k];
            }
            p[j] = s / h;
        }
        let kcoef = {
            let mut s = 0.0;
            for j in 0..i {
                s += p[j] * w[i * n + j];
            }
            s / (2.0 * h)
        };
        for j in 0..i {
            p[j] -= kcoef * w[i * n + j];
        }
        // Symmetric rank-2 update A ← A − u qᵀ − q uᵀ on the leading block.
        for j in 0..i {
            let uj = w[i * n + j];
            let qj = p[j];
            let (qs, us) = (&p[..i], i * n);
            for k in 0..i {
                w[j * n + k] -= uj * qs[k] + qj * w[us + k];
            }
        }
        hs[i] = h;
    }
    for i in 0..n {
        d[i] = w[i * n + i];
    }

    // Accumulate the orthogonal factor; zt rows are transform columns.
    let mut zt = DataMatrix::identity(n);
    for i in 1..n {
        if hs[i] == 0.0 {
            continue;
        }
        let h = hs[i];
        for j in 0..i {
            let mut g = 0.0;
            {
                let u = &w[i * n..i * n + i];
                let zrow = &zt.values[j * n..j * n + i];
                for k in 0..i {
                    g += u[k] * zrow[k];
                }
            }
            let coef = g / h;
            let u_start = i * n;
            for k in 0..i {
                zt.values[j * n + k] -= coef * w[u_start + k];
            }
        }
    }

    // Shift couplings so e[i] links (i, i+1), then implicit-shift QL.
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m_idx = l;
            while m_idx + 1 < n {
                let dd = d[m_idx].abs() + d[m_idx + 1].abs();
                if e[m_idx].abs() <= f64::EPSILON * dd {
                    break;
                }
                m_idx += 1;
            }
            if m_idx == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(Error::NoConvergence(50));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m_idx] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m_idx).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m_idx] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let (zi, zi1) = zt.two_rows_mut(i, i + 1);
                for k in 0..n {
                    f = zi1[k];
                    zi1[k] = s * zi[k] + c * f;
                    zi[k] = c * zi[k] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m_idx] = 0.0;
        }
    }
    Ok((d, zt))
}
