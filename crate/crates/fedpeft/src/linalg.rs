//! Dense matrix arithmetic and a deterministic truncated SVD.
//!
//! Everything downstream (model training, update priming, cost accounting)
//! runs on [`Matrix`], a row-major `f64` buffer. The SVD is a one-sided
//! Jacobi with a fixed cyclic sweep order and an explicit sign convention,
//! so identical inputs give bit-identical factors on every run and thread
//! count. At the matrix sizes this crate deals with (layers of a small
//! classifier), Jacobi is plenty fast and has excellent relative accuracy.

use crate::error::{Error, Result};
use std::cell::Cell;

/// Relative off-diagonal threshold below which a column pair counts as
/// orthogonal: |u_i . u_j| <= TOL * |u_i| * |u_j|.
const JACOBI_TOL: f64 = 1e-12;
/// Hard cap on full sweeps over all column pairs.
const MAX_SWEEPS: usize = 60;

thread_local! {
    static FLOP_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Reset this thread's matmul FLOP counter to zero.
pub fn reset_flop_counter() {
    FLOP_COUNTER.with(|c| c.set(0));
}

/// Total FLOPs spent in [`Matrix::matmul`] on this thread since the last
/// reset, counting one multiply-add as two FLOPs. Vector ops, bias adds and
/// activations are not counted; the analytic cost model uses the same
/// convention.
pub fn flop_count() -> u64 {
    FLOP_COUNTER.with(|c| c.get())
}

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a row-major buffer; rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "buffer of {} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry in {rows}x{cols} matrix"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Construct without the finite check; used by the checkpoint reader,
    /// which must round-trip stored bits exactly.
    pub(crate) fn from_bits(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged row list".to_string()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Standard matrix product.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        // ikj order: stream over rhs rows, accumulate into the output row.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        FLOP_COUNTER.with(|c| {
            c.set(
                c.get()
                    .wrapping_add(2 * (self.rows * self.cols * rhs.cols) as u64),
            )
        });
        if !out.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("matrix product overflowed".to_string()));
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if !self.same_shape(rhs) {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Full SVD `m = U . diag(sigma) . V^T` with square orthonormal `U` (m x m)
/// and `V` (n x n); `sigma` holds the min(m, n) singular values in
/// descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

/// Deterministic SVD by one-sided Jacobi.
///
/// Column pairs are swept in a fixed cyclic order until every pair meets the
/// relative orthogonality threshold (or the sweep cap is hit), singular
/// values are sorted descending with ties broken by original column index,
/// and each singular vector pair is flipped so the largest-magnitude entry
/// of the left vector is nonnegative. Identical inputs therefore produce
/// byte-identical results.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::shape("svd of empty matrix".to_string()));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".to_string()));
    }
    let mut result = if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose());
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    apply_sign_convention(&mut result);
    Ok(result)
}

/// Core Jacobi on a matrix with rows >= cols. No sign convention here; the
/// caller applies it after the possible transpose swap.
fn svd_tall(m: &Matrix) -> SvdResult {
    let (rows, cols) = (m.rows, m.cols);
    // Column-major working copies: rotations touch whole columns.
    let mut work: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.get(i, j)).collect())
        .collect();
    let mut v_cols: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut converged = true;
        for i in 0..cols.saturating_sub(1) {
            for j in i + 1..cols {
                let a = dot(&work[i], &work[i]);
                let b = dot(&work[j], &work[j]);
                let d = dot(&work[i], &work[j]);
                if a == 0.0 || b == 0.0 || d * d <= JACOBI_TOL * JACOBI_TOL * a * b {
                    continue;
                }
                converged = false;
                // Jacobi rotation zeroing the off-diagonal of [[a, d], [d, b]].
                let zeta = (b - a) / (2.0 * d);
                let t = if zeta > 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, i, j, c, s);
                rotate(&mut v_cols, i, j, c, s);
            }
        }
        if converged {
            break;
        }
    }

    // Singular values with a deterministic descending order.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = work.iter().map(|w| dot(w, w).sqrt()).collect();
    order.sort_by(|&x, &y| {
        norms[y]
            .partial_cmp(&norms[x])
            .unwrap()
            .then_with(|| x.cmp(&y))
    });

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u = Matrix::zeros(rows, rows);
    let mut v = Matrix::zeros(cols, cols);
    let mut filled = vec![false; rows];
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..cols {
            v.set(i, slot, v_cols[j][i]);
        }
        if norms[j] > 0.0 {
            for i in 0..rows {
                u.set(i, slot, work[j][i] / norms[j]);
            }
            filled[slot] = true;
        }
    }
    complete_orthonormal_columns(&mut u, &filled);
    SvdResult { u, sigma, v }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fill unfilled columns with an orthonormal completion. Per slot, the
/// standard basis vector with the largest residual against the current set
/// is Gram-Schmidted in (first index wins ties), which is deterministic and
/// always succeeds: with `b` basis vectors in dimension `n`, the residual
/// norms square-sum to `n - b >= 1`.
fn complete_orthonormal_columns(u: &mut Matrix, filled: &[bool]) {
    let n = u.rows();
    let mut basis: Vec<Vec<f64>> = (0..u.cols())
        .filter(|&j| filled.get(j) == Some(&true))
        .map(|j| (0..n).map(|i| u.get(i, j)).collect())
        .collect();
    let orthogonalize = |vec: &mut Vec<f64>, basis: &[Vec<f64>]| {
        // Two passes for numerical cleanliness.
        for _ in 0..2 {
            for b in basis {
                let p = dot(vec, b);
                for (x, y) in vec.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
    };
    for slot in 0..u.cols() {
        if filled.get(slot) == Some(&true) {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..n {
            let mut vec: Vec<f64> = (0..n)
                .map(|i| if i == candidate { 1.0 } else { 0.0 })
                .collect();
            orthogonalize(&mut vec, &basis);
            let norm_sq = dot(&vec, &vec);
            if best.as_ref().map_or(true, |(b, _)| norm_sq > *b) {
                best = Some((norm_sq, vec));
            }
        }
        let (norm_sq, mut vec) = best.expect("at least one candidate");
        assert!(norm_sq > 0.0, "no independent basis candidate left");
        let norm = norm_sq.sqrt();
        for x in vec.iter_mut() {
            *x /= norm;
        }
        for (i, &x) in vec.iter().enumerate() {
            u.set(i, slot, x);
        }
        basis.push(vec);
    }
}

/// Flip singular vector pairs so the largest-magnitude entry of each left
/// singular vector is nonnegative (first occurrence wins on magnitude ties).
/// Surplus columns of the larger factor carry no singular value, so they are
/// flipped independently by the same rule.
fn apply_sign_convention(r: &mut SvdResult) {
    let paired = r.sigma.len();
    for j in 0..r.u.cols() {
        if column_wants_flip(&r.u, j) {
            negate_column(&mut r.u, j);
            if j < paired {
                negate_column(&mut r.v, j);
            }
        }
    }
    for j in paired..r.v.cols() {
        if column_wants_flip(&r.v, j) {
            negate_column(&mut r.v, j);
        }
    }
}

fn column_wants_flip(m: &Matrix, j: usize) -> bool {
    let mut best = 0.0f64;
    let mut best_val = 0.0f64;
    for i in 0..m.rows() {
        let v = m.get(i, j);
        if v.abs() > best {
            best = v.abs();
            best_val = v;
        }
    }
    best_val < 0.0
}

fn negate_column(m: &mut Matrix, j: usize) {
    for i in 0..m.rows() {
        let v = m.get(i, j);
        m.set(i, j, -v);
    }
}

/// Rank-r factors of the best Frobenius approximation: `B = U_r . diag(s_r)`
/// (d x r) and `A = V_r^T` (r x k), so `B . A` is the optimal rank-r
/// reconstruction of `m`.
pub fn truncated_factors(m: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let max = m.rows().min(m.cols());
    if r < 1 || r > max {
        return Err(Error::rank(r, max));
    }
    let s = svd(m)?;
    let b = Matrix::from_fn(m.rows(), r, |i, j| s.u.get(i, j) * s.sigma[j]);
    let a = Matrix::from_fn(r, m.cols(), |i, j| s.v.get(j, i));
    Ok((b, a))
}
