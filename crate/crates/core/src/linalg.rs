//! Dense row-major matrices and a thin SVD.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration run on the taller
//! orientation of the input. It is slower than bidiagonalization-based
//! routines but is simple, accurate to high relative precision and fully
//! deterministic, which matters because mask bits are tied to component
//! indices and signs.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Maximum number of Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 30;
/// Convergence threshold on the normalized off-diagonal Gram coupling.
pub const SVD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix of shape {rows}x{cols} needs {expected} entries, got {actual}")]
    InvalidLength {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("component index {index} out of range for rank {rank}")]
    IndexOutOfRange { index: usize, rank: usize },
}

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 36 {
            f.debug_list().entries(self.data.chunks(self.cols)).finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidLength {
                rows,
                cols,
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols,
                col: pos % cols,
                value: data[pos],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<(), LinalgError> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| alpha * v).collect(),
            ..*self
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<(), LinalgError> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), LinalgError> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> Result<f64, LinalgError> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn relative_error(&self, reference: &Matrix) -> Result<f64, LinalgError> {
        let diff = self.sub(reference)?.frobenius_norm();
        let denom = reference.frobenius_norm();
        Ok(if denom > 0.0 { diff / denom } else { diff })
    }

    /// Standard product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    /// Horizontal concatenation `[a | b | ...]`.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix, LinalgError> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let mut cols = 0;
        for p in parts {
            if p.rows != rows {
                return Err(LinalgError::DimensionMismatch {
                    op: "hconcat",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            cols += p.cols;
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.data[i * cols + offset..i * cols + offset + p.cols].copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `a = u · diag(s) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// k non-negative values, non-increasing.
    pub s: Vec<f64>,
    /// n×k, orthonormal columns.
    pub v: Matrix,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn rows(&self) -> usize {
        self.u.rows()
    }

    pub fn cols(&self) -> usize {
        self.v.rows()
    }
}

/// Thin SVD by one-sided Jacobi.
///
/// Sign convention: the largest-magnitude entry of every left singular vector
/// is positive (first such entry on ties).
pub fn svd_thin(a: &Matrix) -> Result<ThinSvd, LinalgError> {
    if !a.is_finite() {
        let pos = a.data.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(LinalgError::NonFinite {
            row: pos / a.cols,
            col: pos % a.cols,
            value: a.data[pos],
        });
    }
    if a.rows == 0 || a.cols == 0 {
        return Err(LinalgError::EmptyShape {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let mut svd = if a.rows >= a.cols {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        ThinSvd {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut svd);
    Ok(svd)
}

/// One-sided Jacobi on a matrix with rows >= cols.
fn jacobi_tall(a: &Matrix) -> Result<ThinSvd, LinalgError> {
    let (m, n) = a.shape();
    // Work column-major: each working column is contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let coupling = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(coupling);
                if coupling < SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = residual < SVD_TOLERANCE;
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps, residual });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps tie order deterministic.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let nrm = norms[j];
            (nrm > 0.0).then(|| cols[j].iter().map(|x| x / nrm).collect())
        })
        .collect();
    complete_orthonormal(&mut ucols, m);

    let u = Matrix::from_fn(m, n, |i, r| ucols[r].as_ref().unwrap()[i]);
    let v = Matrix::from_fn(n, n, |i, r| vcols[order[r]][i]);
    Ok(ThinSvd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
/// Each slot takes the standard basis vector with the largest residual after
/// projecting out the existing columns (lowest index on ties).
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], m: usize) {
    let project_out = |cand: &mut Vec<f64>, cols: &[Option<Vec<f64>>]| {
        // Two passes of Gram-Schmidt.
        for _ in 0..2 {
            for other in cols.iter().flatten() {
                let proj = dot(cand, other);
                for (c, o) in cand.iter_mut().zip(other) {
                    *c -= proj * o;
                }
            }
        }
    };
    for r in 0..cols.len() {
        if cols[r].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for basis in 0..m {
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            project_out(&mut cand, cols);
            let nrm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, cand) = best.expect("m > 0");
        assert!(nrm > 1e-6, "cannot complete orthonormal basis");
        let mut unit: Vec<f64> = cand.into_iter().map(|x| x / nrm).collect();
        project_out(&mut unit, cols);
        let nrm = dot(&unit, &unit).sqrt();
        cols[r] = Some(unit.into_iter().map(|x| x / nrm).collect());
    }
}

fn fix_signs(svd: &mut ThinSvd) {
    let (m, k) = svd.u.shape();
    let n = svd.v.rows();
    for r in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m {
            let a = svd.u.get(i, r).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if svd.u.get(best, r) < 0.0 {
            for i in 0..m {
                let x = svd.u.get(i, r);
                svd.u.set(i, r, -x);
            }
            for i in 0..n {
                let x = svd.v.get(i, r);
                svd.v.set(i, r, -x);
            }
        }
    }
}

/// `Σ_{r ∈ selected} s[r]·u[:,r]·v[:,r]ᵀ`, summed in ascending index order.
pub fn reconstruct_components(svd: &ThinSvd, selected: &[usize]) -> Result<Matrix, LinalgError> {
    let k = svd.rank();
    let mut set = BTreeSet::new();
    for &r in selected {
        if r >= k {
            return Err(LinalgError::IndexOutOfRange { index: r, rank: k });
        }
        set.insert(r);
    }
    let weights: Vec<f64> = (0..k)
        .map(|r| if set.contains(&r) { svd.s[r] } else { 0.0 })
        .collect();
    Ok(weighted_outer_sum(&svd.u, &weights, &svd.v, &set.into_iter().collect::<Vec<_>>()))
}

/// `Σ_{r ∈ active} w[r]·u[:,r]·v[:,r]ᵀ` with `active` ascending.
pub(crate) fn weighted_outer_sum(u: &Matrix, w: &[f64], v: &Matrix, active: &[usize]) -> Matrix {
    let (m, n) = (u.rows(), v.rows());
    let mut out = Matrix::zeros(m, n);
    if active.is_empty() {
        return out;
    }
    // Gather scaled left factors and right factors for active components.
    let uw: Vec<Vec<f64>> = (0..m)
        .map(|i| active.iter().map(|&r| w[r] * u.get(i, r)).collect())
        .collect();
    let vr: Vec<Vec<f64>> = (0..n)
        .map(|j| active.iter().map(|&r| v.get(j, r)).collect())
        .collect();
    for i in 0..m {
        let row = &uw[i];
        for j in 0..n {
            out.data[i * n + j] = dot(row, &vr[j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().max_abs()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(LinalgError::InvalidLength { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { row: 0, col: 1, .. })
        ));
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_selection() {
        let i2 = Matrix::identity(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        assert_eq!(
            a.matmul(&b).unwrap(),
            Matrix::from_rows(&[vec![2.0], vec![4.0]])
        );
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            LinalgError::DimensionMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn transposed_products_agree() {
        let a = Matrix::from_fn(4, 3, |i, j| (i as f64) - 0.5 * j as f64);
        let b = Matrix::from_fn(4, 5, |i, j| (i * j) as f64 * 0.25 + 1.0);
        let c = Matrix::from_fn(5, 3, |i, j| (i + 2 * j) as f64 - 3.0);
        assert!(max_abs_diff(&a.t_matmul(&b).unwrap(), &a.transpose().matmul(&b).unwrap()) < 1e-12);
        assert!(max_abs_diff(&a.matmul_t(&c).unwrap(), &a.matmul(&c.transpose()).unwrap()) < 1e-12);
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let svd = svd_thin(&Matrix::identity(2)).unwrap();
        assert_eq!(svd.s, vec![1.0, 1.0]);

        let svd = svd_thin(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(svd.s, vec![3.0, 1.0]);
        for m in [&svd.u, &svd.v] {
            for r in 0..2 {
                let nonzero: Vec<f64> = m.column(r).into_iter().filter(|x| *x != 0.0).collect();
                assert_eq!(nonzero.len(), 1);
                assert_eq!(nonzero[0].abs(), 1.0);
            }
        }
        // Sign convention makes u exactly I here.
        assert_eq!(svd.u, Matrix::identity(2));

        // Ascending diagonal gets reordered.
        let svd = svd_thin(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(svd.s, vec![3.0, 1.0]);
        assert_eq!(svd.u.get(1, 0), 1.0);
    }

    #[test]
    fn svd_zero_matrix_uses_identity_columns() {
        let svd = svd_thin(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(svd.s, vec![0.0; 3]);
        assert_eq!(svd.u, Matrix::identity(4).column_block(0, 3));
        assert_eq!(svd.v, Matrix::identity(3));

        let svd = svd_thin(&Matrix::zeros(2, 5)).unwrap();
        assert_eq!(svd.u, Matrix::identity(2));
        assert_eq!(svd.v, Matrix::identity(5).column_block(0, 2));
    }

    #[test]
    fn svd_rank_deficient_completes_basis() {
        // Rank one: outer product of (1,2,2)/3 and (0,1).
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 2.0]]);
        let svd = svd_thin(&a).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-14);
        assert_eq!(svd.s[1], 0.0);
        let gram = svd.u.t_matmul(&svd.u).unwrap();
        assert!(max_abs_diff(&gram, &Matrix::identity(2)) < 1e-12);
        let rec = reconstruct_components(&svd, &[0, 1]).unwrap();
        assert!(max_abs_diff(&rec, &a) < 1e-14);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = Matrix::identity(2);
        a.data_mut()[1] = f64::INFINITY;
        assert!(matches!(svd_thin(&a), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn reconstruct_selection_cases() {
        let a = Matrix::from_diag(&[3.0, 1.0]);
        let svd = svd_thin(&a).unwrap();
        assert_eq!(reconstruct_components(&svd, &[]).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(
            reconstruct_components(&svd, &[0]).unwrap(),
            Matrix::from_diag(&[3.0, 0.0])
        );
        assert!(reconstruct_components(&svd, &[0, 1]).unwrap().relative_error(&a).unwrap() < 1e-8);
        assert_eq!(
            reconstruct_components(&svd, &[2]).unwrap_err(),
            LinalgError::IndexOutOfRange { index: 2, rank: 2 }
        );
    }

    #[test]
    fn hconcat_and_blocks() {
        let a = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let c = Matrix::hconcat(&[&a, &b]).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![1.0, 3.0, 4.0], vec![2.0, 5.0, 6.0]]));
        assert_eq!(c.column_block(1, 3), b);
        assert!(Matrix::hconcat(&[&a, &Matrix::zeros(3, 1)]).is_err());
    }
}
