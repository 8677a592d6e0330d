//! Dense row-major matrices and the handful of numerics the calibration
//! pipeline needs.
//!
//! Every reduction runs in a fixed order (row-major, left to right) so that
//! results are bitwise reproducible across runs and thread counts.

use crate::error::{Error, Result};

/// Off-diagonal threshold for the one-sided Jacobi sweeps: a column pair is
/// considered orthogonal once `|<w_p, w_q>| <= JACOBI_TOL * |w_p| |w_q|`.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// Panics if the rows are ragged; intended for literals in tests and
    /// fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    /// Repeats `row` `n` times.
    pub fn broadcast_row(row: &[f64], n: usize) -> Self {
        let mut data = Vec::with_capacity(row.len() * n);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Self {
            rows: n,
            cols: row.len(),
            data,
        }
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

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite)
        }
    }

    fn ensure_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
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

    /// `self · other`, accumulating each output row left to right over the
    /// shared dimension.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Frobenius inner product `<self, other> = sum_ij self_ij * other_ij`.
    pub fn inner_product(&self, other: &Matrix) -> Result<f64> {
        self.ensure_same_shape(other, "inner_product")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Per-column arithmetic mean over rows.
    pub fn row_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        for m in &mut mean {
            *m /= n;
        }
        mean
    }

    /// Subtracts `v` from every row.
    pub fn sub_row_vector(&self, v: &[f64]) -> Matrix {
        debug_assert_eq!(v.len(), self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, c) in out.row_mut(i).iter_mut().zip(v) {
                *o -= c;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.ensure_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.ensure_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn transpose(m: &Matrix) -> Matrix {
    m.transpose()
}

pub fn inner_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.inner_product(b)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

pub fn row_mean(m: &Matrix) -> Vec<f64> {
    m.row_mean()
}

/// Thin singular value decomposition `m = u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows × k` with orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative, length `k = min(rows, cols)`.
    pub sigma: Vec<f64>,
    /// `cols × k` with orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul(&self.v.transpose())
            .expect("svd factors have compatible shapes")
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Column pairs are swept in the fixed cyclic order `(0,1), (0,2), …,
/// (n-2,n-1)` until every pair satisfies the [`JACOBI_TOL`] orthogonality
/// threshold. Singular values are the resulting column norms; columns are
/// sorted by descending singular value (ties keep their original order).
/// Left vectors for numerically zero singular values are completed from the
/// standard basis by Gram–Schmidt. Each left singular vector is oriented so
/// that its largest-magnitude entry (first one on ties) is non-negative, and
/// the matching right vector is flipped with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    m.ensure_finite()?;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::ShapeMismatch {
            op: "svd",
            left: m.shape(),
            right: (1, 1),
        });
    }
    let mut res = if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose());
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    orient_signs(&mut res);
    Ok(res)
}

fn svd_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let sigma_max = norms[order[0]];
    let rank_tol = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        for i in 0..n {
            v_sorted.set(i, k, v.get(i, j));
        }
        if s > rank_tol && s > 0.0 {
            for i in 0..m {
                u.set(i, k, w.get(i, j) / s);
            }
        } else {
            deficient.push(k);
        }
    }
    complete_basis(&mut u, &deficient);

    SvdResult {
        u,
        sigma,
        v: v_sorted,
    }
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.rows() {
        let xp = m.get(i, p);
        let xq = m.get(i, q);
        m.set(i, p, c * xp - s * xq);
        m.set(i, q, s * xp + c * xq);
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column. Each one is the standard basis vector with the largest
/// component outside the current span (lowest index on ties), orthogonalized
/// by two passes of classical Gram-Schmidt.
fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, k) = u.shape();
    let mut filled: Vec<usize> = (0..k).filter(|c| !missing.contains(c)).collect();
    let mut used = vec![false; m];
    for &col in missing {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for candidate in (0..m).filter(|&c| !used[c]) {
            let mut vec = vec![0.0; m];
            vec[candidate] = 1.0;
            for _ in 0..2 {
                for &f in &filled {
                    let dot: f64 = (0..m).map(|i| u.get(i, f) * vec[i]).sum();
                    for (i, x) in vec.iter_mut().enumerate() {
                        *x -= dot * u.get(i, f);
                    }
                }
            }
            let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|b| norm > b.2) {
                best = Some((candidate, vec, norm));
            }
        }
        let (candidate, vec, norm) = best.expect("fewer missing columns than rows");
        used[candidate] = true;
        for (i, x) in vec.iter().enumerate() {
            u.set(i, col, x / norm);
        }
        filled.push(col);
    }
}

fn orient_signs(res: &mut SvdResult) {
    let k = res.sigma.len();
    for j in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..res.u.rows() {
            let a = res.u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if res.u.get(best, j) < 0.0 {
            for i in 0..res.u.rows() {
                res.u.set(i, j, -res.u.get(i, j));
            }
            for i in 0..res.v.rows() {
                res.v.set(i, j, -res.v.get(i, j));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    fn orthonormality_err(q: &Matrix) -> f64 {
        let qtq = q.transpose().matmul(q).unwrap();
        qtq.sub(&Matrix::identity(q.cols())).unwrap().frobenius_norm()
    }

    fn check_svd(m: &Matrix) {
        let r = svd(m).unwrap();
        let k = m.rows().min(m.cols());
        assert_eq!(r.u.shape(), (m.rows(), k));
        assert_eq!(r.v.shape(), (m.cols(), k));
        assert!(orthonormality_err(&r.u) < 1e-10, "u not orthonormal");
        assert!(orthonormality_err(&r.v) < 1e-10, "v not orthonormal");
        assert!(r.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.sigma.iter().all(|&s| s >= 0.0));
        let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
        let err = r.reconstruct().sub(m).unwrap().frobenius_norm() / scale;
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn svd_identity() {
        let r = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(r.sigma, vec![1.0, 1.0]);
        let uv = r.u.matmul(&r.v.transpose()).unwrap();
        assert!(orthonormality_err(&uv) < 1e-15);
    }

    #[test]
    fn svd_diagonal() {
        let m = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]);
        assert_eq!(svd(&m).unwrap().sigma, vec![3.0, 1.0]);
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, -3.0]]);
        let r = svd(&m).unwrap();
        assert_eq!(r.sigma, vec![3.0, 1.0]);
        check_svd(&m);
    }

    #[test]
    fn svd_random_4x3_reconstructs() {
        let mut rng = SeededRng::new(7);
        let m = random(&mut rng, 4, 3);
        check_svd(&m);
    }

    #[test]
    fn svd_wide_and_rank_deficient() {
        let mut rng = SeededRng::new(11);
        check_svd(&random(&mut rng, 3, 5));
        // rank one
        let col = random(&mut rng, 4, 1);
        let row = random(&mut rng, 1, 4);
        check_svd(&col.matmul(&row).unwrap());
        check_svd(&Matrix::zeros(3, 3));
        check_svd(&Matrix::from_rows(&[[0.0, 2.0, 0.0]]));
    }

    #[test]
    fn svd_completes_a_spread_null_direction() {
        // centering projector: null space along the all-ones vector, which is
        // far from every standard basis vector
        let n = 32;
        let mut m = Matrix::identity(n);
        for v in m.data_mut() {
            *v -= 1.0 / n as f64;
        }
        check_svd(&m);
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = SeededRng::new(3);
        let r = svd(&random(&mut rng, 5, 4)).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..5).map(|i| r.u.get(i, j)).collect();
            let max = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(max >= 0.0);
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = Matrix::from_rows(&[[1.0, f64::NAN]]);
        assert_eq!(svd(&m).unwrap_err().to_string(), "non-finite matrix");
    }

    #[test]
    fn svd_is_deterministic() {
        let mut rng = SeededRng::new(5);
        let m = random(&mut rng, 6, 6);
        assert_eq!(svd(&m).unwrap(), svd(&m).unwrap());
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Matrix::zeros(3, 2).frobenius_norm(), 0.0);
        assert_eq!(Matrix::from_rows(&[[3.0, 4.0]]).frobenius_norm(), 5.0);
        let mut rng = SeededRng::new(1);
        let m = random(&mut rng, 3, 3);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += m.get(i, j) * m.get(i, j);
            }
        }
        assert_eq!(m.frobenius_norm(), acc.sqrt());
    }

    #[test]
    fn row_mean_cases() {
        assert_eq!(Matrix::from_rows(&[[1.5, -2.0]]).row_mean(), vec![1.5, -2.0]);
        assert_eq!(Matrix::from_rows(&[[1.0, 1.0], [3.0, 3.0]]).row_mean(), vec![2.0, 2.0]);
        let mut rng = SeededRng::new(2);
        let m = random(&mut rng, 5, 4);
        let mean = m.row_mean();
        for j in 0..4 {
            let col: Vec<f64> = (0..5).map(|i| m.get(i, j)).collect();
            let oracle = col.iter().sum::<f64>() / 5.0;
            assert!((mean[j] - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_cases() {
        let mut rng = SeededRng::new(9);
        let m = random(&mut rng, 3, 4);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        let ip = m.inner_product(&m).unwrap();
        assert!((ip - m.frobenius_norm().powi(2)).abs() < 1e-12);

        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        // 1*7+2*9+3*11 = 58, 1*8+2*10+3*12 = 64, 4*7+5*9+6*11 = 139, 4*8+5*10+6*12 = 154
        assert_eq!(
            a.matmul(&b).unwrap(),
            Matrix::from_rows(&[[58.0, 64.0], [139.0, 154.0]])
        );
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
        assert!(a.inner_product(&b).is_err());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let mut rng = SeededRng::new(4);
        let m = random(&mut rng, 2, 5);
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().get(3, 1), m.get(1, 3));
    }
}
