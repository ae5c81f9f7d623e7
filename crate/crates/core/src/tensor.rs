//! Dense linear algebra and summary statistics.
//!
//! Everything here works on [`DenseMatrix`], a row-major `f64` matrix. The
//! SVD is a one-sided Jacobi sweep, which is slow for large inputs but
//! accurate to a few ulps on the matrix sizes the simulator uses (at most a
//! few hundred per side).

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Singular values at or below `DEFAULT_PINV_TOL * sigma_max` are treated as
/// zero by [`pseudoinverse`].
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// Population variance below which [`kurtosis`] reports a degenerate sample.
pub const KURTOSIS_MIN_VARIANCE: f64 = 1e-24;

const JACOBI_EPS: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Row-major matrix of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite entry {bad}")));
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Square diagonal matrix.
    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from a slice of equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::InvalidInput("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
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

    /// I.i.d. `N(0, std^2)` entries.
    pub fn random_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, rhs: &DenseMatrix, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape(rhs, "add")?;
        Ok(self.zip_map(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape(rhs, "sub")?;
        Ok(self.zip_map(rhs, |a, b| a - b))
    }

    pub fn add_assign(&mut self, rhs: &DenseMatrix) -> Result<()> {
        self.check_same_shape(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += factor * rhs`
    pub fn axpy(&mut self, factor: f64, rhs: &DenseMatrix) -> Result<()> {
        self.check_same_shape(rhs, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, rhs: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Number of nonzero entries.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    /// Mean of a non-empty slice of equally shaped matrices.
    pub fn mean_of(items: &[DenseMatrix]) -> Result<DenseMatrix> {
        let first = items.first().ok_or(Error::EmptyInput)?;
        let mut acc = DenseMatrix::zeros(first.rows, first.cols);
        for m in items {
            acc.add_assign(m)?;
        }
        Ok(acc.scale(1.0 / items.len() as f64))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = self.row(i);
            let shown: Vec<String> = row.iter().take(8).map(|x| format!("{x:>10.4e}")).collect();
            let ellipsis = if self.cols > 8 { " ..." } else { "" };
            writeln!(f, "  {}{ellipsis}", shown.join(" "))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// Thin SVD `m = u * diag(singular_values) * vh` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vh: DenseMatrix,
}

impl SvdFactors {
    /// Multiplies the factors back together, keeping the leading `r` triplets.
    pub fn reconstruct(&self, r: usize) -> DenseMatrix {
        let (m, n) = (self.u.rows(), self.vh.cols());
        let r = r.min(self.singular_values.len());
        let mut out = DenseMatrix::zeros(m, n);
        for k in 0..r {
            let s = self.singular_values[k];
            if s == 0.0 {
                continue;
            }
            let v_row = self.vh.row(k);
            for i in 0..m {
                let us = self.u[(i, k)] * s;
                if us == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &v) in out_row.iter_mut().zip(v_row) {
                    *o += us * v;
                }
            }
        }
        out
    }
}

/// Full thin SVD by one-sided Jacobi rotations.
pub fn svd_full(m: &DenseMatrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd of non-finite matrix".into()));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidInput("svd of empty matrix".into()));
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        let t = jacobi_tall(&m.transpose());
        Ok(SvdFactors {
            u: t.vh.transpose(),
            singular_values: t.singular_values,
            vh: t.u.transpose(),
        })
    }
}

// rows >= cols. Columns are stored contiguously while rotating.
fn jacobi_tall(m: &DenseMatrix) -> SvdFactors {
    let (rows, cols) = m.shape();
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&work[p], &work[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut work, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = work.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * 1e-13;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > cutoff && norms[j] > 0.0 {
            u_cols.push(work[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            pending.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &pending, rows);

    let singular_values = order.iter().map(|&j| norms[j]).collect();
    let u = DenseMatrix::from_fn(rows, cols, |i, k| u_cols[k][i]);
    let vh = DenseMatrix::from_fn(cols, cols, |k, j| v[order[k]][j]);
    SvdFactors {
        u,
        singular_values,
        vh,
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the `pending` slots with unit vectors orthogonal to every other
/// column. Each slot takes the standard basis vector with the largest
/// component outside the current span, which always exists while the span
/// is a proper subspace.
fn complete_orthonormal(cols: &mut [Vec<f64>], pending: &[usize], dim: usize) {
    for &slot in pending {
        let outside = |i: usize| 1.0 - cols.iter().map(|c| c[i] * c[i]).sum::<f64>();
        let best = (0..dim)
            .max_by(|&a, &b| outside(a).total_cmp(&outside(b)))
            .expect("dim > 0");
        let mut e = vec![0.0; dim];
        e[best] = 1.0;
        // two Gram-Schmidt passes
        for _ in 0..2 {
            for (k, col) in cols.iter().enumerate() {
                if k == slot {
                    continue;
                }
                let dot: f64 = e.iter().zip(col).map(|(a, b)| a * b).sum();
                for (x, y) in e.iter_mut().zip(col) {
                    *x -= dot * y;
                }
            }
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols[slot] = e.into_iter().map(|x| x / norm).collect();
    }
}

/// Best rank-`r` approximation in Frobenius norm (truncated SVD).
pub fn rank_r_approx(m: &DenseMatrix, r: usize) -> Result<DenseMatrix> {
    let max = m.rows().min(m.cols());
    if r == 0 || r > max {
        return Err(Error::InvalidRank { rank: r, max });
    }
    Ok(svd_full(m)?.reconstruct(r))
}

/// Moore-Penrose pseudoinverse. Singular values `<= tol * sigma_max` are
/// treated as zero.
pub fn pseudoinverse(m: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidInput(format!("pseudoinverse tolerance {tol}")));
    }
    let svd = svd_full(m)?;
    let (rows, cols) = m.shape();
    let mut out = DenseMatrix::zeros(cols, rows);
    let sigma_max = svd.singular_values[0];
    if sigma_max == 0.0 {
        return Ok(out);
    }
    let cutoff = tol * sigma_max;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            break;
        }
        let inv = 1.0 / s;
        let v_row = svd.vh.row(k);
        for i in 0..cols {
            let vi = v_row[i] * inv;
            for j in 0..rows {
                out[(i, j)] += vi * svd.u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Linearly interpolated empirical quantile: `q = 0` gives the minimum,
/// `q = 1` the maximum.
pub fn quantile_threshold(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("quantile level {q} outside [0, 1]")));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in quantile input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Raw (non-excess) kurtosis `m4 / m2^2` with population moments.
///
/// Returns `None` for fewer than four values or a variance below
/// [`KURTOSIS_MIN_VARIANCE`].
pub fn kurtosis(values: &[f64]) -> Option<f64> {
    if values.len() < 4 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in values {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if !(m2 >= KURTOSIS_MIN_VARIANCE) {
        return None;
    }
    Some(m4 / (m2 * m2))
}

/// Euclidean norm of every row.
pub fn row_norms(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Euclidean norm of every column.
pub fn col_norms(m: &DenseMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, x) in acc.iter_mut().zip(m.row(i)) {
            *a += x * x;
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        DenseMatrix::random_gaussian(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
        })
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(5, 7, 1);
        let b = random(7, 3, 2);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.sub(&slow).unwrap().max_abs() < 1e-12);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let svd = svd_full(&DenseMatrix::identity(3)).unwrap();
        for s in &svd.singular_values {
            assert_abs_diff_eq!(*s, 1.0, epsilon = 1e-14);
        }
        let svd = svd_full(&DenseMatrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(svd.singular_values.len(), 3);
        for (s, want) in svd.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert_abs_diff_eq!(*s, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn svd_reconstructs_random_tall_and_wide() {
        for (rows, cols, seed) in [(8, 5, 3), (5, 8, 4), (1, 6, 5), (6, 1, 6)] {
            let m = random(rows, cols, seed);
            let svd = svd_full(&m).unwrap();
            assert_eq!(svd.singular_values.len(), rows.min(cols));
            let err = svd.reconstruct(rows.min(cols)).sub(&m).unwrap().frobenius_norm();
            assert!(err / m.frobenius_norm() < 1e-9, "{rows}x{cols}: {err}");
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_factors() {
        let u = random(6, 2, 7);
        let v = random(2, 5, 8);
        let m = u.matmul(&v).unwrap();
        let svd = svd_full(&m).unwrap();
        let utu = svd.u.transpose().matmul(&svd.u).unwrap();
        assert!(utu.sub(&DenseMatrix::identity(5)).unwrap().max_abs() < 1e-10);
        let vvt = svd.vh.matmul(&svd.vh.transpose()).unwrap();
        assert!(vvt.sub(&DenseMatrix::identity(5)).unwrap().max_abs() < 1e-10);
        assert!(svd.singular_values[2] < 1e-12 * svd.singular_values[0]);
        let zero = svd_full(&DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(zero.singular_values, vec![0.0, 0.0]);

        for (n, r, seed) in [(64, 8, 9), (64, 60, 10), (40, 39, 11), (7, 1, 12)] {
            let m = random(n, r, seed).matmul(&random(r, n, seed + 100)).unwrap();
            let svd = svd_full(&m).unwrap();
            let utu = svd.u.transpose().matmul(&svd.u).unwrap();
            assert!(utu.sub(&DenseMatrix::identity(n)).unwrap().max_abs() < 1e-10, "{n} {r}");
            assert!(svd.reconstruct(r).sub(&m).unwrap().max_abs() < 1e-9 * m.max_abs());
        }
    }

    #[test]
    fn svd_rejects_non_finite_and_empty() {
        let mut m = DenseMatrix::zeros(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(svd_full(&m), Err(Error::InvalidInput(_))));
        assert!(svd_full(&DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn rank_r_examples() {
        let u = DenseMatrix::from_rows(&[[1.0], [2.0], [-1.0]]).unwrap();
        let v = DenseMatrix::from_rows(&[[0.5, 3.0]]).unwrap();
        let outer = u.matmul(&v).unwrap();
        let approx = rank_r_approx(&outer, 1).unwrap();
        assert!(approx.sub(&outer).unwrap().frobenius_norm() < 1e-10);

        let d = DenseMatrix::diag(&[3.0, 2.0, 1.0]);
        let approx = rank_r_approx(&d, 2).unwrap();
        assert!(approx.sub(&DenseMatrix::diag(&[3.0, 2.0, 0.0])).unwrap().max_abs() < 1e-12);
        assert_abs_diff_eq!(approx.sub(&d).unwrap().frobenius_norm(), 1.0, epsilon = 1e-12);

        let m = random(10, 6, 9);
        let s = svd_full(&m).unwrap().singular_values;
        let tail = (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]).sqrt();
        let err = rank_r_approx(&m, 3).unwrap().sub(&m).unwrap().frobenius_norm();
        assert_abs_diff_eq!(err, tail, epsilon = 1e-8);

        assert_eq!(rank_r_approx(&m, 0), Err(Error::InvalidRank { rank: 0, max: 6 }));
        assert_eq!(rank_r_approx(&m, 7), Err(Error::InvalidRank { rank: 7, max: 6 }));
    }

    #[test]
    fn pinv_examples() {
        let eye = DenseMatrix::identity(4);
        assert!(pseudoinverse(&eye, DEFAULT_PINV_TOL).unwrap().sub(&eye).unwrap().max_abs() < 1e-14);

        let d = DenseMatrix::diag(&[2.0, 0.0]);
        let p = pseudoinverse(&d, DEFAULT_PINV_TOL).unwrap();
        assert!(p.sub(&DenseMatrix::diag(&[0.5, 0.0])).unwrap().max_abs() < 1e-14);

        let tall = random(8, 3, 10);
        let left = pseudoinverse(&tall, DEFAULT_PINV_TOL).unwrap().matmul(&tall).unwrap();
        assert!(left.sub(&DenseMatrix::identity(3)).unwrap().max_abs() < 1e-8);

        let z = pseudoinverse(&DenseMatrix::zeros(2, 3), DEFAULT_PINV_TOL).unwrap();
        assert_eq!(z.shape(), (3, 2));
        assert_eq!(z.count_nonzero(), 0);
        assert!(pseudoinverse(&eye, -1.0).is_err());
    }

    #[test]
    fn quantile_examples() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile_threshold(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile_threshold(&v, 1.0).unwrap(), 4.0);
        assert_eq!(quantile_threshold(&v, 0.5).unwrap(), 2.5);
        assert_eq!(quantile_threshold(&[], 0.5), Err(Error::EmptyInput));
        assert!(quantile_threshold(&v, 1.5).is_err());
        assert!(quantile_threshold(&v, f64::NAN).is_err());
    }

    #[test]
    fn kurtosis_examples() {
        assert_eq!(kurtosis(&[5.0; 4]), None);
        assert_eq!(kurtosis(&[1.0, 2.0, 3.0]), None);
        let two_point: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert_abs_diff_eq!(kurtosis(&two_point).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn kurtosis_of_gaussian_sample_is_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..1_000_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        assert_abs_diff_eq!(kurtosis(&xs).unwrap(), 3.0, epsilon = 0.05);
    }

    #[test]
    fn norms_examples() {
        let z = DenseMatrix::zeros(2, 3);
        assert_eq!(row_norms(&z), vec![0.0, 0.0]);
        assert_eq!(col_norms(&z), vec![0.0; 3]);
        let m = DenseMatrix::from_rows(&[[3.0, 4.0], [0.0, 1.0]]).unwrap();
        assert_eq!(row_norms(&m), vec![5.0, 1.0]);
        let m = random(5, 7, 12);
        for (i, n) in row_norms(&m).iter().enumerate() {
            let mut s = 0.0;
            for j in 0..7 {
                s += m[(i, j)] * m[(i, j)];
            }
            assert_abs_diff_eq!(*n, s.sqrt(), epsilon = 1e-12);
        }
        for (j, n) in col_norms(&m).iter().enumerate() {
            let mut s = 0.0;
            for i in 0..5 {
                s += m[(i, j)] * m[(i, j)];
            }
            assert_abs_diff_eq!(*n, s.sqrt(), epsilon = 1e-12);
        }
    }
}
