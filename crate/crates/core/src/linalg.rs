//! Dense row-major kernels shared by the filter, the oracle and the model engine.
//!
//! Everything here is 64-bit and allocation-explicit. The two contractions the
//! diagonal filter relies on, [`row_scale`] (the transposed Khatri–Rao product
//! `p • Hᵀ`) and [`diag_of_triple`] (`diag(K·H·diag(p))`), are written so they
//! never form an `ñ×ñ` intermediate.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a Cholesky factorization counts as failed.
pub const PIVOT_RTOL: f64 = 1e-12;
/// Jitter seed as a fraction of the mean diagonal entry.
pub const JITTER_SCALE: f64 = 1e-8;
pub const JITTER_FLOOR: f64 = 1e-12;
/// Number of ×10 jitter escalations after the first jittered attempt.
pub const JITTER_ESCALATIONS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::from_vec",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            for (j, &v) in row.iter().enumerate() {
                t.data[j * self.rows + i] = v;
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims("matmul", format!("{:?} x {:?}", self.shape(), rhs.shape())));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::dims(
                "matvec",
                format!("{:?} x vector[{}]", self.shape(), x.len()),
            ));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x` without forming the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.rows != x.len() {
            return Err(Error::dims(
                "tr_matvec",
                format!("{:?}ᵀ x vector[{}]", self.shape(), x.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims("add", format!("{:?} + {:?}", self.shape(), rhs.shape())));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// In-place `(A + Aᵀ)/2`. No-op on non-square matrices.
    pub fn symmetrize(&mut self) {
        if self.rows != self.cols {
            return;
        }
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Transposed Khatri–Rao product `p • Ht`: row `i` of `ht` scaled by `p[i]`.
///
/// Equals `diag(p) · Ht` exactly, since each output entry is a single product.
pub fn row_scale(p: &[f64], ht: &Matrix) -> Result<Matrix> {
    if p.len() != ht.rows {
        return Err(Error::dims(
            "row_scale",
            format!("p[{}] against {:?}", p.len(), ht.shape()),
        ));
    }
    let mut out = ht.clone();
    for (i, &pi) in p.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= pi;
        }
    }
    Ok(out)
}

/// `out[i] = Σ_j K[i,j]·H[j,i]·p[i]`, the diagonal of `K·H·diag(p)`.
pub fn diag_of_triple(k: &Matrix, h: &Matrix, p: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = k.shape();
    if h.shape() != (m, n) || p.len() != n {
        return Err(Error::dims(
            "diag_of_triple",
            format!("K {:?}, H {:?}, p[{}]", k.shape(), h.shape(), p.len()),
        ));
    }
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let k_row = k.row(i);
        let mut s = 0.0;
        for (j, &kij) in k_row.iter().enumerate() {
            s += kij * h.data[j * n + i];
        }
        *o = s * p[i];
    }
    Ok(out)
}

pub fn outer(u: &[f64], v: &[f64]) -> Result<Matrix> {
    if u.len() != v.len() {
        return Err(Error::dims("outer", format!("u[{}] ⊗ v[{}]", u.len(), v.len())));
    }
    let n = u.len();
    let mut out = Matrix::zeros(n, n);
    for (i, &ui) in u.iter().enumerate() {
        for (o, &vj) in out.row_mut(i).iter_mut().zip(v) {
            *o = ui * vj;
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor plus the diagonal jitter that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: Matrix,
    jitter: f64,
}

impl Cholesky {
    /// Factors `(S + Sᵀ)/2`, adding `ε·I` on failure.
    ///
    /// `ε = max(JITTER_SCALE · trace(S)/m, JITTER_FLOOR)`, escalated ×10 at most
    /// [`JITTER_ESCALATIONS`] times. A pivot counts as failed when it is not
    /// finite or falls below `PIVOT_RTOL` times the largest diagonal entry.
    pub fn factor(s: &Matrix) -> Result<Self> {
        let (m, c) = s.shape();
        if m != c {
            return Err(Error::dims("cholesky", format!("{:?} not square", s.shape())));
        }
        let mut sym = s.clone();
        sym.symmetrize();
        if let Some(lower) = try_cholesky(&sym, 0.0) {
            return Ok(Cholesky { lower, jitter: 0.0 });
        }
        let mean_diag = if m == 0 { 0.0 } else { sym.trace() / m as f64 };
        let mut eps = (JITTER_SCALE * mean_diag.abs()).max(JITTER_FLOOR);
        for _ in 0..=JITTER_ESCALATIONS {
            if let Some(lower) = try_cholesky(&sym, eps) {
                return Ok(Cholesky { lower, jitter: eps });
            }
            eps *= 10.0;
        }
        Err(Error::NotPositiveDefinite {
            attempts: JITTER_ESCALATIONS + 1,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Overwrites each column of `b` (an `m×n` matrix) with `S⁻¹` applied to it.
    pub fn solve_in_place(&self, b: &mut Matrix) -> Result<()> {
        let m = self.lower.rows;
        if b.rows != m {
            return Err(Error::dims(
                "cholesky solve",
                format!("factor {m}x{m} against {:?}", b.shape()),
            ));
        }
        let n = b.cols;
        let l = &self.lower;
        // Row-oriented substitution keeps the inner loops contiguous over the n right-hand sides.
        for i in 0..m {
            let (done, rest) = b.data.split_at_mut(i * n);
            let row_i = &mut rest[..n];
            for k in 0..i {
                let lik = l[(i, k)];
                if lik != 0.0 {
                    axpy(-lik, &done[k * n..(k + 1) * n], row_i);
                }
            }
            let inv = 1.0 / l[(i, i)];
            row_i.iter_mut().for_each(|v| *v *= inv);
        }
        for i in (0..m).rev() {
            let (head, tail) = b.data.split_at_mut((i + 1) * n);
            let row_i = &mut head[i * n..];
            for k in (i + 1)..m {
                let lki = l[(k, i)];
                if lki != 0.0 {
                    axpy(-lki, &tail[(k - i - 1) * n..(k - i) * n], row_i);
                }
            }
            let inv = 1.0 / l[(i, i)];
            row_i.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(())
    }
}

fn try_cholesky(s: &Matrix, jitter: f64) -> Option<Matrix> {
    let m = s.rows;
    let max_diag = (0..m).map(|i| s[(i, i)] + jitter).fold(0.0, f64::max);
    let tol = PIVOT_RTOL * max_diag;
    let mut l = Matrix::zeros(m, m);
    for j in 0..m {
        let mut d = s[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d <= tol || d <= 0.0 {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..m {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Some(l)
}

/// Solves `S·X = B` for symmetric positive definite `S` (`m×m`) and `B` (`m×n`).
pub fn spd_solve(s: &Matrix, b: &Matrix) -> Result<Matrix> {
    if s.rows != b.rows {
        return Err(Error::dims(
            "spd_solve",
            format!("S {:?} against B {:?}", s.shape(), b.shape()),
        ));
    }
    let chol = Cholesky::factor(s)?;
    let mut x = b.clone();
    chol.solve_in_place(&mut x)?;
    Ok(x)
}

pub fn is_all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> Matrix {
        let a = random_matrix(rng, m, m);
        let mut s = a.matmul(&a.transpose()).unwrap();
        for i in 0..m {
            s[(i, i)] += 0.5;
        }
        s
    }

    #[test]
    fn row_scale_diagonal_case() {
        let ht = Matrix::identity(2);
        let out = row_scale(&[2.0, 3.0], &ht).unwrap();
        assert_eq!(out, Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]));
    }

    #[test]
    fn row_scale_ones_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ht = random_matrix(&mut rng, 5, 3);
        assert_eq!(row_scale(&[1.0; 5], &ht).unwrap(), ht);
    }

    #[test]
    fn row_scale_matches_dense_diag_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..2.0)).collect();
        let ht = random_matrix(&mut rng, 7, 3);
        let dense = Matrix::from_diag(&p).matmul(&ht).unwrap();
        let fast = row_scale(&p, &ht).unwrap();
        assert!(fast.max_abs_diff(&dense) <= 1e-14);
    }

    #[test]
    fn row_scale_rejects_bad_length() {
        assert!(row_scale(&[1.0], &Matrix::identity(2)).is_err());
    }

    #[test]
    fn spd_solve_identity_and_scalar() {
        let i3 = Matrix::identity(3);
        assert_eq!(spd_solve(&i3, &i3).unwrap(), i3);
        let two = i3.scale(2.0);
        let x = spd_solve(&two, &i3).unwrap();
        assert!(x.max_abs_diff(&i3.scale(0.5)) < 1e-15);
    }

    #[test]
    fn spd_solve_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(&mut rng, 4);
        let b = random_matrix(&mut rng, 4, 9);
        let x = spd_solve(&s, &b).unwrap();
        let resid = s.matmul(&x).unwrap();
        let err = Matrix::from_vec(
            4,
            9,
            resid.as_slice().iter().zip(b.as_slice()).map(|(a, b)| a - b).collect(),
        )
        .unwrap();
        assert!(err.frobenius_norm() / b.frobenius_norm() <= 1e-10);
    }

    #[test]
    fn spd_solve_jitters_singular_psd() {
        // rank-1 PSD matrix: exact factorization fails, jitter rescues it
        let s = outer(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let chol = Cholesky::factor(&s).unwrap();
        assert!(chol.jitter() > 0.0);
        assert!(chol.jitter() <= 1e-8 * 1000.0);
    }

    #[test]
    fn spd_solve_rejects_negative_definite() {
        let s = Matrix::identity(2).scale(-1.0);
        match spd_solve(&s, &Matrix::identity(2)) {
            Err(Error::NotPositiveDefinite { .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn spd_solve_symmetrizes_input() {
        let mut s = Matrix::from_rows(&[&[4.0, 1.0], &[1.0, 3.0]]);
        let sym = s.clone();
        s[(0, 1)] = 1.2;
        s[(1, 0)] = 0.8;
        let b = Matrix::identity(2);
        let x1 = spd_solve(&s, &b).unwrap();
        let x2 = spd_solve(&sym, &b).unwrap();
        assert!(x1.max_abs_diff(&x2) < 1e-15);
    }

    #[test]
    fn diag_of_triple_cases() {
        let k = Matrix::from_rows(&[&[0.5]]);
        let h = Matrix::from_rows(&[&[1.0]]);
        assert_eq!(diag_of_triple(&k, &h, &[1.0]).unwrap(), vec![0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_matrix(&mut rng, 2, 6);
        let p: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
        assert_eq!(diag_of_triple(&Matrix::zeros(6, 2), &h, &p).unwrap(), vec![0.0; 6]);

        let k = random_matrix(&mut rng, 6, 2);
        let dense = k.matmul(&h).unwrap().matmul(&Matrix::from_diag(&p)).unwrap().diag();
        let fast = diag_of_triple(&k, &h, &p).unwrap();
        for (a, b) in fast.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn outer_cases() {
        assert_eq!(
            outer(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]])
        );
        assert_eq!(outer(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(
            outer(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            Matrix::from_rows(&[&[3.0, 4.0], &[6.0, 8.0]])
        );
        assert!(outer(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tr_matvec_matches_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 4, 3);
        let x = [0.3, -1.0, 2.0, 0.5];
        let t = a.transpose().matvec(&x).unwrap();
        let f = a.tr_matvec(&x).unwrap();
        for (p, q) in t.iter().zip(&f) {
            assert!((p - q).abs() < 1e-15);
        }
    }
}
