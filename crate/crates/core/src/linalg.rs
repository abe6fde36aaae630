//! Dense real linear algebra: the matrix type plus the handful of kernels the
//! diagnostics need (centering, Gram products, top-k symmetric eigenpairs).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix construction".into()));
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_tn ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest `|a_ij - a_ji|`; `None` when not square.
    pub fn max_asymmetry(&self) -> Option<f64> {
        if self.rows != self.cols {
            return None;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Some(worst)
    }
}

/// A unit-norm eigenvector with its eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Top eigenpairs of a symmetric matrix, descending by eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct TopEigen {
    pub pairs: Vec<EigenPair>,
    /// Set when the top two eigenvalues are closer than `1e-10·|λ1|`.
    pub degenerate_gap: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Subtracts each column's mean.
pub fn center_columns(m: &Matrix) -> Result<Matrix> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    let means = m.column_means();
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, mu) in out.row_mut(r).iter_mut().zip(&means) {
            *v -= mu;
        }
    }
    Ok(out)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    norm2(m.data())
}

/// `m · mᵀ`
pub fn gram(m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(m.row(i), m.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateDirection);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Flips `v` so its first coordinate with magnitude above 1e-12 is positive.
pub fn canonicalize_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[EigenPair]) {
    // two passes of modified Gram-Schmidt
    for _ in 0..2 {
        for p in basis {
            let proj = dot(v, &p.vector);
            for (x, b) in v.iter_mut().zip(&p.vector) {
                *x -= proj * b;
            }
        }
    }
}

fn residual(s: &Matrix, v: &[f64], lambda: f64) -> f64 {
    let sv = s.matvec(v);
    sv.iter()
        .zip(v)
        .map(|(a, b)| (a - lambda * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Top-`k` eigenpairs of a symmetric matrix by deflated iteration.
///
/// The matrix is shifted by a Gershgorin bound so the algebraically largest
/// eigenvalue dominates. Each pair is found by repeated squaring of the
/// normalized deflated matrix applied to a fixed all-ones start vector,
/// then polished with plain power steps until
/// `‖s·v − λv‖ ≤ tol·max(1, |λ|, |λ_1|)`, i.e. relative to the spectral
/// scale so small trailing eigenvalues of large matrices still converge.
pub fn sym_top_eigs(s: &Matrix, k: usize, tol: f64, max_iter: usize) -> Result<TopEigen> {
    let n = s.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if k > n {
        return Err(Error::Invalid(format!("k={k} exceeds dimension {n}")));
    }
    let asym = s
        .max_asymmetry()
        .ok_or_else(|| Error::Shape(format!("{}x{} is not square", n, s.cols())))?;
    let scale = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if asym > 1e-9 * scale.max(1e-300) {
        return Err(Error::NotSymmetric(asym));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("eigensolver input".into()));
    }

    // Gershgorin lower bound, shifted so every eigenvalue of b is positive.
    let gersh_lo = (0..n)
        .map(|i| {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| s.get(i, j).abs()).sum();
            s.get(i, i) - off
        })
        .fold(f64::INFINITY, f64::min);
    let shift = (-gersh_lo).max(0.0) + 1e-3 * scale.max(f64::MIN_POSITIVE);
    let mut b = s.clone();
    for i in 0..n {
        b.set(i, i, b.get(i, i) + shift);
    }

    let mut pairs: Vec<EigenPair> = Vec::with_capacity(k);
    for idx in 0..k {
        let v = dominant_vector(&b, &pairs, n, idx);
        let mut v = v;
        let mut lambda = dot(&v, &s.matvec(&v));
        let mut best = residual(s, &v, lambda);
        let mut iter = 0;
        let top = pairs.first().map_or(0.0, |p| p.value.abs());
        while best > tol * lambda.abs().max(top).max(1.0) {
            if iter >= max_iter {
                return Err(Error::NoConvergence { residual: best });
            }
            let mut next = b.matvec(&v);
            orthogonalize(&mut next, &pairs);
            if normalize(&mut next) == 0.0 {
                break;
            }
            v = next;
            lambda = dot(&v, &s.matvec(&v));
            best = residual(s, &v, lambda);
            iter += 1;
        }
        canonicalize_sign(&mut v);
        // deflate the shifted matrix: this direction drops to zero, below all others
        let mu = lambda + shift;
        for i in 0..n {
            for j in 0..n {
                let val = b.get(i, j) - mu * v[i] * v[j];
                b.set(i, j, val);
            }
        }
        pairs.push(EigenPair { value: lambda, vector: v });
    }

    let degenerate_gap = pairs.len() >= 2
        && (pairs[0].value - pairs[1].value) < 1e-10 * pairs[0].value.abs();
    Ok(TopEigen {
        pairs,
        degenerate_gap,
    })
}

/// Dominant direction of the (deflated, positive) matrix `b` via repeated
/// squaring. Falls back to a deterministically perturbed start vector, and
/// finally to standard basis vectors, when the start is annihilated.
fn dominant_vector(b: &Matrix, found: &[EigenPair], n: usize, idx: usize) -> Vec<f64> {
    let bn = frobenius_norm(b);
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    candidates.push(ones);
    candidates.push(
        (0..n)
            .map(|i| 1.0 + 0.37 * ((i + idx) as f64 + 1.0).sin())
            .collect(),
    );
    for e in 0..n {
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        candidates.push(v);
    }

    let power = if bn > 0.0 && bn.is_finite() {
        let mut p = b.scaled(1.0 / bn);
        for _ in 0..60 {
            let sq = p.matmul(&p).expect("square");
            let nrm = frobenius_norm(&sq);
            if nrm == 0.0 || !nrm.is_finite() {
                break;
            }
            let next = sq.scaled(1.0 / nrm);
            let change = frobenius_norm(&next.sub(&p).expect("same shape"));
            p = next;
            if change < 1e-15 {
                break;
            }
        }
        Some(p)
    } else {
        None
    };

    for start in candidates {
        let mut v = match &power {
            Some(p) => p.matvec(&start),
            None => start.clone(),
        };
        orthogonalize(&mut v, found);
        if normalize(&mut v) > 1e-8 {
            return v;
        }
    }
    // b is numerically zero on the complement: any orthonormal completion works
    for e in 0..n {
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        orthogonalize(&mut v, found);
        if normalize(&mut v) > 1e-8 {
            return v;
        }
    }
    vec![0.0; n]
}

/// Spectral norm of a symmetric matrix: `max(|λ_max|, |λ_min|)`.
pub fn spectral_norm_sym(s: &Matrix) -> Result<f64> {
    let top = sym_top_eigs(s, 1, 1e-12, 100_000)?;
    let bottom = sym_top_eigs(&s.scaled(-1.0), 1, 1e-12, 100_000)?;
    Ok(top.pairs[0].value.abs().max(bottom.pairs[0].value.abs()))
}
