//! Dense real matrices and the linear algebra the alignment math consumes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Rows with a Euclidean norm below this are treated as degenerate.
pub const EPS_NORM: f64 = 1e-12;

const SVD_MAX_SWEEPS: usize = 100;

/// Row-major `rows × cols` matrix of finite `f64` values.
///
/// Rows are embeddings, prototypes or samples; every alignment loss takes
/// two of these. Constructors reject empty shapes and non-finite entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for FeatureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "FeatureMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(
                "FeatureMatrix::new",
                format!("empty shape {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(
                "FeatureMatrix::new",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "FeatureMatrix::new",
                format!("non-finite entry at ({}, {})", k / cols, k % cols),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if let Some(i) = rows.iter().position(|r| r.as_ref().len() != cols) {
            return Err(Error::contract(
                "FeatureMatrix::from_rows",
                format!("row {i} has {} values, expected {cols}", rows[i].as_ref().len()),
            ));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix shape {rows}x{cols}");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// # Panics
    /// If either dimension is zero or `f` returns a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite entry at ({i}, {j})");
                m.data[i * cols + j] = v;
            }
        }
        m
    }

    /// Standard normal entries.
    pub fn random_normal(rows: usize, cols: usize, rng: &mut SimRng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::contract(
                "matmul",
                format!("{}x{} · {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
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
        out.checked("matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_transpose(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::contract(
                "matmul_transpose",
                format!("{}x{} · ({}x{})ᵀ", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let data = (0..self.rows)
            .flat_map(|i| other.iter_rows().map(move |r| dot(self.row(i), r)))
            .collect();
        Self { rows: self.rows, cols: other.rows, data }.checked("matmul_transpose")
    }

    /// `selfᵀ · other`.
    pub fn transpose_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::contract(
                "transpose_matmul",
                format!("({}x{})ᵀ · {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for (i, &a) in self.row(k).iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out.checked("transpose_matmul")
    }

    /// Products and sums of finite matrices can still overflow; those
    /// results become a numeric error instead of a matrix with infinities.
    fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::numeric(op, format!("{}x{} result overflowed", self.rows, self.cols)))
        }
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(
                op,
                format!("shape {}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }.checked("add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { rows: self.rows, cols: self.cols, data }.checked("sub")
    }

    pub fn scale(&self, s: f64) -> Self {
        let data = self.data.iter().map(|v| v * s).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.cols {
            return Err(Error::contract(
                "add_row_vector",
                format!("vector of length {} for {} columns", v.len(), self.cols),
            ));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(v) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Frobenius inner product `tr(selfᵀ other)`.
    pub fn frobenius_inner(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "frobenius_inner")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(dot(&self.data, &self.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        norm(self.row(i))
    }

    /// New matrix holding the listed rows in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows) {
            return Err(Error::contract(
                "select_rows",
                format!("row {bad} out of range for {} rows", self.rows),
            ));
        }
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::new(indices.len(), self.cols, data)
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(m) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::contract(
                "vstack",
                format!("column count {} vs {cols}", m.cols),
            ));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let data = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Self::new(rows, cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Thin singular value decomposition `m = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Nonincreasing, nonnegative; length `min(rows, cols)`.
    pub singular_values: Vec<f64>,
    /// `rows × k`, orthonormal columns.
    pub left_factor: FeatureMatrix,
    /// `cols × k`, orthonormal columns.
    pub right_factor: FeatureMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> FeatureMatrix {
        let u = &self.left_factor;
        let v = &self.right_factor;
        FeatureMatrix::from_fn(u.rows(), v.rows(), |i, j| {
            self.singular_values
                .iter()
                .enumerate()
                .map(|(k, s)| u.get(i, k) * s * v.get(j, k))
                .sum()
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Signs are fixed so the largest-magnitude entry of every left singular
/// vector is positive (first such entry on ties).
pub fn svd(m: &FeatureMatrix) -> Result<SvdResult> {
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose())?;
        let mut out = SvdResult {
            singular_values: t.singular_values,
            left_factor: t.right_factor,
            right_factor: t.left_factor,
        };
        fix_signs(&mut out);
        return Ok(out);
    }
    let mut out = svd_tall(m)?;
    fix_signs(&mut out);
    Ok(out)
}

fn svd_tall(a: &FeatureMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Columns of `w` converge to U·diag(σ); `v` accumulates the rotations.
    let mut w = a.transpose();
    let mut v = FeatureMatrix::identity(n);

    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (wp, wq) = (w.row(p), w.row(q));
                let alpha = dot(wp, wp);
                let beta = dot(wq, wq);
                let gamma = dot(wp, wq);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged || !w.is_finite() {
        return Err(Error::numeric(
            "svd",
            format!("Jacobi sweeps did not converge for a {m}x{n} matrix"),
        ));
    }

    let sigma: Vec<f64> = w.iter_rows().map(norm).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let sigma_max = sigma[order[0]];
    let cutoff = sigma_max * 1e-13 * (m.max(n) as f64);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        singular_values.push(sigma[j]);
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            u_cols.push(w.row(j).iter().map(|x| x / sigma[j]).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            pending.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &pending);

    let left_factor = FeatureMatrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let right_factor = FeatureMatrix::from_fn(n, n, |i, k| v.get(order[k], i));
    Ok(SvdResult { singular_values, left_factor, right_factor })
}

fn rotate_rows(m: &mut FeatureMatrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for k in 0..cols {
        let xp = data[p * cols + k];
        let xq = data[q * cols + k];
        data[p * cols + k] = c * xp - s * xq;
        data[q * cols + k] = s * xp + c * xq;
    }
}

/// Replace the vectors at `pending` with unit vectors orthogonal to all
/// others, drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Vec<f64>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut filled: Vec<bool> = (0..cols.len()).map(|k| !pending.contains(&k)).collect();
    let mut candidate = 0;
    for &k in pending {
        loop {
            assert!(candidate < dim, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if filled[j] {
                        let proj = dot(&e, c);
                        e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                    }
                }
            }
            let len = norm(&e);
            if len > 1e-6 {
                e.iter_mut().for_each(|x| *x /= len);
                cols[k] = e;
                filled[k] = true;
                break;
            }
        }
    }
}

fn fix_signs(svd: &mut SvdResult) {
    let k = svd.singular_values.len();
    for j in 0..k {
        let u = &svd.left_factor;
        let mut best = 0;
        for i in 1..u.rows() {
            if u.get(i, j).abs() > u.get(best, j).abs() {
                best = i;
            }
        }
        if u.get(best, j) < 0.0 {
            for i in 0..svd.left_factor.rows() {
                let x = svd.left_factor.get(i, j);
                svd.left_factor.set(i, j, -x);
            }
            for i in 0..svd.right_factor.rows() {
                let x = svd.right_factor.get(i, j);
                svd.right_factor.set(i, j, -x);
            }
        }
    }
}

/// Thin Householder QR of a tall matrix, `m = Q·R` with `diag(R) ≥ 0`.
pub fn qr(m: &FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::contract("qr", format!("needs rows ≥ cols, got {rows}x{cols}")));
    }
    let mut r = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let mut v: Vec<f64> = (k..rows).map(|i| r.get(i, k)).collect();
        let alpha = norm(&v);
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v[0] += libm::copysign(alpha, v[0]);
        let vnorm = norm(&v);
        v.iter_mut().for_each(|x| *x /= vnorm);
        for j in k..cols {
            let proj: f64 = (k..rows).map(|i| v[i - k] * r.get(i, j)).sum();
            for i in k..rows {
                let x = r.get(i, j) - 2.0 * v[i - k] * proj;
                r.set(i, j, x);
            }
        }
        reflectors.push(v);
    }

    let mut q = FeatureMatrix::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 });
    for (k, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for j in 0..cols {
            let proj: f64 = (k..rows).map(|i| v[i - k] * q.get(i, j)).sum();
            for i in k..rows {
                let x = q.get(i, j) - 2.0 * v[i - k] * proj;
                q.set(i, j, x);
            }
        }
    }

    let mut r_sq = FeatureMatrix::from_fn(cols, cols, |i, j| if j >= i { r.get(i, j) } else { 0.0 });
    for j in 0..cols {
        if r_sq.get(j, j) < 0.0 {
            for c in 0..cols {
                let x = r_sq.get(j, c);
                r_sq.set(j, c, -x);
            }
            for i in 0..rows {
                let x = q.get(i, j);
                q.set(i, j, -x);
            }
        }
    }
    Ok((q, r_sq))
}

/// `m − 1·mean_row`.
pub fn center_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let means = m.column_means();
    let mut out = m.clone();
    for i in 0..out.rows() {
        out.row_mut(i).iter_mut().zip(&means).for_each(|(x, mu)| *x -= mu);
    }
    out
}

/// Scale every row to unit Euclidean norm.
///
/// Rows with norm ≤ [`EPS_NORM`] are rejected.
pub fn normalize_rows(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let len = norm(out.row(i));
        if len <= EPS_NORM {
            return Err(Error::degenerate(
                "normalize_rows",
                format!("row {i} has norm {len:e}"),
            ));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= len);
    }
    Ok(out)
}

/// Centered Gram matrix `P_c P_cᵀ` with `P_c = center_rows(P)`.
pub fn gram_centered(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    if m.rows() < 2 {
        return Err(Error::degenerate("gram_centered", "needs at least 2 rows"));
    }
    let c = center_rows(m);
    c.matmul_transpose(&c)
}

/// Upper-triangular (i < j, row-major) entries of the squared-distance RDM
/// of the row-normalized matrix. Each entry lies in `[0, 4]`.
pub fn rdm_squared(m: &FeatureMatrix) -> Result<Vec<f64>> {
    if m.rows() < 2 {
        return Err(Error::degenerate("rdm_squared", "needs at least 2 rows"));
    }
    let u = normalize_rows(m)?;
    Ok(upper_pairs(u.rows())
        .map(|(i, j)| {
            u.row(i).iter().zip(u.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect())
}

/// Index pairs `(i, j)`, `i < j`, in the order used by [`rdm_squared`].
pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Random orthogonal matrix from the QR factor of a seeded Gaussian matrix.
///
/// Columns are sign-fixed so the diagonal of the result is nonnegative,
/// which makes `d = 1` always `[[1]]`.
pub fn random_orthogonal(d: usize, seed: u64) -> FeatureMatrix {
    use rand::SeedableRng;
    random_orthogonal_with(d, &mut SimRng::seed_from_u64(seed))
}

pub fn random_orthogonal_with(d: usize, rng: &mut SimRng) -> FeatureMatrix {
    assert!(d >= 1, "dimension must be positive");
    let g = FeatureMatrix::random_normal(d, d, rng);
    // A square Gaussian matrix is full rank with probability one.
    let mut q = qr(&g).expect("square QR").0;
    for j in 0..d {
        if q.get(j, j) < 0.0 {
            for i in 0..d {
                let x = q.get(i, j);
                q.set(i, j, -x);
            }
        }
    }
    q
}
