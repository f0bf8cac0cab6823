//! Dense row-major matrices and a symmetric eigensolver.
//!
//! The eigensolver follows the classic route: Householder reduction to
//! tridiagonal form, implicit QL for the eigenvalues, then inverse iteration on
//! the tridiagonal for only the eigenvectors that are requested, transformed
//! back through the stored reflectors. Spectral clustering needs the bottom few
//! eigenvectors of a dense `n × n` Laplacian, so paying `O(n²)` per vector
//! instead of accumulating the full `O(n³)` basis matters.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is not symmetric (entry ({row}, {col}) differs by {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("non-finite entry in matrix")]
    NonFinite,
    #[error("QL iteration did not converge for eigenvalue {0}")]
    NoConvergence(usize),
    #[error("eigenvalue index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a `0 × 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|a_ij - a_ji|`, or an error for non-square input.
    pub fn asymmetry(&self) -> Result<f64, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::Shape(format!(
                "{}x{} matrix is not square",
                self.rows, self.cols
            )));
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        Ok(worst)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Dot product with independent partial sums so the loop vectorises.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Median with the lower-of-two-middles convention for even lengths.
/// Returns `None` for empty input. NaNs sort last.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let mid = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Some(*m)
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky
/// factorisation. Fails with `NotPositiveDefinite` on a non-positive pivot.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(LinalgError::Shape(format!("{}x{} system with {} right-hand sides", n, a.cols(), b.len())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if !(d > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / djj;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[(i, k)] * y[k]).sum::<f64>()) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[(k, i)] * x[k]).sum::<f64>()) / l[(i, i)];
    }
    Ok(x)
}

struct Reflector {
    /// Reflector acts on indices `offset..n`.
    offset: usize,
    v: Vec<f64>,
    beta: f64,
}

/// Eigen-decomposition of a real symmetric matrix.
pub struct SymmetricEigen {
    n: usize,
    diag: Vec<f64>,
    off: Vec<f64>,
    reflectors: Vec<Reflector>,
    /// Ascending eigenvalues paired with the unreduced block they belong to.
    spectrum: Vec<(f64, usize)>,
    blocks: Vec<(usize, usize)>,
    scale: f64,
}

impl SymmetricEigen {
    /// Tridiagonalises `a` and computes all eigenvalues. `a` must be symmetric
    /// to within `1e-9 · max|a_ij|`.
    pub fn new(a: &Matrix) -> Result<Self, LinalgError> {
        let n = a.rows();
        let asym = a.asymmetry()?;
        if !a.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if asym > 1e-9 * scale.max(1.0) {
            let (row, col) = worst_asymmetric_entry(a);
            return Err(LinalgError::NotSymmetric {
                row,
                col,
                diff: asym,
            });
        }
        let (diag, off, reflectors) = tridiagonalize(a);
        let tnorm = diag
            .iter()
            .map(|d| d.abs())
            .chain(off.iter().map(|e| e.abs()))
            .fold(0.0f64, f64::max);

        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 0..n.saturating_sub(1) {
            let tol = f64::EPSILON * (diag[i].abs() + diag[i + 1].abs()).max(tnorm * 1e-3);
            if off[i].abs() <= tol {
                blocks.push((start, i + 1 - start));
                start = i + 1;
            }
        }
        if n > 0 {
            blocks.push((start, n - start));
        }
        let mut off = off;
        for &(s, len) in &blocks {
            if s + len < n {
                off[s + len - 1] = 0.0;
            }
        }

        let mut spectrum = Vec::with_capacity(n);
        for (b, &(s, len)) in blocks.iter().enumerate() {
            let mut d = diag[s..s + len].to_vec();
            let mut e = vec![0.0; len];
            e[..len - 1].copy_from_slice(&off[s..s + len - 1]);
            tql_eigenvalues(&mut d, &mut e).map_err(|i| LinalgError::NoConvergence(s + i))?;
            spectrum.extend(d.into_iter().map(|v| (v, b)));
        }
        spectrum.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        Ok(Self {
            n,
            diag,
            off,
            reflectors,
            spectrum,
            blocks,
            scale: tnorm,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// All eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.spectrum.iter().map(|&(v, _)| v).collect()
    }

    /// Unit eigenvectors for the ascending-order eigenvalue positions in
    /// `which`, returned as columns of an `n × which.len()` matrix.
    pub fn eigenvectors(&self, which: &[usize]) -> Result<Matrix, LinalgError> {
        for &w in which {
            if w >= self.n {
                return Err(LinalgError::IndexOutOfRange {
                    index: w,
                    dim: self.n,
                });
            }
        }
        // Process in ascending order so each vector can be orthogonalised
        // against close neighbours already computed in the same block.
        let mut order: Vec<usize> = (0..which.len()).collect();
        order.sort_by_key(|&c| which[c]);

        let cluster_gap = 1e-3 * self.scale.max(f64::MIN_POSITIVE);
        let mut done: Vec<(f64, usize, Vec<f64>)> = Vec::new();
        let mut out = Matrix::zeros(self.n, which.len());
        for c in order {
            let (lambda, block) = self.spectrum[which[c]];
            let (s, len) = self.blocks[block];
            let mut shift = lambda;
            // Nudge repeated shifts apart so the LU solves differ.
            for (prev, pb, _) in done.iter().rev() {
                if *pb == block && (shift - prev).abs() <= 10.0 * f64::EPSILON * self.scale {
                    shift = prev + 10.0 * f64::EPSILON * self.scale.max(1e-300);
                }
            }
            let neighbours: Vec<&[f64]> = done
                .iter()
                .filter(|(v, b, _)| *b == block && (lambda - v).abs() <= cluster_gap)
                .map(|(_, _, x)| x.as_slice())
                .collect();
            let local = self.inverse_iteration(s, len, shift, &neighbours, which[c] as u64);
            done.push((lambda, block, local.clone()));

            let mut full = vec![0.0; self.n];
            full[s..s + len].copy_from_slice(&local);
            self.back_transform(&mut full);
            for (i, v) in full.into_iter().enumerate() {
                out[(i, c)] = v;
            }
        }
        Ok(out)
    }

    fn inverse_iteration(
        &self,
        s: usize,
        len: usize,
        shift: f64,
        neighbours: &[&[f64]],
        salt: u64,
    ) -> Vec<f64> {
        if len == 1 {
            return vec![1.0];
        }
        let d = &self.diag[s..s + len];
        let e = &self.off[s..s + len - 1];
        let lu = TridiagonalLu::factor(d, e, shift, self.scale);

        let mut state = 0x2545_F491_4F6C_DD1D ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut x: Vec<f64> = (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        for _ in 0..5 {
            orthogonalize(&mut x, neighbours);
            normalize(&mut x);
            lu.solve(&mut x);
            orthogonalize(&mut x, neighbours);
            normalize(&mut x);
        }
        x
    }

    fn back_transform(&self, x: &mut [f64]) {
        for r in self.reflectors.iter().rev() {
            let tail = &mut x[r.offset..];
            let t = r.beta * dot(&r.v, tail);
            axpy(-t, &r.v, tail);
        }
    }
}

fn worst_asymmetric_entry(a: &Matrix) -> (usize, usize) {
    let mut best = (0, 0, 0.0f64);
    for i in 0..a.rows() {
        for j in 0..i {
            let d = (a[(i, j)] - a[(j, i)]).abs();
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    (best.0, best.1)
}

fn orthogonalize(x: &mut [f64], against: &[&[f64]]) {
    for _ in 0..2 {
        for u in against {
            let p = dot(x, u);
            axpy(-p, u, x);
        }
    }
}

fn normalize(x: &mut [f64]) {
    let nrm = norm(x);
    if nrm > 0.0 && nrm.is_finite() {
        x.iter_mut().for_each(|v| *v /= nrm);
    } else {
        let len = x.len() as f64;
        x.iter_mut().for_each(|v| *v = 1.0 / len.sqrt());
    }
}

/// Householder reduction of a symmetric matrix. Only the lower triangle of the
/// working copy is read or written.
fn tridiagonalize(a: &Matrix) -> (Vec<f64>, Vec<f64>, Vec<Reflector>) {
    let n = a.rows();
    let mut w = a.clone();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];
    let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
    let mut p = vec![0.0; n];

    for k in 0..n.saturating_sub(1) {
        diag[k] = w[(k, k)];
        let m = n - k - 1;
        // Column k below the diagonal, read from the lower triangle.
        let mut v: Vec<f64> = (k + 1..n).map(|r| w[(r, k)]).collect();
        let tail_sq: f64 = v[1..].iter().map(|x| x * x).sum();
        if m == 1 || tail_sq == 0.0 {
            off[k] = v[0];
            continue;
        }
        let norm_x = (v[0] * v[0] + tail_sq).sqrt();
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        off[k] = alpha;
        v[0] -= alpha;
        let vv = v[0] * v[0] + tail_sq;
        let beta = 2.0 / vv;

        // p = beta * B v using the lower triangle of the trailing block B.
        let p = &mut p[..m];
        p.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m {
            let r = k + 1 + i;
            let row = &w.row(r)[k + 1..=r];
            p[i] += dot(&row[..=i], &v[..=i]);
            let vi = v[i];
            axpy(vi, &row[..i], &mut p[..i]);
        }
        p.iter_mut().for_each(|x| *x *= beta);
        let kcoef = 0.5 * beta * dot(p, &v);
        // p becomes w = p - K v
        axpy(-kcoef, &v, p);

        for i in 0..m {
            let r = k + 1 + i;
            let (vi, wi) = (v[i], p[i]);
            let row = &mut w.row_mut(r)[k + 1..=r];
            for j in 0..=i {
                row[j] -= vi * p[j] + wi * v[j];
            }
        }
        reflectors.push(Reflector {
            offset: k + 1,
            v,
            beta,
        });
    }
    if n > 0 {
        diag[n - 1] = w[(n - 1, n - 1)];
    }
    (diag, off, reflectors)
}

/// Implicit QL on a symmetric tridiagonal (eigenvalues only). `e[i]` couples
/// `d[i]` and `d[i+1]`; `e` must have the same length as `d` with a trailing
/// zero. On failure returns the index whose eigenvalue did not converge.
fn tql_eigenvalues(d: &mut [f64], e: &mut [f64]) -> Result<(), usize> {
    let n = d.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(l);
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
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
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// LU factorisation with partial pivoting of `T - shift·I` for tridiagonal `T`.
struct TridiagonalLu {
    /// Upper factor diagonals: u0 (main), u1, u2 (second superdiagonal from pivoting).
    u0: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    mult: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn factor(d: &[f64], e: &[f64], shift: f64, scale: f64) -> Self {
        let n = d.len();
        let tiny = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
        let mut u0: Vec<f64> = d.iter().map(|x| x - shift).collect();
        let mut u1: Vec<f64> = e.to_vec();
        u1.push(0.0);
        let mut u2 = vec![0.0; n];
        let mut mult = vec![0.0; n];
        let mut swapped = vec![false; n];
        // `lower` is the current subdiagonal entry below the pivot.
        for i in 0..n - 1 {
            let lower = e[i];
            let next_diag = u0[i + 1];
            let next_super = if i + 2 < n { e[i + 1] } else { 0.0 };
            if lower.abs() > u0[i].abs() {
                // Swap rows i and i+1.
                swapped[i] = true;
                let m = u0[i] / lower;
                mult[i] = m;
                let (a0, a1, a2) = (lower, next_diag, next_super);
                let (b1, b2) = (u1[i], 0.0);
                u0[i] = a0;
                u1[i] = a1;
                u2[i] = a2;
                u0[i + 1] = b1 - m * a1;
                if i + 1 < n - 1 {
                    u1[i + 1] = b2 - m * a2;
                }
            } else {
                let piv = if u0[i] == 0.0 { tiny } else { u0[i] };
                u0[i] = piv;
                let m = lower / piv;
                mult[i] = m;
                u0[i + 1] = next_diag - m * u1[i];
                u2[i] = 0.0;
            }
        }
        if u0[n - 1] == 0.0 {
            u0[n - 1] = tiny;
        }
        for v in u0.iter_mut() {
            if v.abs() < tiny {
                *v = tiny.copysign(*v);
            }
        }
        Self {
            u0,
            u1,
            u2,
            mult,
            swapped,
        }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n - 1 {
            if self.swapped[i] {
                b.swap(i, i + 1);
            }
            b[i + 1] -= self.mult[i] * b[i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= self.u1[i] * b[i + 1];
            }
            if i + 2 < n {
                s -= self.u2[i] * b[i + 2];
            }
            b[i] = s / self.u0[i];
        }
        // Rescale to avoid overflow across repeated near-singular solves.
        let m = b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 && m.is_finite() {
            b.iter_mut().for_each(|v| *v /= m);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    /// Cyclic Jacobi rotations: slow but independent of the Householder/QL path.
    fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let mut m = a.clone();
        for _sweep in 0..100 {
            let mut offn = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        offn += m[(i, j)] * m[(i, j)];
                    }
                }
            }
            if offn < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if m[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::rng_from(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    fn residual(a: &Matrix, lambda: f64, v: &[f64]) -> f64 {
        let n = a.rows();
        (0..n)
            .map(|i| (dot(a.row(i), v) - lambda * v[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn eigenvalues_match_jacobi() {
        for (n, seed) in [(1, 1), (2, 2), (3, 3), (7, 4), (20, 5), (41, 6)] {
            let a = random_symmetric(n, seed);
            let eig = SymmetricEigen::new(&a).unwrap();
            let ours = eig.eigenvalues();
            let oracle = jacobi_eigenvalues(&a);
            for (x, y) in ours.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-10, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn eigenvectors_have_small_residual_and_are_orthonormal() {
        let a = random_symmetric(60, 9);
        let eig = SymmetricEigen::new(&a).unwrap();
        let which: Vec<usize> = (0..60).collect();
        let v = eig.eigenvectors(&which).unwrap();
        let vals = eig.eigenvalues();
        for (c, &lambda) in vals.iter().enumerate() {
            let col = v.column(c);
            assert!(residual(&a, lambda, &col) < 1e-9);
        }
        let g = v.transpose().matmul(&v).unwrap();
        for i in 0..60 {
            for j in 0..60 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn repeated_eigenvalues_give_orthogonal_basis() {
        // Two identical disconnected blocks: every eigenvalue has multiplicity 2.
        let b = [[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]];
        let mut a = Matrix::zeros(6, 6);
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] = b[i][j];
                a[(i + 3, j + 3)] = b[i][j];
            }
        }
        let eig = SymmetricEigen::new(&a).unwrap();
        let v = eig.eigenvectors(&[0, 1, 2, 3, 4, 5]).unwrap();
        let g = v.transpose().matmul(&v).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-9, "{i},{j}: {}", g[(i, j)]);
            }
        }
        let vals = eig.eigenvalues();
        for (c, &lambda) in vals.iter().enumerate() {
            assert!(residual(&a, lambda, &v.column(c)) < 1e-9);
        }
    }

    #[test]
    fn rejects_asymmetric_input() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            SymmetricEigen::new(&a),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn cholesky_small_system() {
        let a = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let x = cholesky_solve(&a, &[2.0, 5.0]).unwrap();
        assert!((x[0] + 0.5).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
        let bad = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_solve(&bad, &[1.0, 1.0]), Err(LinalgError::NotPositiveDefinite { pivot: 1 })));
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[0.9, 0.2, 1.0, 0.5]), Some(0.5));
        assert_eq!(lower_median(&[0.9, 0.2, 0.5]), Some(0.5));
        assert_eq!(lower_median(&[]), None);
    }
}
