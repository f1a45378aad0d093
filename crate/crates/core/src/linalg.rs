//! Dense real matrices and the handful of factorizations the kernels need.
//!
//! Everything is row-major `f64`. Products go through `matrixmultiply`; the
//! symmetric eigen-extremes, the PSD solve and the binary matrix format are
//! implemented here.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dimension at or below which eigenvalues come from cyclic Jacobi.
pub const JACOBI_MAX_DIM: usize = 512;

const NTKM_MAGIC: &[u8; 4] = b"NTKM";
const NTKM_VERSION: u32 = 1;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
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

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // SAFETY: all three buffers are sized for the declared shapes and strides.
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                other.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                other.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm_nt_acc(self, other, &mut out, 1.0);
        Ok(out)
    }

    /// `self · v` for a column vector.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec {:?} x {}",
                self.shape(),
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "t_matvec {:?}ᵀ x {}",
                self.shape(),
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    /// `self ⊗ I_k` in row-major block layout: entry `(i·k + a, j·k + b)` is
    /// `self[i][j]·δ_ab`.
    pub fn kron_identity(&self, k: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows * k, self.cols * k);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = self.get(i, j);
                for a in 0..k {
                    out.set(i * k + a, j * k + a, v);
                }
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four partial sums keep the reduction vectorizable.
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

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c += alpha · a · bᵀ`.
pub fn gemm_nt_acc(a: &Matrix, b: &Matrix, c: &mut Matrix, alpha: f64) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(c.shape(), (a.rows, b.rows));
    if a.rows == 0 || b.rows == 0 {
        return;
    }
    // SAFETY: shapes asserted above; b is read transposed via its strides.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.rows,
            alpha,
            a.data.as_ptr(),
            a.cols as isize,
            1,
            b.data.as_ptr(),
            1,
            b.cols as isize,
            1.0,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `c += a · aᵀ`, touching only the upper block triangle of `c` (blocks of
/// `block` rows). Call [`mirror_upper`] once accumulation is finished.
pub fn syrk_upper_acc(a: &Matrix, c: &mut Matrix, block: usize) {
    let n = a.rows;
    assert_eq!(c.shape(), (n, n));
    let k = a.cols;
    if n == 0 || k == 0 {
        return;
    }
    let block = block.max(1);
    let ap = a.data.as_ptr();
    let cp = c.data.as_mut_ptr();
    let mut i0 = 0;
    while i0 < n {
        let ib = block.min(n - i0);
        let j0 = i0;
        let jb = n - j0;
        // SAFETY: the row panel [i0, i0+ib) x [j0, n) lies inside c, and the
        // operand panels lie inside a.
        unsafe {
            matrixmultiply::dgemm(
                ib,
                k,
                jb,
                1.0,
                ap.add(i0 * k),
                k as isize,
                1,
                ap.add(j0 * k),
                1,
                k as isize,
                1.0,
                cp.add(i0 * n + j0),
                n as isize,
                1,
            );
        }
        i0 += ib;
    }
}

/// Copy the upper triangle of a square matrix onto its lower triangle.
pub fn mirror_upper(c: &mut Matrix) {
    let n = c.rows;
    assert_eq!(n, c.cols);
    for i in 0..n {
        for j in 0..i {
            c.data[i * n + j] = c.data[j * n + i];
        }
    }
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A square matrix that is symmetric to within `1e-12·max(1, |a_ij|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix(Matrix);

impl SymmetricMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {:?}",
                m.shape()
            )));
        }
        if !m.is_finite() {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let n = m.rows;
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return Err(Error::InvalidMatrix(format!(
                        "not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Take the upper triangle as authoritative and mirror it.
    pub fn from_upper(mut m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {:?}",
                m.shape()
            )));
        }
        mirror_upper(&mut m);
        Self::new(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn shifted(&self, c: f64) -> SymmetricMatrix {
        let mut m = self.0.clone();
        for i in 0..m.rows {
            m.data[i * m.cols + i] += c;
        }
        SymmetricMatrix(m)
    }

    pub fn scaled(&self, c: f64) -> SymmetricMatrix {
        SymmetricMatrix(self.0.scaled(c))
    }

    /// Mean diagonal entry; the reference scale for jitter.
    pub fn mean_diag(&self) -> f64 {
        if self.dim() == 0 {
            0.0
        } else {
            self.0.trace() / self.dim() as f64
        }
    }
}

/// Largest and smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_extremes(a: &SymmetricMatrix) -> Result<(f64, f64)> {
    let ev = eigenvalues(a)?;
    if ev.is_empty() {
        return Err(Error::ShapeMismatch("empty matrix has no eigenvalues".into()));
    }
    let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max, min))
}

/// All eigenvalues (unsorted): cyclic Jacobi up to [`JACOBI_MAX_DIM`],
/// Householder tridiagonalization plus implicit QL above.
pub fn eigenvalues(a: &SymmetricMatrix) -> Result<Vec<f64>> {
    if !a.0.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }
    if a.dim() <= JACOBI_MAX_DIM {
        jacobi_eigenvalues(a)
    } else {
        tridiagonal_eigenvalues(a)
    }
}

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
pub fn jacobi_eigenvalues(a: &SymmetricMatrix) -> Result<Vec<f64>> {
    const MAX_SWEEPS: usize = 100;
    let n = a.dim();
    let mut m = a.0.data.clone();
    let mut d: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q].abs();
            }
        }
        if off == 0.0 {
            return Ok(d);
        }
        let thresh = if sweep < 3 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                let g = 100.0 * apq.abs();
                if sweep > 3 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    m[p * n + q] = 0.0;
                    continue;
                }
                if apq.abs() <= thresh {
                    continue;
                }
                let h = d[q] - d[p];
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;
                z[p] -= h;
                z[q] += h;
                d[p] -= h;
                d[q] += h;
                m[p * n + q] = 0.0;
                // Upper triangle only: (j, p) with j < p, (p, j) with p < j < q, ...
                let rot = |m: &mut [f64], i1: usize, j1: usize, i2: usize, j2: usize| {
                    let g = m[i1 * n + j1];
                    let h = m[i2 * n + j2];
                    m[i1 * n + j1] = g - s * (h + g * tau);
                    m[i2 * n + j2] = h + s * (g - h * tau);
                };
                for j in 0..p {
                    rot(&mut m, j, p, j, q);
                }
                for j in p + 1..q {
                    rot(&mut m, p, j, j, q);
                }
                for j in q + 1..n {
                    rot(&mut m, p, j, q, j);
                }
            }
        }
        for p in 0..n {
            b[p] += z[p];
            d[p] = b[p];
            z[p] = 0.0;
        }
    }
    Err(Error::NoConvergence(format!(
        "Jacobi did not converge in {MAX_SWEEPS} sweeps (n = {n})"
    )))
}

/// Householder reduction to tridiagonal form followed by implicit QL.
pub fn tridiagonal_eigenvalues(a: &SymmetricMatrix) -> Result<Vec<f64>> {
    let n = a.dim();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut m = a.0.data.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    let at = |i: usize, j: usize| i * n + j;

    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| m[at(i, k)].abs()).sum();
            if scale == 0.0 {
                e[i] = m[at(i, l)];
            } else {
                for k in 0..=l {
                    m[at(i, k)] /= scale;
                    h += m[at(i, k)] * m[at(i, k)];
                }
                let f = m[at(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                m[at(i, l)] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += m[at(j, k)] * m[at(i, k)];
                    }
                    for k in j + 1..=l {
                        g += m[at(k, j)] * m[at(i, k)];
                    }
                    e[j] = g / h;
                    f += e[j] * m[at(i, j)];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = m[at(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        m[at(j, k)] -= f * e[k] + g * m[at(i, k)];
                    }
                }
            }
        } else {
            e[i] = m[at(i, l)];
        }
        d[i] = h;
    }
    for i in 0..n {
        d[i] = m[at(i, i)];
    }

    // Implicit QL on (d, e).
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut mm = l;
            while mm < n - 1 {
                let dd = d[mm].abs() + d[mm + 1].abs();
                if e[mm].abs() <= f64::EPSILON * dd {
                    break;
                }
                mm += 1;
            }
            if mm == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::NoConvergence(format!(
                    "implicit QL stalled at index {l} (n = {n})"
                )));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[mm] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = mm;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[mm] = 0.0;
                    deflated = true;
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
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[mm] = 0.0;
        }
    }
    Ok(d)
}

/// Lower Cholesky factor of `K + jitter·I`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    l: Matrix,
    jitter: f64,
}

const CHOL_BLOCK: usize = 64;

impl CholeskyFactor {
    /// Factor `K + jitter·I`, escalating the jitter ×10 (from `1e-12·mean
    /// diag` when starting at zero) until it reaches `1e-4·trace(K)/dim`.
    pub fn new(k: &SymmetricMatrix, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0) || !jitter.is_finite() {
            return Err(Error::InvalidMatrix(format!("jitter must be >= 0, got {jitter}")));
        }
        if !k.0.is_finite() {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let mut scale = k.mean_diag();
        if !(scale > 0.0) {
            scale = 1.0;
        }
        let cap = 1e-4 * scale;
        let mut j = jitter;
        loop {
            if let Some(l) = Self::try_factor(k, j) {
                return Ok(Self { l, jitter: j });
            }
            if j >= cap {
                return Err(Error::SingularKernel { attempted_jitter: j });
            }
            j = if j == 0.0 {
                1e-12 * scale
            } else {
                (j * 10.0).min(cap)
            };
        }
    }

    fn try_factor(k: &SymmetricMatrix, jitter: f64) -> Option<Matrix> {
        let n = k.dim();
        let mut a = k.0.clone();
        let mut max_diag = 0.0f64;
        for i in 0..n {
            a.data[i * n + i] += jitter;
            max_diag = max_diag.max(a.data[i * n + i].abs());
        }
        let tol = f64::EPSILON * max_diag;
        if !cholesky_in_place(&mut a.data, n, tol) {
            return None;
        }
        for i in 0..n {
            for j in i + 1..n {
                a.data[i * n + j] = 0.0;
            }
        }
        Some(a)
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// The jitter that was actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Solve `L·Y = B`.
    pub fn forward(&self, b: &Matrix) -> Result<Matrix> {
        self.check_rhs(b)?;
        let mut y = b.clone();
        forward_subst(&self.l, &mut y);
        Ok(y)
    }

    /// Solve `(K + jitter·I)·X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        self.check_rhs(b)?;
        let mut x = b.clone();
        forward_subst(&self.l, &mut x);
        backward_subst_t(&self.l, &mut x);
        Ok(x)
    }

    fn check_rhs(&self, b: &Matrix) -> Result<()> {
        if b.rows != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "rhs has {} rows, factor has dim {}",
                b.rows,
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Solve `(K + jitter·I)·X = B` for PSD `K`.
pub fn solve_psd(k: &SymmetricMatrix, b: &Matrix, jitter: f64) -> Result<Matrix> {
    if b.rows != k.dim() {
        return Err(Error::ShapeMismatch(format!(
            "rhs has {} rows, kernel has dim {}",
            b.rows,
            k.dim()
        )));
    }
    CholeskyFactor::new(k, jitter)?.solve(b)
}

/// Right-looking blocked Cholesky on the lower triangle of a row-major
/// buffer. Returns false on a pivot at or below `tol`.
fn cholesky_in_place(a: &mut [f64], n: usize, tol: f64) -> bool {
    let mut k0 = 0;
    while k0 < n {
        let kb = CHOL_BLOCK.min(n - k0);
        let k1 = k0 + kb;
        for j in k0..k1 {
            let mut d = a[j * n + j];
            for m in k0..j {
                d -= a[j * n + m] * a[j * n + m];
            }
            if !(d > tol) || !d.is_finite() {
                return false;
            }
            let ljj = d.sqrt();
            a[j * n + j] = ljj;
            for i in j + 1..k1 {
                let mut s = a[i * n + j];
                for m in k0..j {
                    s -= a[i * n + m] * a[j * n + m];
                }
                a[i * n + j] = s / ljj;
            }
        }
        for i in k1..n {
            for j in k0..k1 {
                let mut s = a[i * n + j];
                for m in k0..j {
                    s -= a[i * n + m] * a[j * n + m];
                }
                a[i * n + j] = s / a[j * n + j];
            }
        }
        let p = a.as_mut_ptr();
        let mut r0 = k1;
        while r0 < n {
            let r1 = (r0 + CHOL_BLOCK).min(n);
            // SAFETY: the updated block has columns >= k1 while both operands
            // read columns [k0, k1), so source and destination never overlap.
            unsafe {
                matrixmultiply::dgemm(
                    r1 - r0,
                    kb,
                    r1 - k1,
                    -1.0,
                    p.add(r0 * n + k0),
                    n as isize,
                    1,
                    p.add(k1 * n + k0),
                    1,
                    n as isize,
                    1.0,
                    p.add(r0 * n + k1),
                    n as isize,
                    1,
                );
            }
            r0 = r1;
        }
        k0 = k1;
    }
    true
}

fn forward_subst(l: &Matrix, b: &mut Matrix) {
    let n = l.rows;
    let m = b.cols;
    if m == 0 {
        return;
    }
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + CHOL_BLOCK).min(n);
        if i0 > 0 {
            let bp = b.data.as_mut_ptr();
            // SAFETY: reads rows [0, i0) of b, writes rows [i0, i1).
            unsafe {
                matrixmultiply::dgemm(
                    i1 - i0,
                    i0,
                    m,
                    -1.0,
                    l.data.as_ptr().add(i0 * n),
                    n as isize,
                    1,
                    bp,
                    m as isize,
                    1,
                    1.0,
                    bp.add(i0 * m),
                    m as isize,
                    1,
                );
            }
        }
        for i in i0..i1 {
            let (done, rest) = b.data.split_at_mut(i * m);
            let row = &mut rest[..m];
            for j in i0..i {
                let lij = l.data[i * n + j];
                if lij != 0.0 {
                    axpy(-lij, &done[j * m..(j + 1) * m], row);
                }
            }
            let inv = 1.0 / l.data[i * n + i];
            row.iter_mut().for_each(|v| *v *= inv);
        }
        i0 = i1;
    }
}

fn backward_subst_t(l: &Matrix, b: &mut Matrix) {
    let n = l.rows;
    let m = b.cols;
    if m == 0 || n == 0 {
        return;
    }
    let mut i1 = n;
    while i1 > 0 {
        let i0 = i1.saturating_sub(CHOL_BLOCK);
        if i1 < n {
            let bp = b.data.as_mut_ptr();
            // SAFETY: reads rows [i1, n) of b, writes rows [i0, i1). The
            // operand is Lᵀ restricted to rows [i0, i1) and columns [i1, n).
            unsafe {
                matrixmultiply::dgemm(
                    i1 - i0,
                    n - i1,
                    m,
                    -1.0,
                    l.data.as_ptr().add(i1 * n + i0),
                    1,
                    n as isize,
                    bp.add(i1 * m),
                    m as isize,
                    1,
                    1.0,
                    bp.add(i0 * m),
                    m as isize,
                    1,
                );
            }
        }
        for i in (i0..i1).rev() {
            let (head, tail) = b.data.split_at_mut((i + 1) * m);
            let row = &mut head[i * m..];
            for j in i + 1..i1 {
                let lji = l.data[j * n + i];
                if lji != 0.0 {
                    axpy(-lji, &tail[(j - i - 1) * m..(j - i) * m], row);
                }
            }
            let inv = 1.0 / l.data[i * n + i];
            row.iter_mut().for_each(|v| *v *= inv);
        }
        i1 = i0;
    }
}

/// Write a matrix in the `NTKM` binary format.
pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(NTKM_MAGIC)?;
    w.write_all(&NTKM_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NTKM_MAGIC {
        return Err(Error::Format(format!("bad matrix magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != NTKM_VERSION {
        return Err(Error::Format(format!("unsupported matrix version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("matrix shape {rows}x{cols} overflows")))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated payload for {rows}x{cols} matrix"))
        }
        _ => Error::Io(e),
    })?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    read_matrix(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        SymmetricMatrix::new(m).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut k = a.matmul_t(&a).unwrap();
        for i in 0..n {
            k.set(i, i, k.get(i, i) + 1.0);
        }
        SymmetricMatrix::from_upper(k).unwrap()
    }

    /// Classical Jacobi: always rotate the largest off-diagonal entry, full
    /// two-sided update. Deliberately naive and independent of the cyclic code.
    fn classical_jacobi_oracle(a: &SymmetricMatrix) -> Vec<f64> {
        let n = a.dim();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.matrix().row(i).to_vec()).collect();
        for _ in 0..10_000 {
            let (mut p, mut q, mut big) = (0, 1, 0.0);
            for i in 0..n {
                for j in i + 1..n {
                    if m[i][j].abs() > big {
                        big = m[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if big < 1e-15 {
                break;
            }
            let phi = 0.5 * (2.0 * m[p][q]).atan2(m[q][q] - m[p][p]);
            let (s, c) = phi.sin_cos();
            // Rotation R = I except R[p][p]=c, R[p][q]=s, R[q][p]=-s, R[q][q]=c; M <- Rᵀ M R
            let mut r = vec![vec![0.0; n]; n];
            for i in 0..n {
                r[i][i] = 1.0;
            }
            r[p][p] = c;
            r[q][q] = c;
            r[p][q] = s;
            r[q][p] = -s;
            let mut tmp = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    tmp[i][j] = (0..n).map(|k| m[i][k] * r[k][j]).sum();
                }
            }
            for i in 0..n {
                for j in 0..n {
                    m[i][j] = (0..n).map(|k| r[k][i] * tmp[k][j]).sum();
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Gaussian elimination with partial pivoting on an augmented copy.
    fn gauss_oracle(k: &Matrix, b: &Matrix) -> Matrix {
        let n = k.rows();
        let m = b.cols();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = k.row(i).to_vec();
                r.extend_from_slice(b.row(i));
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n + m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
        let mut x = Matrix::zeros(n, m);
        for c in 0..m {
            for i in (0..n).rev() {
                let mut s = a[i][n + c];
                for j in i + 1..n {
                    s -= a[i][j] * x.get(j, c);
                }
                x.set(i, c, s / a[i][i]);
            }
        }
        x
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn identity_extremes() {
        let (max, min) = sym_eig_extremes(&SymmetricMatrix::identity(2)).unwrap();
        assert_eq!((max, min), (1.0, 1.0));
    }

    #[test]
    fn diagonal_extremes() {
        let d = SymmetricMatrix::new(Matrix::from_diag(&[3.0, 1.0, 0.5])).unwrap();
        assert_eq!(sym_eig_extremes(&d).unwrap(), (3.0, 0.5));
    }

    #[test]
    fn random_6x6_matches_classical_jacobi() {
        for seed in 0..5 {
            let a = random_symmetric(6, seed);
            let oracle = classical_jacobi_oracle(&a);
            let cyclic = sorted(jacobi_eigenvalues(&a).unwrap());
            let ql = sorted(tridiagonal_eigenvalues(&a).unwrap());
            for i in 0..6 {
                assert!((cyclic[i] - oracle[i]).abs() < 1e-9, "{cyclic:?} vs {oracle:?}");
                assert!((ql[i] - oracle[i]).abs() < 1e-9, "{ql:?} vs {oracle:?}");
            }
            let (max, min) = sym_eig_extremes(&a).unwrap();
            assert!((max - oracle[5]).abs() < 1e-9);
            assert!((min - oracle[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobi_and_ql_agree_on_larger_matrices() {
        let a = random_symmetric(60, 42);
        let j = sorted(jacobi_eigenvalues(&a).unwrap());
        let q = sorted(tridiagonal_eigenvalues(&a).unwrap());
        for (x, y) in j.iter().zip(&q) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn large_dimension_uses_ql_route() {
        let k = random_spd(JACOBI_MAX_DIM + 40, 3);
        let (max, min) = sym_eig_extremes(&k).unwrap();
        // A·Aᵀ + I has λmin ≥ 1 and λmax ≤ trace.
        assert!(min >= 1.0 - 1e-9);
        assert!(max <= k.matrix().trace());
        let frob = frobenius_norm(k.matrix());
        assert!(max <= frob + 1e-9);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut m = Matrix::identity(3);
        m.set(1, 1, f64::NAN);
        assert!(matches!(SymmetricMatrix::new(m), Err(Error::InvalidMatrix(_))));
        assert!(matches!(
            SymmetricMatrix::new(Matrix::zeros(2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn solve_identity_and_scaled_identity() {
        let b = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        let x = solve_psd(&SymmetricMatrix::identity(3), &b, 0.0).unwrap();
        assert_eq!(x, b);
        let k = SymmetricMatrix::new(Matrix::identity(2).scaled(2.0)).unwrap();
        let x = solve_psd(&k, &Matrix::from_fn(2, 2, |_, _| 1.0), 0.0).unwrap();
        for v in x.as_slice() {
            assert!((v - 0.5).abs() <= 1e-15);
        }
    }

    #[test]
    fn random_spd_matches_gaussian_elimination() {
        let k = random_spd(8, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = Matrix::from_fn(8, 3, |_, _| rng.gen_range(-2.0..2.0));
        let x = solve_psd(&k, &b, 0.0).unwrap();
        let oracle = gauss_oracle(k.matrix(), &b);
        for (a, o) in x.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - o).abs() < 1e-9, "{a} vs {o}");
        }
    }

    #[test]
    fn blocked_solve_residual() {
        // Larger than one Cholesky block so the gemm paths run.
        let n = 3 * CHOL_BLOCK + 17;
        let k = random_spd(n, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = Matrix::from_fn(n, 5, |_, _| rng.gen_range(-1.0..1.0));
        let x = solve_psd(&k, &b, 0.0).unwrap();
        let r = k.matrix().matmul(&x).unwrap().sub(&b).unwrap();
        assert!(frobenius_norm(&r) <= 1e-8 * frobenius_norm(&b));
    }

    #[test]
    fn jitter_escalates_on_singular_kernel() {
        // Rank one: v·vᵀ.
        let v = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = SymmetricMatrix::from_upper(v.matmul_t(&v).unwrap()).unwrap();
        let f = CholeskyFactor::new(&k, 0.0).unwrap();
        assert!(f.jitter() > 0.0);
        assert!(f.jitter() <= 1e-4 * k.mean_diag());
    }

    #[test]
    fn indefinite_kernel_reports_attempted_jitter() {
        let k = SymmetricMatrix::new(Matrix::from_diag(&[1.0, -1.0])).unwrap();
        match CholeskyFactor::new(&k, 1e-10) {
            Err(Error::SingularKernel { attempted_jitter }) => {
                assert!(attempted_jitter > 1e-10);
            }
            other => panic!("expected SingularKernel, got {other:?}"),
        }
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::identity(4)), 2.0);
        assert_eq!(frobenius_norm(&Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()), 5.0);
    }

    #[test]
    fn syrk_matches_full_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_fn(37, 23, |_, _| rng.gen_range(-1.0..1.0));
        let mut c = Matrix::zeros(37, 37);
        syrk_upper_acc(&a, &mut c, 8);
        mirror_upper(&mut c);
        let full = a.matmul_t(&a).unwrap();
        for (x, y) in c.as_slice().iter().zip(full.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ntkm_round_trip_and_rejects_garbage() {
        let m = Matrix::from_fn(3, 4, |i, j| i as f64 * 0.1 - j as f64);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"NTKM");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 12 * 8);
        assert_eq!(read_matrix(&mut buf.as_slice()).unwrap(), m);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_matrix(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_matrix(&mut &short[..]), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shift_moves_extremes_by_c(seed in any::<u64>(), n in 2usize..12, c in -50.0f64..50.0) {
            let a = random_symmetric(n, seed);
            let (max, min) = sym_eig_extremes(&a).unwrap();
            let (smax, smin) = sym_eig_extremes(&a.shifted(c)).unwrap();
            prop_assert!((smax - max - c).abs() < 1e-9);
            prop_assert!((smin - min - c).abs() < 1e-9);
        }

        #[test]
        fn solve_recovers_planted_solution(seed in any::<u64>(), n in 1usize..40) {
            let k = random_spd(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x0 = Matrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
            let b = k.matrix().matmul(&x0).unwrap();
            let x = solve_psd(&k, &b, 0.0).unwrap();
            let err = frobenius_norm(&x.sub(&x0).unwrap()) / frobenius_norm(&x0).max(1e-300);
            prop_assert!(err < 1e-8);
        }

        #[test]
        fn kron_lift_scales_frobenius(seed in any::<u64>(), o in 1usize..6) {
            let a = random_symmetric(4, seed);
            let lifted = a.matrix().kron_identity(o);
            let lhs = frobenius_norm(&lifted);
            let rhs = (o as f64).sqrt() * frobenius_norm(a.matrix());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }
}
