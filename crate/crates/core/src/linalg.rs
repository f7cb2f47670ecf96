//! Dense complex linear algebra used throughout the crate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub type C64 = num_complex::Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Row-major complex matrix.
///
/// Entries are stored interleaved as `Complex64`; [`ComplexMatrix::re`] and
/// [`ComplexMatrix::im`] give the split real/imaginary views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "ComplexMatrix::from_vec",
                format!("{} entries for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_parts(rows: usize, cols: usize, re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() || re.len() != rows * cols {
            return Err(Error::shape(
                "ComplexMatrix::from_parts",
                format!("re {} / im {} for {rows}x{cols}", re.len(), im.len()),
            ));
        }
        let data = re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)).collect();
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector (`n x 1`).
    pub fn column(data: Vec<C64>) -> Self {
        let rows = data.len();
        Self {
            rows,
            cols: 1,
            data,
        }
    }

    /// Builds a matrix from equally long columns.
    pub fn from_columns(rows: usize, columns: &[Vec<C64>]) -> Result<Self> {
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::shape(
                    "ComplexMatrix::from_columns",
                    format!("column {j} has length {} != {rows}", col.len()),
                ));
            }
            for (i, v) in col.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        Ok(m)
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
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn data(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn re(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.im).collect()
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[C64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (r, x) in v.iter().enumerate() {
            self.set(r, c, *x);
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |r, j| self.get(r, idx[j]))
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r).conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// `self * diag(d)`: column `j` scaled by `d[j]`.
    pub fn mul_diag_right(&self, d: &[C64]) -> Result<Self> {
        if d.len() != self.cols {
            return Err(Error::shape(
                "mul_diag_right",
                format!("{} diagonal entries for {} columns", d.len(), self.cols),
            ));
        }
        Ok(Self::from_fn(self.rows, self.cols, |r, c| self.get(r, c) * d[c]))
    }

    pub fn frobenius_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        math::sqrt(self.frobenius_sqr())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        cmatmul(self, other)
    }

    /// `self^H * other` without materialising the conjugate transpose.
    pub fn h_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "h_matmul",
                format!("{:?}^H x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, a) in a_row.iter().enumerate() {
                let a = a.conj();
                if a == ZERO {
                    continue;
                }
                let o = &mut out.data[i * n..(i + 1) * n];
                for (oj, b) in o.iter_mut().zip(b_row) {
                    *oj += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "mul_vec",
                format!("{:?} x {}", self.shape(), x.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `self^H x`.
    pub fn h_mul_vec(&self, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "h_mul_vec",
                format!("{:?}^H x {}", self.shape(), x.len()),
            ));
        }
        let mut out = vec![ZERO; self.cols];
        for (r, xr) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a.conj() * xr;
            }
        }
        Ok(out)
    }

    /// Squared spectral norm, by power iteration on `A^H A`.
    pub fn spectral_norm_sqr(&self) -> f64 {
        if self.cols == 0 || self.rows == 0 {
            return 0.0;
        }
        // deterministic, generic start vector
        let mut v: Vec<C64> = (0..self.cols)
            .map(|i| C64::new(1.0 + 0.1 * (i % 7) as f64, 0.05 * (i % 5) as f64))
            .collect();
        let mut est = 0.0;
        for _ in 0..500 {
            let nv = norm(&v);
            if nv == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|z| *z /= nv);
            let av = self.mul_vec(&v).expect("shape");
            let w = self.h_mul_vec(&av).expect("shape");
            let next = norm(&w);
            let done = (next - est).abs() <= 1e-12 * next;
            est = next;
            v = w;
            if done {
                break;
            }
        }
        est
    }
}

/// Exact complex product `A * B`.
pub fn cmatmul(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "cmatmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, n) = (a.rows, b.cols);
    let mut out = ComplexMatrix::zeros(m, n);
    for i in 0..m {
        let o = &mut out.data[i * n..(i + 1) * n];
        for (k, av) in a.row(i).iter().enumerate() {
            if *av == ZERO {
                continue;
            }
            for (oj, bv) in o.iter_mut().zip(b.row(k)) {
                *oj += av * bv;
            }
        }
    }
    Ok(out)
}

/// `x^H y`.
pub fn inner(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm_sqr(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

pub fn norm(x: &[C64]) -> f64 {
    math::sqrt(norm_sqr(x))
}

/// Solves `A x = b` for Hermitian positive definite `A` (`n x n`, row-major)
/// by Cholesky. Returns `None` if a pivot is not strictly positive.
pub fn cholesky_solve(a: &[C64], n: usize, b: &[C64]) -> Option<Vec<C64>> {
    let mut l = vec![ZERO; n * n];
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= l[j * n + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = math::sqrt(d);
        l[j * n + j] = C64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = s / d;
        }
    }
    // forward: L y = b
    let mut y = vec![ZERO; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // backward: L^H x = y
    let mut x = vec![ZERO; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i].conj() * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Least-squares coefficients of `y` on the given atoms.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub coef: Vec<C64>,
    /// True when the Gram system was singular and a ridge term was added.
    pub ridge: bool,
}

/// Least squares `min_c ||y - sum_j c_j atoms[j]||` through the normal
/// equations, with an `eps * trace / n` ridge fallback when the Gram matrix is
/// numerically singular.
pub fn lstsq(atoms: &[Vec<C64>], y: &[C64]) -> LstsqSolution {
    let n = atoms.len();
    if n == 0 {
        return LstsqSolution {
            coef: Vec::new(),
            ridge: false,
        };
    }
    let mut gram = vec![ZERO; n * n];
    for i in 0..n {
        for j in i..n {
            let g = inner(&atoms[i], &atoms[j]);
            gram[i * n + j] = g;
            gram[j * n + i] = g.conj();
        }
    }
    let rhs: Vec<C64> = atoms.iter().map(|a| inner(a, y)).collect();
    if let Some(coef) = cholesky_solve(&gram, n, &rhs) {
        if coef.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return LstsqSolution { coef, ridge: false };
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i].re).sum();
    let eps = 1e-10 * (trace / n as f64).max(f64::MIN_POSITIVE);
    let mut g = gram.clone();
    for i in 0..n {
        g[i * n + i] += C64::new(eps, 0.0);
    }
    let coef = cholesky_solve(&g, n, &rhs).unwrap_or_else(|| vec![ZERO; n]);
    LstsqSolution { coef, ridge: true }
}
