//! Orthogonal matching pursuit over explicit or Kronecker-structured atom
//! sets, the one-shot OMP estimator and the DnCNN-OMP pipeline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{lstsq, norm, ComplexMatrix, C64, ZERO};
use crate::math;
use crate::polar::PolarDictionary;
use crate::stage1::{estimate_support, DenoiserParams};
use crate::stage2::{project, reconstruct, sensing_matrix, Projection};

/// Residual threshold relative to `||y||` that halts the greedy loop.
pub const EARLY_STOP: f64 = 1e-8;

pub trait AtomSet {
    /// Length of each atom.
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn atom(&self, g: usize) -> Vec<C64>;
    fn atom_norm(&self, g: usize) -> f64;
    /// `a_g^H r` for every atom.
    fn correlate(&self, r: &[C64]) -> Result<Vec<C64>>;
}

/// Columns of a dense matrix.
pub struct ExplicitAtoms<'a> {
    a: &'a ComplexMatrix,
    norms: Vec<f64>,
}

impl<'a> ExplicitAtoms<'a> {
    pub fn new(a: &'a ComplexMatrix) -> Self {
        let norms = (0..a.cols()).map(|c| norm(&a.col(c))).collect();
        Self { a, norms }
    }
}

impl AtomSet for ExplicitAtoms<'_> {
    fn dim(&self) -> usize {
        self.a.rows()
    }
    fn len(&self) -> usize {
        self.a.cols()
    }
    fn atom(&self, g: usize) -> Vec<C64> {
        self.a.col(g)
    }
    fn atom_norm(&self, g: usize) -> f64 {
        self.norms[g]
    }
    fn correlate(&self, r: &[C64]) -> Result<Vec<C64>> {
        self.a.h_mul_vec(r)
    }
}

/// `vec(Y) = sum_g c_g vec(F_N[:,i] (F[:,j]^H E))` with `g = i + N_G j`,
/// `vec` stacking columns. The `(N tau) x (N_G M_G')` matrix is never formed.
pub struct VectorizedProblem {
    pub y: Vec<C64>,
    f_n: ComplexMatrix,
    /// `E^H F`, `tau x M_G'`.
    psi: ComplexMatrix,
    f_n_norms: Vec<f64>,
    psi_norms: Vec<f64>,
}

impl VectorizedProblem {
    pub fn new(y: &ComplexMatrix, f_n: &ComplexMatrix, f: &ComplexMatrix, e: &ComplexMatrix) -> Result<Self> {
        if y.rows() != f_n.rows() || y.cols() != e.cols() || e.rows() != f.rows() {
            return Err(Error::shape(
                "VectorizedProblem",
                format!("Y {:?}, F_N {:?}, F {:?}, E {:?}", y.shape(), f_n.shape(), f.shape(), e.shape()),
            ));
        }
        let psi = sensing_matrix(e, f)?;
        Ok(Self {
            y: vectorize(y),
            f_n_norms: (0..f_n.cols()).map(|c| norm(&f_n.col(c))).collect(),
            psi_norms: (0..psi.cols()).map(|c| norm(&psi.col(c))).collect(),
            f_n: f_n.clone(),
            psi,
        })
    }

    pub fn bs_count(&self) -> usize {
        self.f_n.cols()
    }

    /// `(i, j)` of column `g`.
    pub fn split(&self, g: usize) -> (usize, usize) {
        (g % self.bs_count(), g / self.bs_count())
    }

    fn tau(&self) -> usize {
        self.psi.rows()
    }
}

/// Column-stacking `vec`.
pub fn vectorize(y: &ComplexMatrix) -> Vec<C64> {
    let (n, t) = y.shape();
    let mut v = Vec::with_capacity(n * t);
    for c in 0..t {
        for r in 0..n {
            v.push(y.get(r, c));
        }
    }
    v
}

impl AtomSet for VectorizedProblem {
    fn dim(&self) -> usize {
        self.f_n.rows() * self.tau()
    }
    fn len(&self) -> usize {
        self.f_n.cols() * self.psi.cols()
    }
    fn atom(&self, g: usize) -> Vec<C64> {
        let (i, j) = self.split(g);
        let n = self.f_n.rows();
        let mut v = Vec::with_capacity(n * self.tau());
        for t in 0..self.tau() {
            // (F[:,j]^H E)[t] = conj(Psi[t, j])
            let w = self.psi.get(t, j).conj();
            for r in 0..n {
                v.push(self.f_n.get(r, i) * w);
            }
        }
        v
    }
    fn atom_norm(&self, g: usize) -> f64 {
        let (i, j) = self.split(g);
        self.f_n_norms[i] * self.psi_norms[j]
    }
    fn correlate(&self, r: &[C64]) -> Result<Vec<C64>> {
        let n = self.f_n.rows();
        if r.len() != self.dim() {
            return Err(Error::shape("correlate", format!("residual {} vs {}", r.len(), self.dim())));
        }
        let rm = ComplexMatrix::from_fn(n, self.tau(), |row, t| r[row + n * t]);
        // F_N^H R Psi, laid out with i fastest
        let c = self.f_n.h_matmul(&rm)?.matmul(&self.psi)?;
        let (ng, mg) = c.shape();
        let mut out = vec![ZERO; ng * mg];
        for i in 0..ng {
            for j in 0..mg {
                out[i + ng * j] = c.get(i, j);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    /// In selection order.
    pub support: Vec<usize>,
    /// Coefficients of the unnormalised atoms, aligned with `support`.
    pub coef: Vec<C64>,
    /// `||r||` before the first and after every iteration.
    pub residual_norms: Vec<f64>,
    /// Some refit needed the ridge fallback.
    pub ridge: bool,
}

impl OmpResult {
    /// Dense coefficient vector of length `len`.
    pub fn dense(&self, len: usize) -> Vec<C64> {
        let mut out = vec![ZERO; len];
        for (&g, &c) in self.support.iter().zip(&self.coef) {
            out[g] = c;
        }
        out
    }
}

/// Greedy OMP with least-squares refits. Selection uses normalised
/// correlations; ties go to the lowest index.
pub fn omp<A: AtomSet + ?Sized>(atoms: &A, y: &[C64], sparsity: usize) -> Result<OmpResult> {
    if sparsity == 0 {
        return Err(Error::Argument("sparsity must be at least 1".into()));
    }
    if y.len() != atoms.dim() {
        return Err(Error::shape("omp", format!("y {} vs atoms of length {}", y.len(), atoms.dim())));
    }
    let y_norm = norm(y);
    let mut r = y.to_vec();
    let mut support: Vec<usize> = Vec::new();
    let mut cols: Vec<Vec<C64>> = Vec::new();
    let mut coef = Vec::new();
    let mut residual_norms = vec![y_norm];
    let mut ridge = false;
    while support.len() < sparsity.min(atoms.len()) {
        if *residual_norms.last().unwrap() <= EARLY_STOP * y_norm {
            break;
        }
        let c = atoms.correlate(&r)?;
        let mut best: Option<(usize, f64)> = None;
        for (g, v) in c.iter().enumerate() {
            let n = atoms.atom_norm(g);
            if n == 0.0 || support.contains(&g) {
                continue;
            }
            let score = v.norm() / n;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((g, score));
            }
        }
        let Some((g, _)) = best else { break };
        support.push(g);
        cols.push(atoms.atom(g));
        let sol = lstsq(&cols, y);
        ridge |= sol.ridge;
        coef = sol.coef;
        r = y.to_vec();
        for (a, c) in cols.iter().zip(&coef) {
            for (rv, av) in r.iter_mut().zip(a) {
                *rv -= av * c;
            }
        }
        residual_norms.push(norm(&r));
    }
    Ok(OmpResult {
        support,
        coef,
        residual_norms,
        ridge,
    })
}

/// One-shot OMP on the whole pilot block.
#[derive(Debug, Clone, PartialEq)]
pub struct OmpEstimate {
    pub g: ComplexMatrix,
    /// `(BS grid index, cascaded column)` per selected atom.
    pub support: Vec<(usize, usize)>,
    pub coef: Vec<C64>,
    pub ridge: bool,
}

/// `G_hat = (1/sqrt(p)) sum c_ij F_N[:,i] F[:,j]^H`.
pub fn omp_estimate(
    y: &ComplexMatrix,
    e: &ComplexMatrix,
    p: f64,
    f_n: &ComplexMatrix,
    f: &ComplexMatrix,
    sparsity: usize,
) -> Result<OmpEstimate> {
    if !(p > 0.0) {
        return Err(Error::Argument(format!("transmit power must be positive, got {p}")));
    }
    let prob = VectorizedProblem::new(y, f_n, f, e)?;
    let res = omp(&prob, &prob.y, sparsity)?;
    let s = 1.0 / math::sqrt(p);
    let mut g = ComplexMatrix::zeros(f_n.rows(), f.rows());
    let mut support = Vec::with_capacity(res.support.len());
    for (&idx, &c) in res.support.iter().zip(&res.coef) {
        let (i, j) = prob.split(idx);
        support.push((i, j));
        for r in 0..g.rows() {
            let a = f_n.get(r, i) * c * s;
            for col in 0..g.cols() {
                let v = g.get(r, col) + a * f.get(col, j).conj();
                g.set(r, col, v);
            }
        }
    }
    Ok(OmpEstimate {
        g,
        support,
        coef: res.coef,
        ridge: res.ridge,
    })
}

/// Per-path OMP on `p_l = E^H F b_l` given the BS-side columns `a_hat`.
#[allow(clippy::too_many_arguments)]
pub fn omp_ris_side(
    y: &ComplexMatrix,
    e: &ComplexMatrix,
    p: f64,
    a_hat: &ComplexMatrix,
    f: &ComplexMatrix,
    l_ru: usize,
    mode: Projection,
) -> Result<ComplexMatrix> {
    let ps = project(y, a_hat, p, mode)?;
    let psi = sensing_matrix(e, f)?;
    let atoms = ExplicitAtoms::new(&psi);
    let h_hat = ps
        .iter()
        .map(|pl| {
            let res = omp(&atoms, pl, l_ru)?;
            f.mul_vec(&res.dense(f.cols()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reconstruct(a_hat, &h_hat)?.g)
}

/// Stage I support, then per-path OMP with sparsity `l_ru`.
#[allow(clippy::too_many_arguments)]
pub fn dncnn_omp_estimate(
    y: &ComplexMatrix,
    e: &ComplexMatrix,
    p: f64,
    denoiser: &DenoiserParams,
    f_n: &PolarDictionary,
    f: &ComplexMatrix,
    l_br: usize,
    l_ru: usize,
    mode: Projection,
) -> Result<ComplexMatrix> {
    let support = estimate_support(y, f_n, denoiser, l_br)?;
    omp_ris_side(y, e, p, &support.a_hat, f, l_ru, mode)
}
