//! Tape-based reverse-mode differentiation over real tensors.
//!
//! Complex quantities are carried as `(re, im)` pairs of real tensors
//! ([`CVar`]), so gradients of real losses with respect to complex parameters
//! come out as gradients with respect to their real and imaginary parts.
//!
//! Nodes are appended in evaluation order, which is a topological order; the
//! backward pass walks the tape once from the loss node down to the leaves.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ComplexMatrix, C64};
use crate::math;

/// Dense real tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Splits a complex matrix into `[rows, cols]` real and imaginary tensors.
pub fn split_complex(m: &ComplexMatrix) -> (Tensor, Tensor) {
    let shape = vec![m.rows(), m.cols()];
    (
        Tensor {
            shape: shape.clone(),
            data: m.re(),
        },
        Tensor { shape, data: m.im() },
    )
}

pub fn join_complex(re: &Tensor, im: &Tensor) -> Result<ComplexMatrix> {
    if re.shape.len() != 2 || re.shape != im.shape {
        return Err(Error::shape(
            "join_complex",
            format!("{:?} / {:?}", re.shape, im.shape),
        ));
    }
    ComplexMatrix::from_parts(re.shape[0], re.shape[1], &re.data, &im.data)
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Complex value as a pair of real nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    ScaleConst(Var, f64),
    ScaleBy { scalar: Var, x: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, eps: f64 },
    BatchNormInfer { input: Var, gamma: Var, beta: Var, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    ShrinkScale { re: Var, im: Var, lambda: Var },
    Sum(Var),
    SumSquares(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Neg(a) | Op::ScaleConst(a, _) | Op::Relu(a) | Op::Sum(a) | Op::SumSquares(a) => vec![a],
            Op::ScaleBy { scalar, x } => vec![scalar, x],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Conv2d { input, kernel, bias } => vec![input, kernel, bias],
            Op::BatchNormTrain { input, gamma, beta, .. } | Op::BatchNormInfer { input, gamma, beta, .. } => {
                vec![input, gamma, beta]
            }
            Op::ShrinkScale { re, im, lambda } => vec![re, im, lambda],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// Forward-pass by-products needed by the backward rule
    /// (batch-norm mean and inverse std).
    saved: Vec<f64>,
    requires_grad: bool,
    trainable: bool,
}

/// Recording of a differentiable computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    /// Node indices in the order the backward pass processed them.
    pub visited: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn wrt_complex(&self, v: CVar) -> (Tensor, Tensor) {
        (self.wrt(v.re), self.wrt(v.im))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Batch statistics `(mean, biased variance)` saved by a train-mode
    /// batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(Vec<f64>, Vec<f64>)> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::BatchNormTrain { eps, .. } => {
                let c = node.saved.len() / 2;
                let mean = node.saved[..c].to_vec();
                let var = node.saved[c..]
                    .iter()
                    .map(|inv| 1.0 / (inv * inv) - eps)
                    .collect();
                Some((mean, var))
            }
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Vec<f64>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            saved: Vec::new(),
            requires_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Non-trainable leaf (inputs, targets, fixed operators).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param_complex(&mut self, m: &ComplexMatrix) -> CVar {
        let (re, im) = split_complex(m);
        CVar {
            re: self.param(re),
            im: self.param(im),
        }
    }

    pub fn constant_complex(&mut self, m: &ComplexMatrix) -> CVar {
        let (re, im) = split_complex(m);
        CVar {
            re: self.constant(re),
            im: self.constant(im),
        }
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = eval(&op, |v| &self.nodes[v.0].value)?;
        Ok(self.push(op, value, saved))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::ScaleConst(a, s))
    }

    /// `scalar * x` where `scalar` is a one-element node.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        self.record(Op::ScaleBy { scalar, x })
    }

    /// `op(a) * op(b)` for 2-D nodes, `op` being transpose when the flag is set.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.record(Op::MatMul { a, b, ta, tb })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    /// Same-padded 2-D cross-correlation, NHWC input `[B,H,W,Ci]`,
    /// kernel `[k,k,Ci,Co]`, bias `[Co]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.record(Op::Conv2d { input, kernel, bias })
    }

    /// Batch normalisation over all but the last (channel) axis, using batch
    /// statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.record(Op::BatchNormTrain { input, gamma, beta, eps })
    }

    /// Batch normalisation with frozen running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.record(Op::BatchNormInfer {
            input,
            gamma,
            beta,
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
        })
    }

    /// Complex soft-threshold gain `max(1 - lambda/|z|, 0)` per element.
    pub fn shrink_scale(&mut self, re: Var, im: Var, lambda: Var) -> Result<Var> {
        self.record(Op::ShrinkScale { re, im, lambda })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumSquares(a))
    }

    // Complex helpers built from the real primitives.

    pub fn cadd(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.add(a.re, b.re)?,
            im: self.add(a.im, b.im)?,
        })
    }

    pub fn csub(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.sub(a.re, b.re)?,
            im: self.sub(a.im, b.im)?,
        })
    }

    /// `a * b`.
    pub fn cmatmul(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.matmul(a.re, b.re, false, false)?;
        let ii = self.matmul(a.im, b.im, false, false)?;
        let ri = self.matmul(a.re, b.im, false, false)?;
        let ir = self.matmul(a.im, b.re, false, false)?;
        Ok(CVar {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    /// `a^H * b`.
    pub fn cmatmul_h(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.matmul(a.re, b.re, true, false)?;
        let ii = self.matmul(a.im, b.im, true, false)?;
        let ri = self.matmul(a.re, b.im, true, false)?;
        let ir = self.matmul(a.im, b.re, true, false)?;
        Ok(CVar {
            re: self.add(rr, ii)?,
            im: self.sub(ri, ir)?,
        })
    }

    /// Real scalar node times complex value.
    pub fn cscale_by(&mut self, scalar: Var, x: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.scale_by(scalar, x.re)?,
            im: self.scale_by(scalar, x.im)?,
        })
    }

    /// Elementwise real gain applied to a complex value.
    pub fn cmul_real(&mut self, x: CVar, gain: Var) -> Result<CVar> {
        Ok(CVar {
            re: self.mul(x.re, gain)?,
            im: self.mul(x.im, gain)?,
        })
    }

    /// Complex soft threshold `z/|z| * max(|z| - lambda, 0)`.
    pub fn csoft_threshold(&mut self, z: CVar, lambda: Var) -> Result<CVar> {
        let g = self.shrink_scale(z.re, z.im, lambda)?;
        self.cmul_real(z, g)
    }

    /// `sum |z|^2`.
    pub fn cnorm_sqr(&mut self, z: CVar) -> Result<Var> {
        let a = self.sum_squares(z.re)?;
        let b = self.sum_squares(z.im)?;
        self.add(a, b)
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut visited = Vec::new();
        grads[loss.0] = Some(Tensor::full(&self.nodes[loss.0].value.shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, map(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip(g, val(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, zip(g, val(*a), |x, y| x * y));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, map(g, |x| -x)),
            Op::ScaleConst(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, map(g, |x| x * s));
            }
            Op::ScaleBy { scalar, x } => {
                let s = val(*scalar).data[0];
                if self.needs(*scalar) {
                    let d: f64 = g.data.iter().zip(&val(*x).data).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *scalar, Tensor::scalar(d));
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, map(g, |v| v * s));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    let da = if !*ta {
                        gemm_new(false, !*tb, g, bv)
                    } else {
                        gemm_new(*tb, true, bv, g)
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = if !*tb {
                        gemm_new(!*ta, false, av, g)
                    } else {
                        gemm_new(true, *ta, g, av)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                self.accumulate(grads, *a, zip(g, val(*a), |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::Conv2d { input, kernel, bias } => {
                let (x, k) = (val(*input), val(*kernel));
                let (dx, dk, db) = conv2d_backward(x, k, g, self.needs(*input), self.needs(*kernel));
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::BatchNormTrain { input, gamma, beta, .. } => {
                let x = val(*input);
                let c = *x.shape.last().unwrap();
                let (mean, inv_std) = node.saved.split_at(c);
                let gam = &val(*gamma).data;
                let count = (x.len() / c) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (chunk, dy) in x.data.chunks_exact(c).zip(g.data.chunks_exact(c)) {
                    for ch in 0..c {
                        let xhat = (chunk[ch] - mean[ch]) * inv_std[ch];
                        sum_dy[ch] += dy[ch];
                        sum_dy_xhat[ch] += dy[ch] * xhat;
                    }
                }
                if self.needs(*input) {
                    let mut dx = Tensor::zeros(&x.shape);
                    for ((o, chunk), dy) in dx
                        .data
                        .chunks_exact_mut(c)
                        .zip(x.data.chunks_exact(c))
                        .zip(g.data.chunks_exact(c))
                    {
                        for ch in 0..c {
                            let xhat = (chunk[ch] - mean[ch]) * inv_std[ch];
                            o[ch] = gam[ch] * inv_std[ch]
                                * (dy[ch] - sum_dy[ch] / count - xhat * sum_dy_xhat[ch] / count);
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, Tensor { shape: vec![c], data: sum_dy_xhat });
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, Tensor { shape: vec![c], data: sum_dy });
                }
            }
            Op::BatchNormInfer { input, gamma, beta, mean, var, eps } => {
                let x = val(*input);
                let c = *x.shape.last().unwrap();
                let gam = &val(*gamma).data;
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
                if self.needs(*input) {
                    let mut dx = g.clone();
                    for o in dx.data.chunks_exact_mut(c) {
                        for ch in 0..c {
                            o[ch] *= gam[ch] * inv[ch];
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (chunk, dy) in x.data.chunks_exact(c).zip(g.data.chunks_exact(c)) {
                    for ch in 0..c {
                        dg[ch] += dy[ch] * (chunk[ch] - mean[ch]) * inv[ch];
                        db[ch] += dy[ch];
                    }
                }
                self.accumulate(grads, *gamma, Tensor { shape: vec![c], data: dg });
                self.accumulate(grads, *beta, Tensor { shape: vec![c], data: db });
            }
            Op::ShrinkScale { re, im, lambda } => {
                let (r, m) = (val(*re), val(*im));
                let lam = val(*lambda).data[0];
                let mut dre = Tensor::zeros(&r.shape);
                let mut dim = Tensor::zeros(&m.shape);
                let mut dlam = 0.0;
                for j in 0..r.len() {
                    let (a, b) = (r.data[j], m.data[j]);
                    let mag = math::sqrt(a * a + b * b);
                    if mag > lam && mag > 0.0 {
                        let c3 = lam / (mag * mag * mag);
                        dre.data[j] = g.data[j] * a * c3;
                        dim.data[j] = g.data[j] * b * c3;
                        dlam -= g.data[j] / mag;
                    }
                }
                self.accumulate(grads, *re, dre);
                self.accumulate(grads, *im, dim);
                if self.needs(*lambda) {
                    self.accumulate(grads, *lambda, Tensor::scalar(dlam));
                }
            }
            Op::Sum(a) => {
                let d = g.data[0];
                self.accumulate(grads, *a, Tensor::full(&val(*a).shape, d));
            }
            Op::SumSquares(a) => {
                let d = g.data[0];
                self.accumulate(grads, *a, map(val(*a), |x| 2.0 * d * x));
            }
        }
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |v| &values[v.0])?.0,
            };
            values.push(v);
        }
        Ok(values)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn dims2(t: &Tensor, trans: bool) -> Option<(usize, usize)> {
    if t.shape.len() != 2 {
        return None;
    }
    let (r, c) = (t.shape[0], t.shape[1]);
    Some(if trans { (c, r) } else { (r, c) })
}

/// `op(a) * op(b)` into a fresh tensor. Shapes are assumed validated.
fn gemm_new(ta: bool, tb: bool, a: &Tensor, b: &Tensor) -> Tensor {
    let (m, _) = dims2(a, ta).unwrap();
    let (_, n) = dims2(b, tb).unwrap();
    let mut out = Tensor::zeros(&[m, n]);
    gemm(ta, tb, a, b, &mut out.data);
    out
}

/// Accumulates `op(a) * op(b)` into `out` (`m x n`, row-major).
pub(crate) fn gemm(ta: bool, tb: bool, a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (ad, bd) = (&a.data, &b.data);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let o = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * ac + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (oj, bj) in o.iter_mut().zip(&bd[p * bc..(p + 1) * bc]) {
                        *oj += av * bj;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &bd[p * bc..(p + 1) * bc];
                for i in 0..m {
                    let av = ad[p * ac + i];
                    if av == 0.0 {
                        continue;
                    }
                    let o = &mut out[i * n..(i + 1) * n];
                    for (oj, bj) in o.iter_mut().zip(brow) {
                        *oj += av * bj;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * ac..(i + 1) * ac];
                for j in 0..n {
                    let brow = &bd[j * bc..(j + 1) * bc];
                    out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        (true, true) => {
            for j in 0..n {
                for p in 0..k {
                    let bv = bd[j * bc + p];
                    if bv == 0.0 {
                        continue;
                    }
                    let arow = &ad[p * ac..(p + 1) * ac];
                    for i in 0..m {
                        out[i * n + j] += bv * arow[i];
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, k: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.shape.len() != 4 || k.shape.len() != 4 || bias.shape.len() != 1 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}, bias {:?}", x.shape, k.shape, bias.shape),
        ));
    }
    let (b, h, w, ci) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw, kci, co) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    if kh != kw || kh % 2 == 0 || kci != ci || bias.shape[0] != co {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}, bias {:?}", x.shape, k.shape, bias.shape),
        ));
    }
    Ok((b, h, w, ci, kh, co))
}

/// Same-padded cross-correlation forward pass.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, h, w, ci, ks, co) = conv_dims(x, k, bias)?;
    let pad = (ks / 2) as isize;
    let mut out = Tensor::zeros(&[b, h, w, co]);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o_off = ((n * h + y) * w + xx) * co;
                let o = &mut out.data[o_off..o_off + co];
                o.copy_from_slice(&bias.data);
                for ky in 0..ks {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ks {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i_off = ((n * h + iy as usize) * w + ix as usize) * ci;
                        let k_off = (ky * ks + kx) * ci * co;
                        for c in 0..ci {
                            let xv = x.data[i_off + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k.data[k_off + c * co..k_off + (c + 1) * co];
                            for (oj, kj) in o.iter_mut().zip(krow) {
                                *oj += xv * kj;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (b, h, w, ci) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ks, co) = (k.shape[0], k.shape[3]);
    let pad = (ks / 2) as isize;
    let mut dx = want_dx.then(|| Tensor::zeros(&x.shape));
    let mut dk = want_dk.then(|| Tensor::zeros(&k.shape));
    let mut db = Tensor::zeros(&[co]);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o_off = ((n * h + y) * w + xx) * co;
                let dy = &g.data[o_off..o_off + co];
                for (d, v) in db.data.iter_mut().zip(dy) {
                    *d += v;
                }
                for ky in 0..ks {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ks {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i_off = ((n * h + iy as usize) * w + ix as usize) * ci;
                        let k_off = (ky * ks + kx) * ci * co;
                        for c in 0..ci {
                            let krange = k_off + c * co..k_off + (c + 1) * co;
                            if let Some(dx) = dx.as_mut() {
                                let krow = &k.data[krange.clone()];
                                dx.data[i_off + c] += krow.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dk) = dk.as_mut() {
                                let xv = x.data[i_off + c];
                                if xv != 0.0 {
                                    for (d, v) in dk.data[krange].iter_mut().zip(dy) {
                                        *d += xv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Per-channel `(mean, biased variance)` over all leading axes.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = *x.shape.last().unwrap();
    let count = (x.len() / c.max(1)) as f64;
    let mut mean = vec![0.0; c];
    for chunk in x.data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(chunk) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for chunk in x.data.chunks_exact(c) {
        for ch in 0..c {
            let d = chunk[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Affine batch-norm application with given statistics.
pub fn batch_norm_apply(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor {
    let c = *x.shape.last().unwrap();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
    let mut out = x.clone();
    for chunk in out.data.chunks_exact_mut(c) {
        for ch in 0..c {
            chunk[ch] = gamma[ch] * (chunk[ch] - mean[ch]) * inv[ch] + beta[ch];
        }
    }
    out
}

fn eval<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<(Tensor, Vec<f64>)> {
    let none = Vec::new();
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => {
            same_shape("add", get(*a), get(*b))?;
            (zip(get(*a), get(*b), |x, y| x + y), none)
        }
        Op::Sub(a, b) => {
            same_shape("sub", get(*a), get(*b))?;
            (zip(get(*a), get(*b), |x, y| x - y), none)
        }
        Op::Mul(a, b) => {
            same_shape("mul", get(*a), get(*b))?;
            (zip(get(*a), get(*b), |x, y| x * y), none)
        }
        Op::Neg(a) => (map(get(*a), |x| -x), none),
        Op::ScaleConst(a, s) => {
            let s = *s;
            (map(get(*a), |x| x * s), none)
        }
        Op::ScaleBy { scalar, x } => {
            let st = get(*scalar);
            if st.len() != 1 {
                return Err(Error::shape("scale_by", format!("scalar has shape {:?}", st.shape)));
            }
            let s = st.data[0];
            (map(get(*x), |v| v * s), none)
        }
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (get(*a), get(*b));
            let (Some((_, ka)), Some((kb, _))) = (dims2(av, *ta), dims2(bv, *tb)) else {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape, bv.shape)));
            };
            if ka != kb {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?}{} x {:?}{}", av.shape, if *ta { "^T" } else { "" }, bv.shape, if *tb { "^T" } else { "" }),
                ));
            }
            (gemm_new(*ta, *tb, av, bv), none)
        }
        Op::Relu(a) => (map(get(*a), |x| if x > 0.0 { x } else { 0.0 }), none),
        Op::Conv2d { input, kernel, bias } => (conv2d_forward(get(*input), get(*kernel), get(*bias))?, none),
        Op::BatchNormTrain { input, gamma, beta, eps } => {
            let x = get(*input);
            let c = *x.shape.last().ok_or_else(|| Error::shape("batch_norm", "empty shape"))?;
            let (g, b) = (get(*gamma), get(*beta));
            if g.len() != c || b.len() != c || x.is_empty() {
                return Err(Error::shape("batch_norm", format!("input {:?}, gamma {:?}", x.shape, g.shape)));
            }
            let (mean, var) = channel_stats(x);
            let y = batch_norm_apply(x, &g.data, &b.data, &mean, &var, *eps);
            let mut saved = mean;
            saved.extend(var.iter().map(|v| 1.0 / math::sqrt(v + eps)));
            (y, saved)
        }
        Op::BatchNormInfer { input, gamma, beta, mean, var, eps } => {
            let x = get(*input);
            let c = *x.shape.last().ok_or_else(|| Error::shape("batch_norm", "empty shape"))?;
            let (g, b) = (get(*gamma), get(*beta));
            if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm", format!("input {:?}, gamma {:?}", x.shape, g.shape)));
            }
            (batch_norm_apply(x, &g.data, &b.data, mean, var, *eps), none)
        }
        Op::ShrinkScale { re, im, lambda } => {
            let (r, m) = (get(*re), get(*im));
            same_shape("shrink", r, m)?;
            let lt = get(*lambda);
            if lt.len() != 1 {
                return Err(Error::shape("shrink", format!("lambda has shape {:?}", lt.shape)));
            }
            let lam = lt.data[0];
            if !(lam >= 0.0) {
                return Err(Error::Argument(format!("soft threshold needs lambda >= 0, got {lam}")));
            }
            (zip(r, m, |a, b| shrink_gain(C64::new(a, b).norm(), lam)), none)
        }
        Op::Sum(a) => (Tensor::scalar(get(*a).data.iter().sum()), none),
        Op::SumSquares(a) => (Tensor::scalar(get(*a).data.iter().map(|x| x * x).sum()), none),
    })
}

#[inline]
fn shrink_gain(mag: f64, lambda: f64) -> f64 {
    if mag > lambda && mag > 0.0 {
        1.0 - lambda / mag
    } else {
        0.0
    }
}

/// Complex soft threshold `z/|z| * max(|z| - lambda, 0)`.
pub fn soft_threshold(z: C64, lambda: f64) -> Result<C64> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("soft threshold needs lambda >= 0, got {lambda}")));
    }
    Ok(z * shrink_gain(z.norm(), lambda))
}

/// Elementwise [`soft_threshold`].
pub fn soft_threshold_slice(z: &[C64], lambda: f64) -> Result<Vec<C64>> {
    z.iter().map(|&v| soft_threshold(v, lambda)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 11);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(C64::new(2.0, 0.0), 0.5).unwrap(), C64::new(1.5, 0.0));
        assert_eq!(soft_threshold(C64::new(0.3, 0.0), 1.0).unwrap(), C64::new(0.0, 0.0));
        let z = C64::from_polar(2.0, core::f64::consts::FRAC_PI_4);
        let s = soft_threshold(z, 1.0).unwrap();
        assert!((s - C64::from_polar(1.0, core::f64::consts::FRAC_PI_4)).norm() < 1e-15);
        assert!(soft_threshold(z, -0.1).is_err());
        assert_eq!(soft_threshold(z, 0.0).unwrap(), z);
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let x = rand_tensor(&[1, 4, 3, 1], 1);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.data[4] = 1.0;
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d_forward(&x, &k, &b).unwrap(), x);
        let z = conv2d_forward(&x, &Tensor::zeros(&[3, 3, 1, 1]), &b).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_kernel_center_and_corner() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data[4], 9.0);
        assert_eq!(y.data[0], 4.0);
        assert_eq!(y.data[8], 4.0);
        assert_eq!(y.data[1], 6.0);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[1, 3, 3, 2]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[3, 3, 1, 1]), &Tensor::zeros(&[1])).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[2, 2, 2, 1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let g = t.constant(Tensor::full(&[1], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.batch_norm_train(x, g, b, 0.0).unwrap();
        assert_eq!(t.value(y).data, vec![-1.0, 1.0]);
        let (m, v) = t.batch_stats(y).unwrap();
        assert_eq!(m, vec![2.0]);
        assert!((v[0] - 1.0).abs() < 1e-12);

        // gamma = 0 gives beta everywhere
        let x2 = t.constant(rand_tensor(&[5, 2], 3));
        let g0 = t.constant(Tensor::zeros(&[2]));
        let b2 = t.constant(Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
        let y2 = t.batch_norm_train(x2, g0, b2, 1e-5).unwrap();
        for row in t.value(y2).data.chunks(2) {
            assert_eq!(row, &[0.25, -4.0]);
        }

        // already standardised input is preserved up to the epsilon effect
        let x3 = t.constant(Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
        let g1 = t.constant(Tensor::full(&[1], 1.0));
        let b1 = t.constant(Tensor::zeros(&[1]));
        let y3 = t.batch_norm_train(x3, g1, b1, 1e-5).unwrap();
        for (a, b) in t.value(y3).data.iter().zip(&[-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - b).abs() <= 1e-5);
        }

        // zero-variance channel is guarded by epsilon
        let xc = t.constant(Tensor::full(&[3, 1], 2.0));
        let yc = t.batch_norm_train(xc, g1, b1, 1e-5).unwrap();
        assert!(t.value(yc).data.iter().all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn sum_and_norm_gradients() {
        let mut t = Tape::new();
        let p = t.param(rand_tensor(&[5], 4));
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(p).data, vec![1.0; 5]);

        let q = t.sum_squares(p).unwrap();
        let g = t.backward(q).unwrap();
        let expect: Vec<f64> = t.value(p).data.iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.wrt(p).data, expect);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(rand_tensor(&[3], 5));
        let u = t.param(rand_tensor(&[2], 6));
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(u).data, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_visits_each_node_once_in_reverse_order() {
        let mut t = Tape::new();
        let p = t.param(rand_tensor(&[3, 3], 7));
        let a = t.matmul(p, p, false, true).unwrap();
        let b = t.relu(a).unwrap();
        let c = t.add(b, a).unwrap();
        let l = t.sum_squares(c).unwrap();
        let g = t.backward(l).unwrap();
        let mut sorted = g.visited.clone();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        assert_eq!(g.visited, sorted);
        sorted.dedup();
        assert_eq!(sorted.len(), g.visited.len());
        assert_eq!(g.visited.len(), t.len());
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let x = t.param(rand_tensor(&[2, 4, 3, 2], 8));
        let k = t.param(rand_tensor(&[3, 3, 2, 3], 9));
        let b = t.param(rand_tensor(&[3], 10));
        let y = t.conv2d(x, k, b).unwrap();
        let gm = t.param(Tensor::full(&[3], 1.5));
        let bt = t.param(Tensor::full(&[3], 0.1));
        let z = t.batch_norm_train(y, gm, bt, 1e-5).unwrap();
        let _ = t.relu(z).unwrap();
        let replayed = t.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, t.value(Var(i)));
        }
    }

    #[test]
    fn negative_threshold_rejected_on_tape() {
        let mut t = Tape::new();
        let r = t.constant(Tensor::full(&[2], 1.0));
        let l = t.constant(Tensor::scalar(-0.5));
        assert!(t.shrink_scale(r, r, l).is_err());
    }

    #[test]
    fn matmul_shape_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.matmul(a, a, false, false).is_err());
        assert!(t.matmul(a, a, false, true).is_ok());
    }
}
