//! Stage II: projection onto the estimated BS subspace, per-path sparse
//! recovery by classic ISTA or the unrolled adaptive-dictionary network, and
//! reconstruction of the cascaded channel.
//!
//! A network layer maps
//! `h <- F eta_lambda(F^H (h - kappa V (E^H h - p)))`, starting from `h = 0`.
//! Inputs are scaled to unit norm and outputs scaled back, so the network is
//! positively homogeneous in `p`. `kappa` and `lambda` are stored as raw
//! multipliers of fixed scales set at initialisation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{soft_threshold, CVar, Tape, Tensor, Var};
use crate::channel::{draw_scene, noise_variance_for_snr, SystemConfig};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::linalg::{lstsq, norm, norm_sqr, ComplexMatrix, C64, ZERO};
use crate::math;
use crate::optim::{Adam, AdamConfig};
use crate::polar::stage2_targets;
use crate::rng::{self, purpose};

/// `p_l`, the conjugated rows of `(1/sqrt(p)) A_hat^H Y`.
pub fn project_to_bs_subspace(y: &ComplexMatrix, a_hat: &ComplexMatrix, p: f64) -> Result<Vec<Vec<C64>>> {
    if !(p > 0.0) {
        return Err(Error::Argument(format!("transmit power must be positive, got {p}")));
    }
    let proj = a_hat.h_matmul(y)?;
    let s = 1.0 / math::sqrt(p);
    Ok((0..proj.rows())
        .map(|l| proj.row(l).iter().map(|z| z.conj() * s).collect())
        .collect())
}

/// How `Y` is mapped onto the selected BS-side columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// `A^H Y`; leaks between paths unless the columns are orthogonal.
    #[default]
    Matched,
    /// `(A^H A)^-1 A^H Y`; equal to `Matched` for orthonormal columns.
    LeastSquares,
}

/// Least-squares variant of [`project_to_bs_subspace`].
pub fn project_least_squares(y: &ComplexMatrix, a_hat: &ComplexMatrix, p: f64) -> Result<Vec<Vec<C64>>> {
    if !(p > 0.0) {
        return Err(Error::Argument(format!("transmit power must be positive, got {p}")));
    }
    if y.rows() != a_hat.rows() {
        return Err(Error::shape("project_least_squares", format!("Y {:?} vs A {:?}", y.shape(), a_hat.shape())));
    }
    let cols: Vec<Vec<C64>> = (0..a_hat.cols()).map(|c| a_hat.col(c)).collect();
    let s = 1.0 / math::sqrt(p);
    let mut out = vec![vec![ZERO; y.cols()]; a_hat.cols()];
    for t in 0..y.cols() {
        let sol = lstsq(&cols, &y.col(t));
        for (l, c) in sol.coef.iter().enumerate() {
            out[l][t] = c.conj() * s;
        }
    }
    Ok(out)
}

pub fn project(y: &ComplexMatrix, a_hat: &ComplexMatrix, p: f64, mode: Projection) -> Result<Vec<Vec<C64>>> {
    match mode {
        Projection::Matched => project_to_bs_subspace(y, a_hat, p),
        Projection::LeastSquares => project_least_squares(y, a_hat, p),
    }
}

/// `Psi = E^H F`.
pub fn sensing_matrix(e: &ComplexMatrix, f: &ComplexMatrix) -> Result<ComplexMatrix> {
    e.h_matmul(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IstaResult {
    pub b: Vec<C64>,
    /// `0.5 ||Psi b - p||^2 + lambda ||b||_1` after each iteration.
    pub objective: Vec<f64>,
    /// Set when the objective rose although `kappa <= 1/||Psi||^2`.
    pub diverged: bool,
}

fn objective(psi: &ComplexMatrix, b: &[C64], p: &[C64], lambda: f64) -> Result<f64> {
    let r: Vec<C64> = psi.mul_vec(b)?.iter().zip(p).map(|(a, c)| a - c).collect();
    Ok(0.5 * norm_sqr(&r) + lambda * b.iter().map(|z| z.norm()).sum::<f64>())
}

/// Classic ISTA from `b = 0`.
pub fn ista_classic(p: &[C64], psi: &ComplexMatrix, lambda: f64, kappa: f64, iters: usize) -> Result<IstaResult> {
    if p.len() != psi.rows() {
        return Err(Error::shape("ista_classic", format!("p {} vs Psi {:?}", p.len(), psi.shape())));
    }
    if !(lambda >= 0.0) || !(kappa > 0.0) {
        return Err(Error::Argument(format!("need lambda >= 0 and kappa > 0, got {lambda}, {kappa}")));
    }
    let safe = kappa * psi.spectral_norm_sqr() <= 1.0 + 1e-9;
    let mut b = vec![ZERO; psi.cols()];
    let mut trace = Vec::with_capacity(iters);
    let mut diverged = false;
    let mut prev = objective(psi, &b, p, lambda)?;
    for _ in 0..iters {
        let r: Vec<C64> = psi.mul_vec(&b)?.iter().zip(p).map(|(a, c)| a - c).collect();
        let g = psi.h_mul_vec(&r)?;
        for (bv, gv) in b.iter_mut().zip(&g) {
            *bv = soft_threshold(*bv - gv * kappa, lambda * kappa)?;
        }
        let obj = objective(psi, &b, p, lambda)?;
        if safe && obj > prev * (1.0 + 1e-9) + 1e-300 {
            diverged = true;
        }
        if !obj.is_finite() {
            diverged = true;
            trace.push(obj);
            break;
        }
        trace.push(obj);
        prev = obj;
    }
    Ok(IstaResult {
        b,
        objective: trace,
        diverged,
    })
}

/// Parameters of the unrolled network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListaParams {
    pub layers: usize,
    /// Raw thresholds; the effective value is `lambda[t] * lambda_scale`.
    pub lambda: Vec<f64>,
    /// Raw steps; the effective value is `kappa[t] * kappa_scale`.
    pub kappa: Vec<f64>,
    pub lambda_scale: f64,
    pub kappa_scale: f64,
    /// `M x tau`, shared by all layers.
    pub v: ComplexMatrix,
    /// `M x M_G'` adaptive dictionary.
    pub f: ComplexMatrix,
}

impl ListaParams {
    /// `V = E`, `F = F~ / ||F~||_2`, `kappa = 1/||E^H F||^2` and
    /// `lambda = 0.1 kappa mean_i max|F^H E p_i|` over unit-norm `p_i`.
    pub fn init(layers: usize, e: &ComplexMatrix, f_tilde: &ComplexMatrix, calibration: &[Vec<C64>]) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Argument("unrolled network needs at least one layer".into()));
        }
        if e.rows() != f_tilde.rows() {
            return Err(Error::shape("ListaParams::init", format!("E {:?} vs F {:?}", e.shape(), f_tilde.shape())));
        }
        let fs = math::sqrt(f_tilde.spectral_norm_sqr());
        let f = if fs > 0.0 { f_tilde.scale_real(1.0 / fs) } else { f_tilde.clone() };
        let psi = sensing_matrix(e, &f)?;
        let ps = psi.spectral_norm_sqr();
        let kappa_scale = if ps > 0.0 { 1.0 / ps } else { 1.0 };
        let mut acc = 0.0;
        let mut count = 0;
        for p in calibration {
            let n = norm(p);
            if n == 0.0 {
                continue;
            }
            let u: Vec<C64> = p.iter().map(|z| z / n).collect();
            let c = psi.h_mul_vec(&u)?;
            acc += c.iter().map(|z| z.norm()).fold(0.0, f64::max);
            count += 1;
        }
        let mean_max = if count > 0 { acc / count as f64 } else { 1.0 };
        Ok(Self {
            layers,
            lambda: vec![1.0; layers],
            kappa: vec![1.0; layers],
            lambda_scale: 0.1 * kappa_scale * mean_max,
            kappa_scale,
            v: e.clone(),
            f,
        })
    }

    pub fn lambda_eff(&self, t: usize) -> f64 {
        self.lambda[t] * self.lambda_scale
    }

    pub fn kappa_eff(&self, t: usize) -> f64 {
        self.kappa[t] * self.kappa_scale
    }

    /// Parameter count of `V` and `F` plus the per-layer scalars.
    pub fn parameter_count(&self) -> usize {
        2 * (self.v.rows() * self.v.cols() + self.f.rows() * self.f.cols()) + 2 * self.layers
    }

    /// Width of the thresholded hidden representation.
    pub fn hidden_width(&self) -> usize {
        self.f.cols()
    }
}

/// Direct evaluation of the network on the columns of `p` (`tau x B`).
pub fn lista_forward_batch(p: &ComplexMatrix, params: &ListaParams, e: &ComplexMatrix) -> Result<ComplexMatrix> {
    let (tau, b) = p.shape();
    let m = params.f.rows();
    if e.shape() != (m, tau) || params.v.shape() != (m, tau) {
        return Err(Error::shape(
            "lista_forward",
            format!("p {:?}, E {:?}, V {:?}, F {:?}", p.shape(), e.shape(), params.v.shape(), params.f.shape()),
        ));
    }
    let norms: Vec<f64> = (0..b).map(|j| norm(&p.col(j))).collect();
    let pn = ComplexMatrix::from_fn(tau, b, |r, c| {
        if norms[c] > 0.0 {
            p.get(r, c) / norms[c]
        } else {
            ZERO
        }
    });
    let mut h = ComplexMatrix::zeros(m, b);
    for t in 0..params.layers {
        let kappa = params.kappa_eff(t);
        let lambda = params.lambda_eff(t);
        if !(lambda >= 0.0) {
            return Err(Error::Argument(format!("layer {t} threshold is negative")));
        }
        let r = e.h_matmul(&h)?.sub(&pn)?;
        let u = h.sub(&params.v.matmul(&r)?.scale_real(kappa))?;
        let mut z = params.f.h_matmul(&u)?;
        for v in z.data_mut() {
            *v = soft_threshold(*v, lambda)?;
        }
        h = params.f.matmul(&z)?;
    }
    Ok(ComplexMatrix::from_fn(m, b, |r, c| h.get(r, c) * norms[c]))
}

pub fn lista_forward(p: &[C64], params: &ListaParams, e: &ComplexMatrix) -> Result<Vec<C64>> {
    Ok(lista_forward_batch(&ComplexMatrix::column(p.to_vec()), params, e)?.into_data())
}

/// Tape handles for [`ListaParams`]; scalars are one-element nodes.
pub struct ListaVars {
    pub lambda: Vec<Var>,
    pub kappa: Vec<Var>,
    pub v: CVar,
    pub f: CVar,
}

/// Records the network on unit-norm inputs `pn` (`tau x B`).
pub fn lista_graph(tape: &mut Tape, params: &ListaParams, e: CVar, pn: CVar) -> Result<(CVar, ListaVars)> {
    let lambda: Vec<Var> = params.lambda.iter().map(|&l| tape.param(Tensor::scalar(l))).collect();
    let kappa: Vec<Var> = params.kappa.iter().map(|&k| tape.param(Tensor::scalar(k))).collect();
    let v = tape.param_complex(&params.v);
    let f = tape.param_complex(&params.f);
    let (m, b) = (params.f.rows(), tape.value(pn.re).shape[1]);
    let mut h = tape.constant_complex(&ComplexMatrix::zeros(m, b));
    for t in 0..params.layers {
        let r0 = tape.cmatmul_h(e, h)?;
        let r = tape.csub(r0, pn)?;
        let vr = tape.cmatmul(v, r)?;
        let k_eff = tape.scale(kappa[t], params.kappa_scale)?;
        let step = tape.cscale_by(k_eff, vr)?;
        let u = tape.csub(h, step)?;
        let z = tape.cmatmul_h(f, u)?;
        let l_eff = tape.scale(lambda[t], params.lambda_scale)?;
        let zs = tape.csoft_threshold(z, l_eff)?;
        h = tape.cmatmul(f, zs)?;
    }
    Ok((h, ListaVars { lambda, kappa, v, f }))
}

/// One training pair `p_l = E^H h_l + n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Sample {
    pub p: Vec<C64>,
    pub h: Vec<C64>,
    pub path: usize,
    pub snr_db: f64,
    /// Variance of the entries of `n`.
    pub noise_var: f64,
}

/// Loss graph `(1/2B) sum ||N(p) - h||^2 / ||h||^2` on a minibatch.
pub fn stage2_loss_graph(
    tape: &mut Tape,
    params: &ListaParams,
    e: &ComplexMatrix,
    batch: &[&Stage2Sample],
) -> Result<(Var, ListaVars)> {
    let tau = e.cols();
    let m = e.rows();
    let b = batch.len();
    let mut pn = ComplexMatrix::zeros(tau, b);
    let mut target = ComplexMatrix::zeros(m, b);
    let mut weight = vec![0.0; m * b];
    for (j, s) in batch.iter().enumerate() {
        if s.p.len() != tau || s.h.len() != m {
            return Err(Error::shape("stage2_loss", format!("sample p {} / h {} vs E {:?}", s.p.len(), s.h.len(), e.shape())));
        }
        let pnorm = norm(&s.p);
        let hn2 = norm_sqr(&s.h);
        let ps = if pnorm > 0.0 { pnorm } else { 1.0 };
        for (i, z) in s.p.iter().enumerate() {
            pn.set(i, j, z / ps);
        }
        for (i, z) in s.h.iter().enumerate() {
            target.set(i, j, z / ps);
        }
        // ||ps * out - h||^2 / ||h||^2 = (ps^2 / ||h||^2) ||out - h/ps||^2
        let w = if hn2 > 0.0 { math::sqrt(ps * ps / hn2 / (2.0 * b as f64)) } else { 0.0 };
        for i in 0..m {
            weight[i * b + j] = w;
        }
    }
    let ev = tape.constant_complex(e);
    let pv = tape.constant_complex(&pn);
    let (out, vars) = lista_graph(tape, params, ev, pv)?;
    let tv = tape.constant_complex(&target);
    let d = tape.csub(out, tv)?;
    let wv = tape.constant(Tensor::new(vec![m, b], weight)?);
    let dw = tape.cmul_real(d, wv)?;
    let loss = tape.cnorm_sqr(dw)?;
    Ok((loss, vars))
}

/// Direct evaluation of the training loss.
pub fn stage2_loss(params: &ListaParams, e: &ComplexMatrix, data: &[Stage2Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Undefined("empty dataset".into()));
    }
    let p = ComplexMatrix::from_fn(e.cols(), data.len(), |r, c| data[c].p[r]);
    let out = lista_forward_batch(&p, params, e)?;
    let mut acc = 0.0;
    for (j, s) in data.iter().enumerate() {
        let hn = norm_sqr(&s.h);
        let err: f64 = s.h.iter().enumerate().map(|(i, z)| (out.get(i, j) - z).norm_sqr()).sum();
        acc += err / hn;
    }
    Ok(acc / (2.0 * data.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2TrainConfig {
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Update the dictionary as well as `lambda`, `kappa` and `V`.
    pub train_dictionary: bool,
    pub seed: u64,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            lr: 1e-4,
            batch_size: 32,
            episodes: 20,
            steps_per_episode: 50,
            train_dictionary: true,
            seed: 0,
        }
    }
}

/// Minibatch Adam training with `lambda` projected to be non-negative.
pub fn train_stage2(
    data: &[Stage2Sample],
    e: &ComplexMatrix,
    params: ListaParams,
    cfg: &Stage2TrainConfig,
) -> Result<(ListaParams, crate::stage1::TrainReport)> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Argument("stage II training needs data and a positive batch size".into()));
    }
    let mut params = params;
    let (m, tau) = params.v.shape();
    let g = params.f.cols();
    let sizes = [params.layers, params.layers, m * tau, m * tau, m * g, m * g];
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &sizes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut shuffle_rng = rng::substream(cfg.seed, purpose::MISC, 2);
    let mut trace = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let mut acc = 0.0;
        for _ in 0..cfg.steps_per_episode {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(data.len()) {
                if cursor == data.len() {
                    order.shuffle(&mut shuffle_rng);
                    cursor = 0;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            let mut tape = Tape::new();
            let (loss, vars) = stage2_loss_graph(&mut tape, &params, e, &batch)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    episode,
                    detail: format!("stage II loss became {lv}"),
                });
            }
            acc += lv;
            let grads = tape.backward(loss)?;
            let gl: Vec<f64> = vars.lambda.iter().map(|v| grads.wrt(*v).item()).collect();
            let gk: Vec<f64> = vars.kappa.iter().map(|v| grads.wrt(*v).item()).collect();
            adam.step(0, &mut params.lambda, &gl);
            params.lambda.iter_mut().for_each(|l| *l = l.max(0.0));
            adam.step(1, &mut params.kappa, &gk);
            update_complex(&mut adam, 2, &mut params.v, &grads.wrt(vars.v.re).data, &grads.wrt(vars.v.im).data);
            if cfg.train_dictionary {
                update_complex(&mut adam, 4, &mut params.f, &grads.wrt(vars.f.re).data, &grads.wrt(vars.f.im).data);
            }
        }
        trace.push(acc / cfg.steps_per_episode.max(1) as f64);
    }
    Ok((params, crate::stage1::TrainReport { loss_trace: trace }))
}

fn update_complex(adam: &mut Adam, group: usize, m: &mut ComplexMatrix, g_re: &[f64], g_im: &[f64]) {
    let mut re = m.re();
    let mut im = m.im();
    adam.step(group, &mut re, g_re);
    adam.step(group + 1, &mut im, g_im);
    for ((z, r), i) in m.data_mut().iter_mut().zip(re).zip(im) {
        *z = C64::new(r, i);
    }
}

/// `L_BR` samples per drawn scene, noise variance `sigma2/p` at a random
/// receive-side SNR.
pub fn generate_stage2_dataset<X: Executor>(
    sys: &SystemConfig,
    e: &ComplexMatrix,
    data: &crate::stage1::DataConfig,
    exec: &X,
) -> Result<Vec<Stage2Sample>> {
    let idx: Vec<u32> = (0..data.count as u32).collect();
    let per_scene = exec.map(&idx, |_, &i| {
        let mut r = rng::substream(data.seed, purpose::DATA_STAGE2, i);
        stage2_samples(sys, e, data.snr_db_range, &mut r)
    });
    let mut out = Vec::with_capacity(data.count * sys.l_br);
    for s in per_scene {
        out.extend(s?);
    }
    Ok(out)
}

pub fn stage2_samples<R: Rng + ?Sized>(
    sys: &SystemConfig,
    e: &ComplexMatrix,
    snr_db_range: (f64, f64),
    r: &mut R,
) -> Result<Vec<Stage2Sample>> {
    let scene = draw_scene(sys, r)?;
    let snr_db = rng::uniform(r, snr_db_range.0, snr_db_range.1);
    let sigma2 = noise_variance_for_snr(&scene.g[0], e, sys.p, snr_db)?;
    let noise_var = sigma2 / sys.p;
    let targets = stage2_targets(&scene, 0, sys.wavenumber(), sys.spacing())?;
    targets
        .into_iter()
        .enumerate()
        .map(|(l, h)| {
            let mut p = e.h_mul_vec(&h)?;
            if noise_var > 0.0 {
                p.iter_mut().for_each(|z| *z += rng::complex_normal(r, noise_var));
            }
            Ok(Stage2Sample {
                p,
                h,
                path: l,
                snr_db,
                noise_var,
            })
        })
        .collect()
}

/// `H_RIS` with rows `h_l^H` and `G = A_hat H_RIS`.
#[derive(Debug, Clone, PartialEq)]
pub struct RisSideEstimate {
    pub h_ris: ComplexMatrix,
    pub g: ComplexMatrix,
}

pub fn reconstruct(a_hat: &ComplexMatrix, h_hat: &[Vec<C64>]) -> Result<RisSideEstimate> {
    if h_hat.len() != a_hat.cols() {
        return Err(Error::shape("reconstruct", format!("{} estimates for {} columns", h_hat.len(), a_hat.cols())));
    }
    let m = h_hat.first().map_or(0, |h| h.len());
    if h_hat.iter().any(|h| h.len() != m) {
        return Err(Error::shape("reconstruct", "estimates differ in length"));
    }
    let h_ris = ComplexMatrix::from_fn(h_hat.len(), m, |l, c| h_hat[l][c].conj());
    let g = a_hat.matmul(&h_ris)?;
    Ok(RisSideEstimate { h_ris, g })
}

/// Projection, the unrolled network on every `p_l`, and reconstruction.
pub fn lista_ris_side(
    y: &ComplexMatrix,
    e: &ComplexMatrix,
    p: f64,
    a_hat: &ComplexMatrix,
    params: &ListaParams,
    mode: Projection,
) -> Result<ComplexMatrix> {
    let ps = project(y, a_hat, p, mode)?;
    if ps.is_empty() {
        return Ok(ComplexMatrix::zeros(y.rows(), e.rows()));
    }
    let pm = ComplexMatrix::from_fn(e.cols(), ps.len(), |r, c| ps[c][r]);
    let out = lista_forward_batch(&pm, params, e)?;
    let h_hat: Vec<Vec<C64>> = (0..ps.len()).map(|c| out.col(c)).collect();
    Ok(reconstruct(a_hat, &h_hat)?.g)
}

/// The full two-stage estimator.
#[allow(clippy::too_many_arguments)]
pub fn dncnn_istanet_estimate(
    y: &ComplexMatrix,
    e: &ComplexMatrix,
    p: f64,
    denoiser: &crate::stage1::DenoiserParams,
    f_n: &crate::polar::PolarDictionary,
    l_br: usize,
    params: &ListaParams,
    mode: Projection,
) -> Result<ComplexMatrix> {
    let support = crate::stage1::estimate_support(y, f_n, denoiser, l_br)?;
    lista_ris_side(y, e, p, &support.a_hat, params, mode)
}

/// `|F^H h|`, the coefficient profile of an estimate in the cascaded
/// dictionary.
pub fn polar_power_profile(f: &ComplexMatrix, h: &[C64]) -> Result<Vec<f64>> {
    crate::polar::correlation_profile(f, h)
}
