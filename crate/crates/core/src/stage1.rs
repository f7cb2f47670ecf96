//! Stage I: polar-domain row energy, the residual convolutional denoiser and
//! BS-side support selection.
//!
//! The denoiser sees `C_r` (the row-energy column replicated `L_BR` times) as
//! an `N_G x L_BR` image with two channels (real, imaginary). It predicts the
//! residual `R(C_r)`, and `C_r - R(C_r)` is the cleaned row-sparse estimate.
//! Column `l` of the target `X_N` carries path `l`'s nearest-grid amplitude,
//! paths being ordered by grid index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_norm_apply, conv2d_forward, Tape, Tensor, Var};
use crate::channel::{draw_scene, noise_variance_for_snr, simulate_pilots, steering_vector, SystemConfig};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::linalg::{inner, ComplexMatrix, C64, ZERO};
use crate::math;
use crate::optim::{Adam, AdamConfig};
use crate::polar::PolarDictionary;
use crate::rng::{self, purpose};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `c_r = (1/tau) sum_i [F_N^H Y]_{:,i}`.
pub fn row_energy(y: &ComplexMatrix, f_n: &ComplexMatrix) -> Result<Vec<C64>> {
    if y.rows() != f_n.rows() {
        return Err(Error::shape("row_energy", format!("Y {:?} vs F_N {:?}", y.shape(), f_n.shape())));
    }
    let tau = y.cols() as f64;
    let sums: Vec<C64> = (0..y.rows()).map(|r| y.row(r).iter().sum::<C64>() / tau).collect();
    f_n.h_mul_vec(&sums)
}

/// Row energy averaged over users that share the BS-side paths.
pub fn row_energy_multi(ys: &[ComplexMatrix], f_n: &ComplexMatrix) -> Result<Vec<C64>> {
    if ys.is_empty() {
        return Err(Error::Argument("no observations".into()));
    }
    let mut acc = vec![ZERO; f_n.cols()];
    for y in ys {
        for (a, v) in acc.iter_mut().zip(row_energy(y, f_n)?) {
            *a += v;
        }
    }
    let k = ys.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// `[c_r, ..., c_r]`, `N_G x l_br`.
pub fn replicate(c_r: &[C64], l_br: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(c_r.len(), l_br, |r, _| c_r[r])
}

/// Largest row power of `F_N^H Y` over the total.
pub fn top1_power_fraction(y: &ComplexMatrix, f_n: &ComplexMatrix) -> Result<f64> {
    let yp = f_n.h_matmul(y)?;
    let powers: Vec<f64> = (0..yp.rows()).map(|r| yp.row(r).iter().map(|z| z.norm_sqr()).sum()).collect();
    let total: f64 = powers.iter().sum();
    if total == 0.0 {
        return Err(Error::Undefined("row powers are all zero".into()));
    }
    Ok(powers.iter().copied().fold(0.0, f64::max) / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[k, k, c_in, c_out]`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Conv+ReLU, then `L_c - 2` blocks of conv+BN+ReLU, then a two-channel conv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub layers: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub convs: Vec<ConvLayer>,
    pub bns: Vec<BatchNormLayer>,
}

impl DenoiserParams {
    /// Fan-in scaled Gaussian kernels, zero biases, unit BN scale. The last
    /// kernel starts at zero, so an untrained denoiser returns its input.
    pub fn init<R: Rng + ?Sized>(layers: usize, width: usize, kernel_size: usize, r: &mut R) -> Result<Self> {
        if layers < 2 || width == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "denoiser needs >= 2 layers, width >= 1 and an odd kernel, got {layers}, {width}, {kernel_size}"
            )));
        }
        let mut convs = Vec::with_capacity(layers);
        for l in 0..layers {
            let ci = if l == 0 { 2 } else { width };
            let co = if l + 1 == layers { 2 } else { width };
            let fan_in = (kernel_size * kernel_size * ci) as f64;
            let std = if l + 1 == layers { 0.0 } else { math::sqrt(2.0 / fan_in) };
            let n = kernel_size * kernel_size * ci * co;
            let data = (0..n).map(|_| std * rng::normal(r)).collect();
            convs.push(ConvLayer {
                kernel: Tensor::new(vec![kernel_size, kernel_size, ci, co], data)?,
                bias: Tensor::zeros(&[co]),
            });
        }
        let bns = (0..layers - 2)
            .map(|_| BatchNormLayer {
                gamma: Tensor::full(&[width], 1.0),
                beta: Tensor::zeros(&[width]),
                running_mean: vec![0.0; width],
                running_var: vec![1.0; width],
            })
            .collect();
        Ok(Self {
            layers,
            width,
            kernel_size,
            convs,
            bns,
        })
    }

    /// Trainable tensors in a fixed order: every conv (kernel, bias), then
    /// every BN (gamma, beta).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for c in &self.convs {
            out.push(&c.kernel);
            out.push(&c.bias);
        }
        for b in &self.bns {
            out.push(&b.gamma);
            out.push(&b.beta);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        for b in &mut self.bns {
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Network built on a tape: the residual output with the parameter leaves in
/// [`DenoiserParams::tensors`] order and the train-mode BN nodes.
pub struct DenoiserGraph {
    pub output: Var,
    pub params: Vec<Var>,
    pub bn_nodes: Vec<Var>,
}

/// Records the forward pass on `tape`. `train` selects batch statistics for
/// BN, otherwise the running statistics are used.
pub fn denoiser_graph(tape: &mut Tape, params: &DenoiserParams, input: Var, train: bool) -> Result<DenoiserGraph> {
    let pv: Vec<Var> = params.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
    let conv = |l: usize| (pv[2 * l], pv[2 * l + 1]);
    let bn = |b: usize| (pv[2 * params.layers + 2 * b], pv[2 * params.layers + 2 * b + 1]);
    let mut bn_nodes = Vec::new();
    let (k, b) = conv(0);
    let mut x = tape.conv2d(input, k, b)?;
    x = tape.relu(x)?;
    for l in 1..params.layers - 1 {
        let (k, b) = conv(l);
        x = tape.conv2d(x, k, b)?;
        let (g, be) = bn(l - 1);
        x = if train {
            let y = tape.batch_norm_train(x, g, be, BN_EPS)?;
            bn_nodes.push(y);
            y
        } else {
            let layer = &params.bns[l - 1];
            tape.batch_norm_infer(x, g, be, &layer.running_mean, &layer.running_var, BN_EPS)?
        };
        x = tape.relu(x)?;
    }
    let (k, b) = conv(params.layers - 1);
    let output = tape.conv2d(x, k, b)?;
    Ok(DenoiserGraph {
        output,
        params: pv,
        bn_nodes,
    })
}

/// Inference-mode forward pass on a `[B, N_G, L_BR, 2]` tensor.
pub fn denoiser_forward(params: &DenoiserParams, input: &Tensor) -> Result<Tensor> {
    let relu = |t: &mut Tensor| t.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let c0 = &params.convs[0];
    let mut x = conv2d_forward(input, &c0.kernel, &c0.bias)?;
    relu(&mut x);
    for l in 1..params.layers - 1 {
        let c = &params.convs[l];
        x = conv2d_forward(&x, &c.kernel, &c.bias)?;
        let b = &params.bns[l - 1];
        x = batch_norm_apply(&x, &b.gamma.data, &b.beta.data, &b.running_mean, &b.running_var, BN_EPS);
        relu(&mut x);
    }
    let cl = &params.convs[params.layers - 1];
    conv2d_forward(&x, &cl.kernel, &cl.bias)
}

/// Packs complex matrices (`N_G x L_BR`, all the same shape) into
/// `[B, N_G, L_BR, 2]`, each scaled by its factor.
pub fn pack(mats: &[&ComplexMatrix], scales: &[f64]) -> Result<Tensor> {
    let (h, w) = mats.first().map(|m| m.shape()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(mats.len() * h * w * 2);
    for (m, s) in mats.iter().zip(scales) {
        if m.shape() != (h, w) {
            return Err(Error::shape("pack", format!("{:?} vs {:?}", m.shape(), (h, w))));
        }
        for z in m.data() {
            data.push(z.re * s);
            data.push(z.im * s);
        }
    }
    Tensor::new(vec![mats.len(), h, w, 2], data)
}

fn unpack(t: &Tensor, b: usize, scale: f64) -> ComplexMatrix {
    let (h, w) = (t.shape[1], t.shape[2]);
    let off = b * h * w * 2;
    ComplexMatrix::from_fn(h, w, |r, c| {
        let i = off + (r * w + c) * 2;
        C64::new(t.data[i] * scale, t.data[i + 1] * scale)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub residual: ComplexMatrix,
    pub cleaned: ComplexMatrix,
}

/// `C_r` is scaled to unit Frobenius norm for the network and the residual
/// scaled back.
pub fn denoise(c_r: &ComplexMatrix, params: &DenoiserParams) -> Result<Denoised> {
    let norm = c_r.frobenius();
    let s = if norm > 0.0 { norm } else { 1.0 };
    let input = pack(&[c_r], &[1.0 / s])?;
    let out = denoiser_forward(params, &input)?;
    let residual = unpack(&out, 0, s);
    let cleaned = c_r.sub(&residual)?;
    Ok(Denoised { residual, cleaned })
}

/// One training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Sample {
    /// `N_G x L_BR`, identical columns.
    pub c_r: ComplexMatrix,
    /// `N_G x L_BR`, one nonzero per column.
    pub x_n: ComplexMatrix,
    /// Nearest-grid row of each path, ascending.
    pub support: Vec<usize>,
    pub snr_db: f64,
}

/// Builds the target for a scene: path `l`'s noiseless contribution to `c_r`
/// at its nearest grid row.
pub fn stage1_target(
    sys: &SystemConfig,
    scene: &crate::channel::SceneRealization,
    user: usize,
    e: &ComplexMatrix,
    f_n: &PolarDictionary,
) -> Result<(ComplexMatrix, Vec<usize>)> {
    let (k, delta) = (sys.wavenumber(), sys.spacing());
    let h = &scene.h[user];
    let tau = e.cols() as f64;
    let e_sum: Vec<C64> = (0..e.rows()).map(|r| e.row(r).iter().sum()).collect();
    let he: Vec<C64> = h.iter().zip(&e_sum).map(|(a, b)| a * b).collect();
    let mut entries: Vec<(usize, C64)> = Vec::new();
    for p in &scene.bs_ris_paths {
        let a_m = steering_vector(sys.m, p.ris_angle, p.ris_distance, k, delta)?;
        let w = inner(&a_m, &he);
        let a_n = steering_vector(sys.n, p.bs.angle, p.bs.distance, k, delta)?;
        let g = f_n.grid.nearest(p.bs.angle, p.bs.distance);
        let amp = inner(&f_n.f.col(g), &a_n) * p.bs.gain * w * (math::sqrt(sys.p) / tau);
        entries.push((g, amp));
    }
    entries.sort_by_key(|e| e.0);
    let mut x = ComplexMatrix::zeros(f_n.f.cols(), entries.len());
    for (l, &(g, v)) in entries.iter().enumerate() {
        x.set(g, l, v);
    }
    Ok((x, entries.iter().map(|e| e.0).collect()))
}

/// Scene, pilot and SNR settings for synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub snr_db_range: (f64, f64),
    pub count: usize,
    pub seed: u64,
}

/// Draws `count` scenes, observes them through `e` at a random SNR and pairs
/// the row energy with its target.
pub fn generate_stage1_dataset<X: Executor>(
    sys: &SystemConfig,
    e: &ComplexMatrix,
    f_n: &PolarDictionary,
    data: &DataConfig,
    exec: &X,
) -> Result<Vec<Stage1Sample>> {
    let idx: Vec<u32> = (0..data.count as u32).collect();
    exec.map(&idx, |_, &i| {
        let mut r = rng::substream(data.seed, purpose::DATA_STAGE1, i);
        stage1_sample(sys, e, f_n, data.snr_db_range, &mut r)
    })
    .into_iter()
    .collect()
}

pub fn stage1_sample<R: Rng + ?Sized>(
    sys: &SystemConfig,
    e: &ComplexMatrix,
    f_n: &PolarDictionary,
    snr_db_range: (f64, f64),
    r: &mut R,
) -> Result<Stage1Sample> {
    let scene = draw_scene(sys, r)?;
    let snr_db = rng::uniform(r, snr_db_range.0, snr_db_range.1);
    let sigma2 = noise_variance_for_snr(&scene.g[0], e, sys.p, snr_db)?;
    let pb = simulate_pilots(&scene.g[0], e, sys.p, sigma2, r)?;
    let c = row_energy(&pb.y, &f_n.f)?;
    let (x_n, support) = stage1_target(sys, &scene, 0, e, f_n)?;
    Ok(Stage1Sample {
        c_r: replicate(&c, sys.l_br),
        x_n,
        support,
        snr_db,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1TrainConfig {
    pub layers: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub seed: u64,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 16,
            kernel_size: 3,
            lr: 5e-5,
            batch_size: 32,
            episodes: 20,
            steps_per_episode: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss of each episode.
    pub loss_trace: Vec<f64>,
}

/// Normalised network input and residual target of one sample.
fn normalized_pair(s: &Stage1Sample) -> Result<(f64, ComplexMatrix)> {
    let n = s.c_r.frobenius();
    let scale = if n > 0.0 { 1.0 / n } else { 1.0 };
    Ok((scale, s.c_r.sub(&s.x_n)?))
}

/// Loss graph `(1/2B) sum ||R(C_r) - (C_r - X_N)||^2` on a minibatch.
pub fn stage1_loss_graph(
    tape: &mut Tape,
    params: &DenoiserParams,
    batch: &[&Stage1Sample],
    train: bool,
) -> Result<(Var, DenoiserGraph)> {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut scales = Vec::with_capacity(batch.len());
    for s in batch {
        let (scale, t) = normalized_pair(s)?;
        inputs.push(&s.c_r);
        targets.push(t);
        scales.push(scale);
    }
    let x = tape.constant(pack(&inputs, &scales)?);
    let tref: Vec<&ComplexMatrix> = targets.iter().collect();
    let y = tape.constant(pack(&tref, &scales)?);
    let graph = denoiser_graph(tape, params, x, train)?;
    let diff = tape.sub(graph.output, y)?;
    let ss = tape.sum_squares(diff)?;
    let loss = tape.scale(ss, 0.5 / batch.len() as f64)?;
    Ok((loss, graph))
}

/// Minibatch Adam training; returns the parameters and per-episode losses.
pub fn train_stage1(
    data: &[Stage1Sample],
    cfg: &Stage1TrainConfig,
    init: Option<DenoiserParams>,
) -> Result<(DenoiserParams, TrainReport)> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Argument("stage I training needs data and a positive batch size".into()));
    }
    for s in data {
        if s.c_r.shape() != s.x_n.shape() {
            return Err(Error::shape("train_stage1", "C_r and X_N differ in shape"));
        }
    }
    let mut params = match init {
        Some(p) => p,
        None => {
            let mut r = rng::substream(cfg.seed, purpose::INIT_STAGE1, 0);
            DenoiserParams::init(cfg.layers, cfg.width, cfg.kernel_size, &mut r)?
        }
    };
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &sizes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut shuffle_rng = rng::substream(cfg.seed, purpose::MISC, 1);
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
            let (loss, graph) = stage1_loss_graph(&mut tape, &params, &batch, true)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    episode,
                    detail: format!("stage I loss became {lv}"),
                });
            }
            acc += lv;
            let grads = tape.backward(loss)?;
            for (gi, (t, v)) in params.tensors_mut().into_iter().zip(&graph.params).enumerate() {
                adam.step(gi, &mut t.data, &grads.wrt(*v).data);
            }
            for (layer, node) in params.bns.iter_mut().zip(&graph.bn_nodes) {
                let (mean, var) = tape.batch_stats(*node).expect("train-mode BN node");
                let count = (tape.value(*node).len() / layer.running_mean.len()) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..mean.len() {
                    layer.running_mean[c] = (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * mean[c];
                    layer.running_var[c] = (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * var[c] * unbias;
                }
            }
        }
        trace.push(acc / cfg.steps_per_episode.max(1) as f64);
    }
    Ok((params, TrainReport { loss_trace: trace }))
}

/// Selected BS-side grid rows and the matching dictionary columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportEstimate {
    /// Distinct, ascending.
    pub indices: Vec<usize>,
    /// `N x L_BR`.
    pub a_hat: ComplexMatrix,
}

/// Greedy top-`count` by score with a guard band of `guard` indices around
/// every pick; ties go to the lower index.
pub fn top_with_guard(scores: &[f64], count: usize, guard: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::new();
    for &i in &order {
        if picked.len() == count {
            break;
        }
        if picked.iter().all(|&p| p.abs_diff(i) > guard) {
            picked.push(i);
        }
    }
    // fall back to unguarded picks if the band exhausted the candidates
    for &i in &order {
        if picked.len() == count {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

fn assemble(indices: Vec<usize>, f_n: &PolarDictionary) -> SupportEstimate {
    let a_hat = f_n.f.select_columns(&indices);
    SupportEstimate { indices, a_hat }
}

/// About one array resolution cell (`2/N` in `sin`) expressed in grid
/// steps, less one, and never below one.
pub fn resolution_guard(f_n: &PolarDictionary) -> usize {
    let g = &f_n.grid;
    if g.angle_count < 2 || f_n.size == 0 {
        return 1;
    }
    let (lo, hi) = g
        .entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.sin), hi.max(e.sin)));
    let step = (hi - lo) / (g.angle_count - 1) as f64;
    if !(step > 0.0) {
        return 1;
    }
    let cells = (2.0 / (f_n.size as f64 * step)) as usize;
    cells.saturating_sub(1).max(1)
}

/// Top `l_br` rows of `c_hat` by magnitude summed over columns.
pub fn select_support(c_hat: &ComplexMatrix, l_br: usize, f_n: &PolarDictionary) -> Result<SupportEstimate> {
    if l_br > c_hat.rows() || c_hat.rows() != f_n.f.cols() {
        return Err(Error::shape("select_support", format!("L_BR {l_br}, C {:?}, F_N {:?}", c_hat.shape(), f_n.f.shape())));
    }
    let scores: Vec<f64> = (0..c_hat.rows()).map(|r| c_hat.row(r).iter().map(|z| z.norm()).sum()).collect();
    Ok(assemble(top_with_guard(&scores, l_br, resolution_guard(f_n)), f_n))
}

/// Non-learned baseline: top `l_br` entries of `|c_r|` with the same guard
/// band.
pub fn peak_pick_baseline(c_r: &[C64], l_br: usize, f_n: &PolarDictionary) -> Result<SupportEstimate> {
    if l_br > c_r.len() || c_r.len() != f_n.f.cols() {
        return Err(Error::shape("peak_pick_baseline", format!("L_BR {l_br}, c_r {}", c_r.len())));
    }
    let scores: Vec<f64> = c_r.iter().map(|z| z.norm()).collect();
    Ok(assemble(top_with_guard(&scores, l_br, resolution_guard(f_n)), f_n))
}

/// Row energy, denoising and support selection from one pilot block.
pub fn estimate_support(y: &ComplexMatrix, f_n: &PolarDictionary, params: &DenoiserParams, l_br: usize) -> Result<SupportEstimate> {
    let c_r = replicate(&row_energy(y, &f_n.f)?, l_br);
    let d = denoise(&c_r, params)?;
    select_support(&d.cleaned, l_br, f_n)
}
