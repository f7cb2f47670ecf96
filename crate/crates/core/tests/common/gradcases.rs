//! Central finite-difference checks for every differentiable tape primitive
//! and for the loss of both networks. Each case returns its worst relative
//! error.

use rand::Rng;
use xlris_core::autodiff::{Tape, Tensor, Var};
use xlris_core::rng;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(seed, 99);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect()).unwrap()
}

/// Worst relative error between the tape gradient and central differences.
fn check<F>(leaves: Vec<Tensor>, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let l = build(&mut t, &vars);
        (t, vars, l)
    };
    let (t, vars, l) = eval(&leaves);
    let grads = t.backward(l).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(vars[li]);
        for j in 0..leaf.len() {
            let mut plus = leaves.clone();
            plus[li].data[j] += h;
            let mut minus = leaves.clone();
            minus[li].data[j] -= h;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let a = analytic.data[j];
            worst = worst.max(rel_err(a, fd));
        }
    }
    worst
}

/// Weighted sum so that every output entry gets a distinct upstream gradient.
fn weighted(t: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = t.value(y).shape.clone();
    let w = t.constant(rand_tensor(&shape, seed, -1.0, 1.0));
    let p = t.mul(y, w).unwrap();
    t.sum(p).unwrap()
}

pub fn elementwise_ops() -> f64 {
    let a = rand_tensor(&[3, 2], 1, -1.0, 1.0);
    let b = rand_tensor(&[3, 2], 2, -1.0, 1.0);
    check(
        vec![a, b],
        |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let n = t.neg(m).unwrap();
            let c = t.scale(n, 1.7).unwrap();
            weighted(t, c, 3)
        }
    )
}

pub fn scale_by_scalar() -> f64 {
    check(
        vec![Tensor::scalar(0.7), rand_tensor(&[4], 4, -1.0, 1.0)],
        |t, v| {
            let y = t.scale_by(v[0], v[1]).unwrap();
            weighted(t, y, 5)
        }
    )
}

pub fn matmul_all_transpose_modes() -> f64 {
    let mut worst = 0.0f64;
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [2, 4] } else { [4, 2] };
        let err = check(
            vec![rand_tensor(&a_shape, 6, -1.0, 1.0), rand_tensor(&b_shape, 7, -1.0, 1.0)],
            |t, v| {
                let y = t.matmul(v[0], v[1], ta, tb).unwrap();
                weighted(t, y, 8)
            },
        );
        worst = worst.max(err);
    }
    worst
}

pub fn relu_away_from_kink() -> f64 {
    let mut x = rand_tensor(&[10], 9, -1.0, 1.0);
    for v in &mut x.data {
        if v.abs() < 0.05 {
            *v = 0.3;
        }
    }
    check(
        vec![x],
        |t, v| {
            let y = t.relu(v[0]).unwrap();
            weighted(t, y, 10)
        }
    )
}

pub fn conv2d_input_kernel_bias() -> f64 {
    check(
        vec![
            rand_tensor(&[2, 4, 3, 2], 11, -1.0, 1.0),
            rand_tensor(&[3, 3, 2, 3], 12, -1.0, 1.0),
            rand_tensor(&[3], 13, -1.0, 1.0),
        ],
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            weighted(t, y, 14)
        }
    )
}

pub fn batch_norm_train_mode() -> f64 {
    check(
        vec![
            rand_tensor(&[6, 3], 15, -1.0, 1.0),
            rand_tensor(&[3], 16, 0.5, 1.5),
            rand_tensor(&[3], 17, -0.5, 0.5),
        ],
        |t, v| {
            let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
            weighted(t, y, 18)
        }
    )
}

pub fn batch_norm_infer_mode() -> f64 {
    check(
        vec![
            rand_tensor(&[5, 2], 19, -1.0, 1.0),
            rand_tensor(&[2], 20, 0.5, 1.5),
            rand_tensor(&[2], 21, -0.5, 0.5),
        ],
        |t, v| {
            let y = t.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5).unwrap();
            weighted(t, y, 22)
        }
    )
}

pub fn complex_soft_threshold() -> f64 {
    // magnitudes well clear of the threshold so the kink is not straddled
    let mut r = rng::stream(23, 0);
    let n = 8;
    let mut re = Vec::new();
    let mut im = Vec::new();
    for i in 0..n {
        let mag = if i % 2 == 0 { 1.0 + r.random::<f64>() } else { 0.1 * r.random::<f64>() };
        let ph = core::f64::consts::TAU * r.random::<f64>();
        re.push(mag * ph.cos());
        im.push(mag * ph.sin());
    }
    check(
        vec![
            Tensor::new(vec![n], re).unwrap(),
            Tensor::new(vec![n], im).unwrap(),
            Tensor::scalar(0.5),
        ],
        |t, v| {
            let z = t.csoft_threshold(xlris_core::autodiff::CVar { re: v[0], im: v[1] }, v[2]).unwrap();
            let a = weighted(t, z.re, 24);
            let b = weighted(t, z.im, 25);
            t.add(a, b).unwrap()
        }
    )
}

pub fn complex_matmuls_and_norm() -> f64 {
    check(
        vec![
            rand_tensor(&[3, 4], 26, -1.0, 1.0),
            rand_tensor(&[3, 4], 27, -1.0, 1.0),
            rand_tensor(&[3, 2], 28, -1.0, 1.0),
            rand_tensor(&[3, 2], 29, -1.0, 1.0),
        ],
        |t, v| {
            use xlris_core::autodiff::CVar;
            let a = CVar { re: v[0], im: v[1] };
            let b = CVar { re: v[2], im: v[3] };
            let ahb = t.cmatmul_h(a, b).unwrap();
            let back = t.cmatmul(a, ahb).unwrap();
            t.cnorm_sqr(back).unwrap()
        }
    )
}

fn rel_err(a: f64, fd: f64) -> f64 {
    // central differences carry ~1e-10 of roundoff, so gradients that are
    // exactly zero (biases ahead of batch norm) are judged against 1e-4
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4)
}

pub fn full_denoiser_loss() -> f64 {
    use xlris_core::linalg::{ComplexMatrix, C64};
    use xlris_core::stage1::{stage1_loss_graph, DenoiserParams, Stage1Sample};

    let mut r = rng::stream(40, 0);
    let mut params = DenoiserParams::init(4, 3, 3, &mut r).unwrap();
    // move off the zero last layer and unit BN so every path carries gradient
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += 0.3 * (r.random::<f64>() - 0.5);
        }
    }
    let batch: Vec<Stage1Sample> = (0..3)
        .map(|s| {
            let c: Vec<C64> = (0..6).map(|_| C64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)).collect();
            let c_r = ComplexMatrix::from_fn(6, 2, |i, _| c[i]);
            let mut x_n = ComplexMatrix::zeros(6, 2);
            x_n.set(s, 0, c[s]);
            x_n.set(s + 2, 1, c[s + 2]);
            Stage1Sample { c_r, x_n, support: vec![s, s + 2], snr_db: 10.0 }
        })
        .collect();
    let refs: Vec<&Stage1Sample> = batch.iter().collect();
    let loss_of = |p: &DenoiserParams| {
        let mut t = Tape::new();
        let (l, _) = stage1_loss_graph(&mut t, p, &refs, true).unwrap();
        t.value(l).item()
    };
    let mut t = Tape::new();
    let (l, g) = stage1_loss_graph(&mut t, &params, &refs, true).unwrap();
    let grads = t.backward(l).unwrap();
    let h = 1e-6;
    let count = params.tensors().len();
    let mut worst = 0.0f64;
    for ti in 0..count {
        let analytic = grads.wrt(g.params[ti]);
        for j in 0..analytic.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[j] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = analytic.data[j];
            worst = worst.max(rel_err(a, fd));
        }
    }
    worst
}

pub fn full_lista_loss() -> f64 {
    use xlris_core::channel::{make_phase_matrix, PhaseDesign};
    use xlris_core::linalg::{ComplexMatrix, C64};
    use xlris_core::stage2::{stage2_loss_graph, ListaParams, Stage2Sample};

    let (m, tau, g) = (6, 4, 9);
    let mut r = rng::stream(41, 0);
    let e = make_phase_matrix(m, tau, PhaseDesign::Random, &mut r).unwrap();
    let f = ComplexMatrix::from_fn(m, g, |_, _| C64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5));
    let batch: Vec<Stage2Sample> = (0..3)
        .map(|s| {
            let h: Vec<C64> = (0..m).map(|_| C64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)).collect();
            let p = e.h_mul_vec(&h).unwrap();
            Stage2Sample { p, h, path: s, snr_db: 20.0, noise_var: 0.0 }
        })
        .collect();
    let cal: Vec<Vec<C64>> = batch.iter().map(|s| s.p.clone()).collect();
    let mut params = ListaParams::init(3, &e, &f, &cal).unwrap();
    params.lambda = vec![0.8, 1.1, 1.3];
    params.kappa = vec![0.9, 1.2, 0.7];
    let refs: Vec<&Stage2Sample> = batch.iter().collect();
    let loss_of = |p: &ListaParams| {
        let mut t = Tape::new();
        let (l, _) = stage2_loss_graph(&mut t, p, &e, &refs).unwrap();
        t.value(l).item()
    };
    let mut t = Tape::new();
    let (l, vars) = stage2_loss_graph(&mut t, &params, &e, &refs).unwrap();
    let grads = t.backward(l).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut compare = |a: f64, fd: f64| worst = worst.max(rel_err(a, fd));
    for k in 0..params.layers {
        for (which, var) in [(0, vars.lambda[k]), (1, vars.kappa[k])] {
            let bump = |d: f64| {
                let mut p = params.clone();
                if which == 0 { p.lambda[k] += d } else { p.kappa[k] += d }
                loss_of(&p)
            };
            compare(grads.wrt(var).item(), (bump(h) - bump(-h)) / (2.0 * h));
        }
    }
    for (which, cv) in [(0, vars.v), (1, vars.f)] {
        let (gre, gim) = grads.wrt_complex(cv);
        for j in 0..gre.len() {
            for (part, a) in [(0, gre.data[j]), (1, gim.data[j])] {
                let bump = |d: f64| {
                    let mut p = params.clone();
                    let mat = if which == 0 { &mut p.v } else { &mut p.f };
                    let z = &mut mat.data_mut()[j];
                    if part == 0 { z.re += d } else { z.im += d }
                    loss_of(&p)
                };
                compare(a, (bump(h) - bump(-h)) / (2.0 * h));
            }
        }
    }
    worst
}

/// Every case with the tolerance it is held to.
pub type Case = (&'static str, fn() -> f64, f64);

pub const CASES: &[Case] = &[
    ("elementwise_ops", elementwise_ops, 1e-6),
    ("scale_by_scalar", scale_by_scalar, 1e-6),
    ("matmul_all_transpose_modes", matmul_all_transpose_modes, 1e-6),
    ("relu_away_from_kink", relu_away_from_kink, 1e-6),
    ("conv2d_input_kernel_bias", conv2d_input_kernel_bias, 1e-5),
    ("batch_norm_train_mode", batch_norm_train_mode, 1e-5),
    ("batch_norm_infer_mode", batch_norm_infer_mode, 1e-6),
    ("complex_soft_threshold", complex_soft_threshold, 1e-5),
    ("complex_matmuls_and_norm", complex_matmuls_and_norm, 1e-5),
    ("full_denoiser_loss", full_denoiser_loss, 1e-4),
    ("full_lista_loss", full_lista_loss, 1e-4),
];
