//! Training, Monte-Carlo sweeps and diagnostic reports.

use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context};
use serde::{Deserialize, Serialize};
use xlris_core::channel::{
    build_channels, db_to_linear, draw_scene, make_phase_matrix, noise_variance_for_snr, simulate_pilots, BsRisPath, PathParams, SystemConfig,
};
use xlris_core::exec::Executor;
use xlris_core::linalg::ComplexMatrix;
use xlris_core::metrics::{nmse, summarize};
use xlris_core::omp::{dncnn_omp_estimate, omp_estimate};
use xlris_core::polar::{
    build_cascaded_dictionary, build_dictionary, coherence_profile, count_peaks, sample_polar_grid, stage2_targets,
    CascadedDictionary, PolarDictionary,
};
use xlris_core::rng::{self, purpose};
use xlris_core::stage1::{
    generate_stage1_dataset, pack, replicate, row_energy, top1_power_fraction, train_stage1, DataConfig, DenoiserParams,
};
use xlris_core::stage2::{
    dncnn_istanet_estimate, generate_stage2_dataset, polar_power_profile, train_stage2, ListaParams,
};

use crate::config::{ExperimentConfig, SnrConvention};
use crate::io::{checkpoint_path, Checkpoint, Network};

pub struct Dictionaries {
    pub f_n: PolarDictionary,
    pub f_m: PolarDictionary,
    pub casc: CascadedDictionary,
}

pub fn build_dictionaries(cfg: &ExperimentConfig) -> anyhow::Result<Dictionaries> {
    let sys = &cfg.system;
    let (lambda, k, delta) = (sys.wavelength(), sys.wavenumber(), sys.spacing());
    let bs = sample_polar_grid(sys.n, lambda, delta, &cfg.bs_grid)?;
    let ris = sample_polar_grid(sys.m, lambda, delta, &cfg.ris_grid)?;
    let f_n = build_dictionary(&bs, sys.n, k, delta)?;
    let f_m = build_dictionary(&ris, sys.m, k, delta)?;
    let casc = build_cascaded_dictionary(&f_m, cfg.dedup_tol)?;
    Ok(Dictionaries { f_n, f_m, casc })
}

/// The fixed phase-shift matrix for the configured pilot length.
pub fn phase_matrix(cfg: &ExperimentConfig) -> anyhow::Result<ComplexMatrix> {
    let mut r = rng::substream(cfg.seed, purpose::PHASE_MATRIX, cfg.system.tau as u32);
    Ok(make_phase_matrix(cfg.system.m, cfg.system.tau, cfg.phase_design, &mut r)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModels {
    pub tau: usize,
    pub e: ComplexMatrix,
    pub denoiser: DenoiserParams,
    pub lista: ListaParams,
    pub stage1_trace: Vec<f64>,
    pub stage2_trace: Vec<f64>,
}

fn data_config(cfg: &ExperimentConfig, count: usize) -> DataConfig {
    DataConfig {
        snr_db_range: cfg.training.snr_db_range,
        count,
        seed: cfg.seed,
    }
}

pub fn train_stage1_model<X: Executor>(
    cfg: &ExperimentConfig,
    dicts: &Dictionaries,
    e: &ComplexMatrix,
    exec: &X,
) -> anyhow::Result<(DenoiserParams, Vec<f64>)> {
    let data = generate_stage1_dataset(&cfg.system, e, &dicts.f_n, &data_config(cfg, cfg.training.stage1_scenes), exec)?;
    let (params, rep) = train_stage1(&data, &cfg.stage1, None).context("training stage I")?;
    Ok((params, rep.loss_trace))
}

pub fn train_stage2_model<X: Executor>(
    cfg: &ExperimentConfig,
    dicts: &Dictionaries,
    e: &ComplexMatrix,
    exec: &X,
) -> anyhow::Result<(ListaParams, Vec<f64>)> {
    let data = generate_stage2_dataset(&cfg.system, e, &data_config(cfg, cfg.training.stage2_scenes), exec)?;
    let cal: Vec<_> = data.iter().map(|s| s.p.clone()).collect();
    let init = ListaParams::init(cfg.stage2.layers, e, &dicts.casc.f, &cal)?;
    let (params, rep) = train_stage2(&data, e, init, &cfg.stage2).context("training stage II")?;
    Ok((params, rep.loss_trace))
}

pub fn train_models<X: Executor>(cfg: &ExperimentConfig, dicts: &Dictionaries, exec: &X) -> anyhow::Result<TrainedModels> {
    let e = phase_matrix(cfg)?;
    let (denoiser, stage1_trace) = train_stage1_model(cfg, dicts, &e, exec)?;
    let (lista, stage2_trace) = train_stage2_model(cfg, dicts, &e, exec)?;
    Ok(TrainedModels {
        tau: cfg.system.tau,
        e,
        denoiser,
        lista,
        stage1_trace,
        stage2_trace,
    })
}

/// Whether missing checkpoints may be produced by training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPolicy {
    IfMissing,
    Never,
}

/// Loads both checkpoints for `cfg` from `dir`, training and writing any
/// that are missing when the policy allows it.
pub fn load_or_train<X: Executor>(
    cfg: &ExperimentConfig,
    dicts: &Dictionaries,
    dir: &Path,
    policy: TrainPolicy,
    exec: &X,
) -> anyhow::Result<TrainedModels> {
    let e = phase_matrix(cfg)?;
    let hash = cfg.hash();
    let p1 = checkpoint_path(dir, Network::Stage1, cfg);
    let (denoiser, stage1_trace) = if p1.exists() {
        let c = Checkpoint::<DenoiserParams>::read(&p1, Some(&hash))?;
        (c.params, c.loss_trace)
    } else {
        ensure!(policy == TrainPolicy::IfMissing, "no stage1 checkpoint at {} and training is disabled", p1.display());
        let (p, t) = train_stage1_model(cfg, dicts, &e, exec)?;
        Checkpoint::new(&hash, p.clone(), t.clone()).write(&p1)?;
        (p, t)
    };
    let p2 = checkpoint_path(dir, Network::Stage2, cfg);
    let (lista, stage2_trace) = if p2.exists() {
        let c = Checkpoint::<ListaParams>::read(&p2, Some(&hash))?;
        (c.params, c.loss_trace)
    } else {
        ensure!(policy == TrainPolicy::IfMissing, "no stage2 checkpoint at {} and training is disabled", p2.display());
        let (p, t) = train_stage2_model(cfg, dicts, &e, exec)?;
        Checkpoint::new(&hash, p.clone(), t.clone()).write(&p2)?;
        (p, t)
    };
    Ok(TrainedModels {
        tau: cfg.system.tau,
        e,
        denoiser,
        lista,
        stage1_trace,
        stage2_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Omp,
    DncnnOmp,
    DncnnIstanet,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Omp, Scheme::DncnnOmp, Scheme::DncnnIstanet];

    pub fn id(self) -> &'static str {
        match self {
            Scheme::Omp => "OMP",
            Scheme::DncnnOmp => "DnCNN-OMP",
            Scheme::DncnnIstanet => "DnCNN-ISTANET",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scheme: String,
    /// SNR in dB or pilot length, depending on the sweep.
    pub axis: f64,
    pub nmse_mean: f64,
    pub nmse_std: f64,
    pub trials: usize,
    /// Summed estimator time over the trials (s).
    pub wall_time_s: f64,
}

pub fn noise_variance(cfg: &ExperimentConfig, g: &ComplexMatrix, e: &ComplexMatrix, snr_db: f64) -> anyhow::Result<f64> {
    Ok(match cfg.snr_convention {
        SnrConvention::Receive => noise_variance_for_snr(g, e, cfg.system.p, snr_db)?,
        SnrConvention::Transmit => cfg.system.p / db_to_linear(snr_db),
    })
}

/// NMSE and estimator time of every scheme on one realisation.
pub fn run_trial(
    cfg: &ExperimentConfig,
    dicts: &Dictionaries,
    models: &TrainedModels,
    snr_db: f64,
    trial: u32,
    point: u32,
) -> anyhow::Result<[(f64, f64); 3]> {
    let sys = &cfg.system;
    // scenes depend on the trial only, so every sweep point sees the same ones
    let mut scene_rng = rng::substream(cfg.seed, purpose::EVAL, trial);
    let scene = draw_scene(sys, &mut scene_rng)?;
    let g = &scene.g[0];
    let e = &models.e;
    let sigma2 = noise_variance(cfg, g, e, snr_db)?;
    let mut noise_rng = rng::substream(cfg.seed ^ ((point as u64) << 32), purpose::PILOT_NOISE, trial);
    let y = simulate_pilots(g, e, sys.p, sigma2, &mut noise_rng)?.y;
    let mut out = [(0.0, 0.0); 3];
    for (slot, scheme) in Scheme::ALL.iter().enumerate() {
        let t0 = Instant::now();
        let g_hat = match scheme {
            Scheme::Omp => omp_estimate(&y, e, sys.p, &dicts.f_n.f, &dicts.casc.f, sys.l_br * sys.l_ru)?.g,
            Scheme::DncnnOmp => dncnn_omp_estimate(&y, e, sys.p, &models.denoiser, &dicts.f_n, &dicts.casc.f, sys.l_br, sys.l_ru, cfg.projection)?,
            Scheme::DncnnIstanet => dncnn_istanet_estimate(&y, e, sys.p, &models.denoiser, &dicts.f_n, sys.l_br, &models.lista, cfg.projection)?,
        };
        let dt = t0.elapsed().as_secs_f64();
        out[slot] = (nmse(&g_hat, g)?, dt);
    }
    Ok(out)
}

/// All schemes over `cfg.trials` shared realisations at one SNR.
pub fn evaluate_point<X: Executor>(
    cfg: &ExperimentConfig,
    dicts: &Dictionaries,
    models: &TrainedModels,
    snr_db: f64,
    axis: f64,
    point: u32,
    exec: &X,
) -> anyhow::Result<Vec<MetricsRecord>> {
    anyhow::ensure!(models.tau == cfg.system.tau, "models trained for tau = {} used at tau = {}", models.tau, cfg.system.tau);
    let trials: Vec<u32> = (0..cfg.trials as u32).collect();
    let results = exec
        .map(&trials, |_, &t| run_trial(cfg, dicts, models, snr_db, t, point))
        .into_iter()
        .collect::<anyhow::Result<Vec<_>>>()?;
    Scheme::ALL
        .iter()
        .enumerate()
        .map(|(slot, s)| {
            let v: Vec<f64> = results.iter().map(|r| r[slot].0).collect();
            let sum = summarize(&v)?;
            Ok(MetricsRecord {
                scheme: s.id().into(),
                axis,
                nmse_mean: sum.mean,
                nmse_std: sum.std,
                trials: sum.count,
                wall_time_s: results.iter().map(|r| r[slot].1).sum(),
            })
        })
        .collect()
}

pub fn run_snr_sweep<X: Executor>(
    cfg: &ExperimentConfig,
    dicts: &Dictionaries,
    models: &TrainedModels,
    exec: &X,
) -> anyhow::Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, &snr) in cfg.sweep.snr_db.iter().enumerate() {
        out.extend(evaluate_point(cfg, dicts, models, snr, snr, i as u32, exec)?);
    }
    Ok(out)
}

/// Sweeps the pilot length at `sweep.tau_snr_db`; `models_for` supplies
/// trained models for each pilot-length config.
pub fn run_pilot_sweep<X: Executor>(
    cfg: &ExperimentConfig,
    dicts: &Dictionaries,
    exec: &X,
    mut models_for: impl FnMut(&ExperimentConfig) -> anyhow::Result<TrainedModels>,
) -> anyhow::Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, &tau) in cfg.sweep.tau.iter().enumerate() {
        let c = cfg.with_tau(tau);
        let models = models_for(&c)?;
        out.extend(evaluate_point(&c, dicts, &models, cfg.sweep.tau_snr_db, tau as f64, i as u32, exec)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub network: String,
    pub layers: usize,
    pub trace: Vec<f64>,
}

/// Trains both networks at every configured depth.
pub fn run_loss_curves<X: Executor>(cfg: &ExperimentConfig, dicts: &Dictionaries, exec: &X) -> anyhow::Result<Vec<LossCurve>> {
    let e = phase_matrix(cfg)?;
    let mut out = Vec::new();
    for &layers in &cfg.sweep.layers {
        let mut c = cfg.clone();
        c.stage1.layers = layers;
        c.stage2.layers = layers;
        let (_, t1) = train_stage1_model(&c, dicts, &e, exec)?;
        out.push(LossCurve {
            network: "stage1".into(),
            layers,
            trace: t1,
        });
        let (_, t2) = train_stage2_model(&c, dicts, &e, exec)?;
        out.push(LossCurve {
            network: "stage2".into(),
            layers,
            trace: t2,
        });
    }
    Ok(out)
}

/// Row-power and cascaded-coefficient profiles for constructed scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// `|c_r|` for a single path sitting on a grid point.
    pub on_grid_profile: Vec<f64>,
    /// `|c_r|` for the off-grid placement with the lowest top-1 fraction.
    pub off_grid_profile: Vec<f64>,
    pub on_grid_top1: f64,
    pub off_grid_top1: f64,
    /// `(angle, distance)` of the worst off-grid placement.
    pub off_grid_placement: (f64, f64),
    /// `|F^H h_l|` over the cascaded dictionary for the drift scene.
    pub drift_profile: Vec<f64>,
    /// `(delta sin, delta curvature)` of each cascaded column.
    pub drift_params: Vec<(f64, f64)>,
    pub drift_peaks: usize,
    pub single_hop_coherence: (f64, f64),
    pub cascaded_coherence: (f64, f64),
}

/// Noiseless single-path pilots through an all-ones phase pattern.
fn single_path_pilots(sys: &SystemConfig, angle: f64, distance: f64) -> anyhow::Result<ComplexMatrix> {
    let s = SystemConfig {
        l_br: 1,
        l_ru: 1,
        k: 1,
        ..sys.clone()
    };
    let bs = [BsRisPath {
        bs: PathParams {
            angle,
            distance,
            gain: 1.0.into(),
        },
        ris_angle: 0.1,
        ris_distance: f64::INFINITY,
    }];
    let user = [vec![PathParams {
        angle: -0.2,
        distance: f64::INFINITY,
        gain: 1.0.into(),
    }]];
    let scene = build_channels(&s, &bs, &user)?;
    let e = ComplexMatrix::from_fn(s.m, s.tau.max(1), |_, _| 1.0.into());
    Ok(scene.g[0].matmul(&e)?)
}

/// Leakage on `bs`-side grid `f_n` and drift on the cascaded dictionary.
pub fn run_leakage_report(cfg: &ExperimentConfig, dicts: &Dictionaries) -> anyhow::Result<LeakageReport> {
    let sys = &cfg.system;
    let f_n = &dicts.f_n;
    let on = f_n.grid.entries[f_n.grid.entries.len() / 2 + 1];
    let y_on = single_path_pilots(sys, on.angle, on.distance)?;
    let on_grid_top1 = top1_power_fraction(&y_on, &f_n.f)?;
    let prof = |y: &ComplexMatrix| -> anyhow::Result<Vec<f64>> { Ok(row_energy(y, &f_n.f)?.iter().map(|z| z.norm()).collect()) };
    // worst case over half-bin angle offsets and near-field distances
    let (lo, hi) = cfg.bs_grid.sin_range;
    let bin = (hi - lo) / cfg.bs_grid.angle_count as f64;
    let mut worst = (f64::INFINITY, (on.angle, on.distance));
    for frac in [0.0, 0.25, 0.5] {
        for &d in &[f64::INFINITY, 20.0, 10.0, 5.0, 2.0, 1.0, sys.d_min.max(0.25)] {
            let angle = (on.sin + frac * bin).clamp(-1.0, 1.0).asin();
            let y = single_path_pilots(sys, angle, d)?;
            let t = top1_power_fraction(&y, &f_n.f)?;
            if t < worst.0 {
                worst = (t, (angle, d));
            }
        }
    }
    let y_off = single_path_pilots(sys, worst.1 .0, worst.1 .1)?;

    let (drift_profile, drift_params) = drift_profile(cfg, dicts)?;
    let casc = &dicts.casc;
    // one sin bin by a quarter of the ring spacing
    let (lo, hi) = cfg.ris_grid.sin_range;
    let radius = ((hi - lo) / cfg.ris_grid.angle_count as f64, 0.25 / (2.0 * dicts.f_m.grid.z_delta));
    let drift_peaks = count_peaks(&drift_profile, &drift_params, 3.0, radius);
    let single = coherence_profile(&dicts.f_m.f, 20);
    let cascaded = coherence_profile(&casc.f, 20);
    Ok(LeakageReport {
        on_grid_profile: prof(&y_on)?,
        off_grid_profile: prof(&y_off)?,
        on_grid_top1,
        off_grid_top1: worst.0,
        off_grid_placement: worst.1,
        drift_profile,
        drift_params,
        drift_peaks,
        single_hop_coherence: (single.max, single.mean),
        cascaded_coherence: (cascaded.max, cascaded.mean),
    })
}

/// Coefficient magnitudes and the `(delta_sin, delta_curvature)` of each column.
pub type DriftProfile = (Vec<f64>, Vec<(f64, f64)>);

/// `|F^H h_l|` for one BS-RIS path and one RIS-user path placed between
/// grid points in both angle and distance.
pub fn drift_profile(cfg: &ExperimentConfig, dicts: &Dictionaries) -> anyhow::Result<DriftProfile> {
    let sys = SystemConfig {
        l_br: 1,
        l_ru: 1,
        k: 1,
        ..cfg.system.clone()
    };
    let grid = &dicts.f_m.grid;
    let (lo, hi) = cfg.ris_grid.sin_range;
    let bin = (hi - lo) / cfg.ris_grid.angle_count as f64;
    let depart = grid.entries[grid.entries.len() / 3];
    let arrive = grid.entries[grid.entries.len() / 2];
    let phi = (depart.sin + 0.5 * bin).asin();
    let theta = (arrive.sin - 0.25 * bin).asin();
    // user between the first and second rings
    let d = 0.75 * dicts.f_m.grid.z_delta * (1.0 - (arrive.sin).powi(2));
    let bs = [BsRisPath {
        bs: PathParams {
            angle: 0.3,
            distance: 20.0,
            gain: 1.0.into(),
        },
        ris_angle: phi,
        ris_distance: 15.0,
    }];
    let users = [vec![PathParams {
        angle: theta,
        distance: d.max(sys.d_min),
        gain: 1.0.into(),
    }]];
    let scene = build_channels(&sys, &bs, &users)?;
    let h = stage2_targets(&scene, 0, sys.wavenumber(), sys.spacing())?;
    let profile = polar_power_profile(&dicts.casc.f, &h[0])?;
    Ok((profile, dicts.casc.params.clone()))
}

/// Measured sizes behind the gridding-complexity claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralSizes {
    pub n_g: usize,
    pub m_g: usize,
    pub m_g_prime: usize,
    /// Elements of one Stage I input image.
    pub stage1_input_len: usize,
    /// Width of the thresholded representation in Stage II.
    pub stage2_hidden_width: usize,
}

pub fn structural_sizes(cfg: &ExperimentConfig) -> anyhow::Result<StructuralSizes> {
    let dicts = build_dictionaries(cfg)?;
    let e = phase_matrix(cfg)?;
    let c_r = replicate(&vec![1.0.into(); dicts.f_n.f.cols()], cfg.system.l_br);
    let input = pack(&[&c_r], &[1.0])?;
    let lista = ListaParams::init(cfg.stage2.layers, &e, &dicts.casc.f, &[])?;
    Ok(StructuralSizes {
        n_g: dicts.f_n.f.cols(),
        m_g: dicts.f_m.f.cols(),
        m_g_prime: dicts.casc.len(),
        stage1_input_len: input.len(),
        stage2_hidden_width: lista.hidden_width(),
    })
}

/// Resolved configuration plus derived quantities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Info {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub wavelength_m: f64,
    pub spacing_m: f64,
    pub rayleigh_distance_bs_m: f64,
    pub rayleigh_distance_ris_m: f64,
    pub sizes: StructuralSizes,
}

pub fn info(cfg: &ExperimentConfig) -> anyhow::Result<Info> {
    let sys = &cfg.system;
    let rayleigh = |size: usize| {
        let d = size as f64 * sys.spacing();
        2.0 * d * d / sys.wavelength()
    };
    Ok(Info {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        wavelength_m: sys.wavelength(),
        spacing_m: sys.spacing(),
        rayleigh_distance_bs_m: rayleigh(sys.n),
        rayleigh_distance_ris_m: rayleigh(sys.m),
        sizes: structural_sizes(cfg)?,
    })
}
