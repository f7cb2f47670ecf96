//! Command-line front end.
//!
//! Errors are reported on stderr as one JSON object
//! `{"error": <message>, "exit_code": <code>}`. Usage and configuration
//! problems exit with 2, failures while running with 1.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use xlris_core::channel::{draw_scene, simulate_pilots};
use xlris_core::rng::{self, purpose};

use crate::config::ExperimentConfig;
use crate::harness::{
    build_dictionaries, evaluate_point, info, load_or_train, noise_variance, phase_matrix, run_leakage_report, run_loss_curves,
    run_pilot_sweep, run_snr_sweep, train_stage1_model, train_stage2_model, Dictionaries, MetricsRecord, TrainPolicy,
};
use crate::io::{checkpoint_path, print_json, write_csv, write_json, Checkpoint, Network, SceneFile, TableMeta};
use crate::par::Parallel;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 1;

pub const SWEEP_COLUMNS_SNR: [&str; 5] = ["scheme", "snr_db", "nmse_mean", "nmse_std", "trials"];
pub const SWEEP_COLUMNS_TAU: [&str; 5] = ["scheme", "tau", "nmse_mean", "nmse_std", "trials"];

#[derive(Debug, Parser)]
#[command(name = "xlris", version, about = "Near-field XL-RIS cascaded channel estimation experiments")]
pub struct Cli {
    /// Experiment config (JSON). Defaults to the built-in profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no config file is given: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    pub profile: String,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the Monte-Carlo trial count.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Fail instead of training when a checkpoint is missing.
    #[arg(long, global = true)]
    pub no_train: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw scenes and pilot blocks and write them as scene files.
    Simulate {
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// SNR of the simulated pilots (dB).
        #[arg(long, default_value_t = 20.0)]
        snr: f64,
    },
    /// Write the BS, RIS and cascaded dictionary grids as CSV.
    BuildDict,
    /// Train one network and write its checkpoint and loss trace.
    Train {
        #[arg(value_enum)]
        stage: Stage,
    },
    /// Evaluate every scheme at one SNR.
    Eval {
        /// SNR (dB); defaults to the largest sweep value.
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Run a sweep and write its CSV.
    Sweep {
        #[arg(value_enum)]
        axis: Axis,
    },
    /// Leakage and drift profiles.
    Leakage,
    /// Print the resolved config with derived quantities.
    Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Snr,
    Tau,
    Layers,
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

#[derive(Serialize)]
struct ErrorReport {
    error: String,
    exit_code: i32,
}

fn report(message: String, exit_code: i32) -> i32 {
    let r = ErrorReport { error: message, exit_code };
    eprintln!("{}", serde_json::to_string(&r).expect("error report serializes"));
    exit_code
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            return report(first_line(&e.to_string()), EXIT_USAGE);
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => report(format!("{e:#}"), EXIT_USAGE),
        Err(Failure::Run(e)) => report(format!("{e:#}"), EXIT_FAILURE),
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").trim_start_matches("error: ").to_string()
}

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::profile(&cli.profile)?,
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(cli).map_err(Failure::Usage)?;
    let out = PathBuf::from(&cfg.out_dir);
    let policy = if cli.no_train { TrainPolicy::Never } else { TrainPolicy::IfMissing };
    let exec = Parallel::from_env().map_err(Failure::Usage)?;
    match &cli.command {
        Command::Info => print_json(&info(&cfg)?)?,
        Command::BuildDict => build_dict(&cfg, &out)?,
        Command::Simulate { count, snr } => simulate(&cfg, &out, *count, *snr)?,
        Command::Train { stage } => train(&cfg, &out, *stage, &exec)?,
        Command::Eval { snr } => {
            let dicts = build_dictionaries(&cfg)?;
            let models = load_or_train(&cfg, &dicts, &checkpoint_dir(&out), policy, &exec)?;
            let snr = snr.unwrap_or(*cfg.sweep.snr_db.last().expect("validated nonempty"));
            let recs = evaluate_point(&cfg, &dicts, &models, snr, snr, 0, &exec)?;
            let rows: Vec<_> = recs.iter().map(|r| (&r.scheme, r.axis, r.nmse_mean, r.nmse_std, r.trials, r.wall_time_s)).collect();
            let cols = ["scheme", "snr_db", "nmse_mean", "nmse_std", "trials", "wall_time_s"];
            write_csv(&out.join("eval.csv"), &cols, &rows, &TableMeta::new("eval", &cols, &cfg))?;
            print_json(&recs)?;
        }
        Command::Sweep { axis } => sweep(&cfg, &out, *axis, policy, &exec)?,
        Command::Leakage => leakage(&cfg, &out)?,
    }
    Ok(())
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn build_dict(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let d = build_dictionaries(cfg)?;
    let cols = ["index", "sin", "distance_m", "ring"];
    for (name, dict) in [("bs_grid", &d.f_n), ("ris_grid", &d.f_m)] {
        let rows: Vec<_> = dict.grid.entries.iter().enumerate().map(|(i, g)| (i, g.sin, g.distance, g.ring)).collect();
        write_csv(&out.join(format!("{name}.csv")), &cols, &rows, &TableMeta::new(name, &cols, cfg))?;
    }
    let cols = ["index", "delta_sin", "delta_curvature"];
    let rows: Vec<_> = d.casc.params.iter().enumerate().map(|(i, p)| (i, p.0, p.1)).collect();
    write_csv(&out.join("cascaded_grid.csv"), &cols, &rows, &TableMeta::new("cascaded_grid", &cols, cfg))?;
    print_json(&sizes(&d))
}

#[derive(Serialize)]
struct DictSizes {
    n_g: usize,
    m_g: usize,
    m_g_prime: usize,
}

fn sizes(d: &Dictionaries) -> DictSizes {
    DictSizes {
        n_g: d.f_n.f.cols(),
        m_g: d.f_m.f.cols(),
        m_g_prime: d.casc.len(),
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Path, count: usize, snr: f64) -> anyhow::Result<()> {
    let sys = &cfg.system;
    let e = phase_matrix(cfg)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::substream(cfg.seed, purpose::SCENE, i as u32);
        let scene = draw_scene(sys, &mut r)?;
        let mut noise = rng::substream(cfg.seed, purpose::PILOT_NOISE, i as u32);
        let pilots = scene
            .g
            .iter()
            .map(|g| Ok(simulate_pilots(g, &e, sys.p, noise_variance(cfg, g, &e, snr)?, &mut noise)?))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let path = out.join("scenes").join(format!("scene_{i:04}.json"));
        write_json(&path, &SceneFile::new(sys, &scene, &pilots))?;
        written.push(path.to_string_lossy().into_owned());
    }
    print_json(&written)
}

fn write_trace(path: &Path, trace: &[f64], cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let cols = ["episode", "loss"];
    let rows: Vec<_> = trace.iter().enumerate().map(|(i, l)| (i + 1, *l)).collect();
    write_csv(path, &cols, &rows, &TableMeta::new("loss_trace", &cols, cfg))
}

fn train(cfg: &ExperimentConfig, out: &Path, stage: Stage, exec: &Parallel) -> anyhow::Result<()> {
    let dicts = build_dictionaries(cfg)?;
    let e = phase_matrix(cfg)?;
    let hash = cfg.hash();
    let dir = checkpoint_dir(out);
    let (path, trace) = match stage {
        Stage::Stage1 => {
            let (p, t) = train_stage1_model(cfg, &dicts, &e, exec)?;
            let path = checkpoint_path(&dir, Network::Stage1, cfg);
            Checkpoint::new(&hash, p, t.clone()).write(&path)?;
            write_trace(&out.join("stage1_loss.csv"), &t, cfg)?;
            (path, t)
        }
        Stage::Stage2 => {
            let (p, t) = train_stage2_model(cfg, &dicts, &e, exec)?;
            let path = checkpoint_path(&dir, Network::Stage2, cfg);
            Checkpoint::new(&hash, p, t.clone()).write(&path)?;
            write_trace(&out.join("stage2_loss.csv"), &t, cfg)?;
            (path, t)
        }
    };
    #[derive(Serialize)]
    struct Trained {
        checkpoint: String,
        first_loss: Option<f64>,
        last_loss: Option<f64>,
    }
    print_json(&Trained {
        checkpoint: path.to_string_lossy().into_owned(),
        first_loss: trace.first().copied(),
        last_loss: trace.last().copied(),
    })
}

fn sweep_rows(recs: &[MetricsRecord]) -> Vec<(&str, f64, f64, f64, usize)> {
    recs.iter().map(|r| (r.scheme.as_str(), r.axis, r.nmse_mean, r.nmse_std, r.trials)).collect()
}

fn sweep(cfg: &ExperimentConfig, out: &Path, axis: Axis, policy: TrainPolicy, exec: &Parallel) -> anyhow::Result<()> {
    let dicts = build_dictionaries(cfg)?;
    let dir = checkpoint_dir(out);
    match axis {
        Axis::Snr => {
            let models = load_or_train(cfg, &dicts, &dir, policy, exec)?;
            let recs = run_snr_sweep(cfg, &dicts, &models, exec)?;
            let meta = TableMeta::new("snr_sweep", &SWEEP_COLUMNS_SNR, cfg);
            write_csv(&out.join("snr_sweep.csv"), &SWEEP_COLUMNS_SNR, &sweep_rows(&recs), &meta)?;
            print_json(&recs)
        }
        Axis::Tau => {
            let recs = run_pilot_sweep(cfg, &dicts, exec, |c| load_or_train(c, &dicts, &dir, policy, exec))?;
            let rows: Vec<_> = sweep_rows(&recs).into_iter().map(|(s, a, m, d, t)| (s, a as usize, m, d, t)).collect();
            let mut meta = TableMeta::new("tau_sweep", &SWEEP_COLUMNS_TAU, cfg);
            meta.notes.push(format!("snr_db = {}", cfg.sweep.tau_snr_db));
            write_csv(&out.join("tau_sweep.csv"), &SWEEP_COLUMNS_TAU, &rows, &meta)?;
            print_json(&recs)
        }
        Axis::Layers => {
            let curves = run_loss_curves(cfg, &dicts, exec)?;
            let cols = ["network", "layers", "episode", "loss"];
            let rows: Vec<_> = curves
                .iter()
                .flat_map(|c| c.trace.iter().enumerate().map(move |(i, l)| (c.network.as_str(), c.layers, i + 1, *l)))
                .collect();
            write_csv(&out.join("loss_curves.csv"), &cols, &rows, &TableMeta::new("loss_curves", &cols, cfg))?;
            print_json(&curves)
        }
    }
}

fn leakage(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let dicts = build_dictionaries(cfg)?;
    let rep = run_leakage_report(cfg, &dicts).context("building leakage report")?;
    let cols = ["index", "on_grid", "off_grid"];
    let rows: Vec<_> = rep
        .on_grid_profile
        .iter()
        .zip(&rep.off_grid_profile)
        .enumerate()
        .map(|(i, (a, b))| (i, *a, *b))
        .collect();
    write_csv(&out.join("leakage.csv"), &cols, &rows, &TableMeta::new("leakage", &cols, cfg))?;
    let cols = ["index", "delta_sin", "delta_curvature", "magnitude"];
    let rows: Vec<_> = rep
        .drift_profile
        .iter()
        .zip(&rep.drift_params)
        .enumerate()
        .map(|(i, (m, p))| (i, p.0, p.1, *m))
        .collect();
    write_csv(&out.join("drift.csv"), &cols, &rows, &TableMeta::new("drift", &cols, cfg))?;
    #[derive(Serialize)]
    struct Summary {
        on_grid_top1: f64,
        off_grid_top1: f64,
        off_grid_angle: f64,
        off_grid_distance_m: f64,
        drift_peaks: usize,
        single_hop_coherence_max: f64,
        single_hop_coherence_mean: f64,
        cascaded_coherence_max: f64,
        cascaded_coherence_mean: f64,
    }
    let s = Summary {
        on_grid_top1: rep.on_grid_top1,
        off_grid_top1: rep.off_grid_top1,
        off_grid_angle: rep.off_grid_placement.0,
        off_grid_distance_m: rep.off_grid_placement.1,
        drift_peaks: rep.drift_peaks,
        single_hop_coherence_max: rep.single_hop_coherence.0,
        single_hop_coherence_mean: rep.single_hop_coherence.1,
        cascaded_coherence_max: rep.cascaded_coherence.0,
        cascaded_coherence_mean: rep.cascaded_coherence.1,
    };
    write_json(&out.join("leakage_summary.json"), &s)?;
    print_json(&s)
}
