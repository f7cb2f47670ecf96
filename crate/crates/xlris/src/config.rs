//! Versioned experiment configuration.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xlris_core::channel::{PhaseDesign, SystemConfig};
use xlris_core::polar::GridConfig;
use xlris_core::stage1::Stage1TrainConfig;
use xlris_core::stage2::{Projection, Stage2TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// How a sweep's SNR value sets the noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrConvention {
    /// `p ||G E||^2 / (N tau sigma2)`.
    #[default]
    Receive,
    /// `p / sigma2`.
    Transmit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingData {
    /// Scenes drawn for the Stage I set.
    pub stage1_scenes: usize,
    /// Scenes drawn for the Stage II set; each gives `L_BR` samples.
    pub stage2_scenes: usize,
    /// Receive-side SNR range of training samples (dB).
    pub snr_db_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    pub tau: Vec<usize>,
    /// Depths used for both networks in the loss-curve sweep.
    pub layers: Vec<usize>,
    /// SNR of the pilot-length sweep (dB).
    pub tau_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub system: SystemConfig,
    pub bs_grid: GridConfig,
    pub ris_grid: GridConfig,
    /// Parameter tolerance for merging cascaded atoms.
    pub dedup_tol: f64,
    #[serde(default)]
    pub phase_design: PhaseDesign,
    /// Mapping of pilots onto the Stage I columns before Stage II.
    #[serde(default)]
    pub projection: Projection,
    pub stage1: Stage1TrainConfig,
    pub stage2: Stage2TrainConfig,
    pub training: TrainingData,
    pub sweep: SweepConfig,
    pub trials: usize,
    #[serde(default)]
    pub snr_convention: SnrConvention,
    pub seed: u64,
    pub out_dir: String,
}

impl ExperimentConfig {
    /// Reduced dimensions on which the figure trends are reproduced.
    pub fn desk() -> Self {
        let system = SystemConfig {
            n: 32,
            m: 64,
            tau: 30,
            l_br: 3,
            l_ru: 3,
            ..SystemConfig::default()
        };
        Self {
            version: CONFIG_VERSION,
            system,
            bs_grid: GridConfig {
                angle_count: 128,
                sin_range: (-0.9, 0.9),
                min_distance: 1.0,
                ..GridConfig::default()
            },
            ris_grid: GridConfig {
                angle_count: 48,
                sin_range: (-0.9, 0.9),
                min_distance: 1.0,
                max_rings: Some(3),
                ..GridConfig::default()
            },
            dedup_tol: 1e-6,
            phase_design: PhaseDesign::Random,
            projection: Projection::LeastSquares,
            stage1: Stage1TrainConfig {
                layers: 6,
                width: 16,
                kernel_size: 3,
                lr: 2e-4,
                batch_size: 32,
                episodes: 40,
                steps_per_episode: 25,
                seed: 0,
            },
            stage2: Stage2TrainConfig {
                layers: 6,
                lr: 1e-3,
                batch_size: 32,
                episodes: 100,
                steps_per_episode: 25,
                train_dictionary: true,
                seed: 0,
            },
            training: TrainingData {
                stage1_scenes: 5000,
                stage2_scenes: 5000,
                snr_db_range: (0.0, 40.0),
            },
            sweep: SweepConfig {
                snr_db: vec![0.0, 10.0, 20.0, 30.0, 40.0],
                tau: vec![8, 16, 24, 32, 48],
                layers: vec![4, 6],
                tau_snr_db: 40.0,
            },
            trials: 200,
            snr_convention: SnrConvention::Receive,
            seed: 0,
            out_dir: "out".into(),
        }
    }

    /// The published dimensions; slow on a workstation.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.system.n = 64;
        c.system.m = 128;
        c.system.tau = 30;
        c.bs_grid.angle_count = 128;
        c.ris_grid.angle_count = 128;
        c.ris_grid.max_rings = None;
        c.stage1.lr = 5e-5;
        c.stage1.episodes = 100;
        c.stage1.steps_per_episode = 100;
        c.stage2.lr = 1e-4;
        c.stage2.episodes = 100;
        c.stage2.steps_per_episode = 100;
        c.training.stage1_scenes = 20_000;
        c.training.stage2_scenes = 10_000;
        c.sweep.tau = vec![10, 14, 18, 22, 26, 30];
        c
    }

    pub fn profile(name: &str) -> anyhow::Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => bail!("unknown profile {other:?}; expected desk or paper"),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", self.version);
        }
        self.system.validate()?;
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        strictly_increasing("sweep.snr_db", &self.sweep.snr_db)?;
        let tau: Vec<f64> = self.sweep.tau.iter().map(|&t| t as f64).collect();
        strictly_increasing("sweep.tau", &tau)?;
        if self.sweep.tau.contains(&0) {
            bail!("sweep.tau entries must be positive");
        }
        let layers: Vec<f64> = self.sweep.layers.iter().map(|&t| t as f64).collect();
        strictly_increasing("sweep.layers", &layers)?;
        if self.training.stage1_scenes == 0 || self.training.stage2_scenes == 0 {
            bail!("training sets must be nonempty");
        }
        let (lo, hi) = self.training.snr_db_range;
        if !(lo <= hi) {
            bail!("training.snr_db_range must satisfy lo <= hi");
        }
        if self.stage2.layers == 0 || self.stage1.layers < 2 {
            bail!("stage1 needs >= 2 layers and stage2 >= 1");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Copy with a different pilot length.
    pub fn with_tau(&self, tau: usize) -> Self {
        let mut c = self.clone();
        c.system.tau = tau;
        c
    }
}

fn strictly_increasing(name: &str, v: &[f64]) -> anyhow::Result<()> {
    if v.is_empty() {
        bail!("{name} must be nonempty");
    }
    if v.windows(2).any(|w| !(w[0] < w[1])) {
        bail!("{name} must be strictly increasing");
    }
    Ok(())
}
