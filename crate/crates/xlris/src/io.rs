//! On-disk formats.
//!
//! Complex arrays are stored as base64 of interleaved `re, im` little-endian
//! `f64` values, row-major, next to an explicit shape. Scenes, pilot blocks
//! and checkpoints are JSON documents tagged with a format name and version.
//! Tables are CSV with a `.meta.json` sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use xlris_core::channel::{BsRisPath, PathParams, PilotBlock, SceneRealization, SystemConfig};
use xlris_core::linalg::{ComplexMatrix, C64};
use xlris_core::stage1::DenoiserParams;
use xlris_core::stage2::ListaParams;

use crate::config::ExperimentConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const SCENE_FORMAT: &str = "xlris-scene";
pub const CHECKPOINT_FORMAT: &str = "xlris-checkpoint";

pub fn encode_c64(v: &[C64]) -> String {
    let mut bytes = Vec::with_capacity(16 * v.len());
    for z in v {
        bytes.extend_from_slice(&z.re.to_le_bytes());
        bytes.extend_from_slice(&z.im.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_c64(s: &str) -> anyhow::Result<Vec<C64>> {
    let bytes = STANDARD.decode(s).context("array payload is not valid base64")?;
    ensure!(bytes.len() % 16 == 0, "array payload has {} bytes, not a multiple of 16", bytes.len());
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            C64::new(re, im)
        })
        .collect())
}

/// A complex array with its shape; vectors have a one-element shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub data: String,
}

impl ArrayRecord {
    pub fn from_matrix(m: &ComplexMatrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: encode_c64(m.data()),
        }
    }

    pub fn from_vector(v: &[C64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: encode_c64(v),
        }
    }

    fn values(&self) -> anyhow::Result<Vec<C64>> {
        let v = decode_c64(&self.data)?;
        let n: usize = self.shape.iter().product();
        ensure!(v.len() == n, "array holds {} values but its shape {:?} needs {n}", v.len(), self.shape);
        Ok(v)
    }

    pub fn to_matrix(&self) -> anyhow::Result<ComplexMatrix> {
        ensure!(self.shape.len() == 2, "expected a matrix, got shape {:?}", self.shape);
        Ok(ComplexMatrix::from_vec(self.shape[0], self.shape[1], self.values()?)?)
    }

    pub fn to_vector(&self) -> anyhow::Result<Vec<C64>> {
        ensure!(self.shape.len() == 1, "expected a vector, got shape {:?}", self.shape);
        self.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub e: ArrayRecord,
    pub y: ArrayRecord,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub format: String,
    pub version: u32,
    pub system: SystemConfig,
    pub bs_ris_paths: Vec<BsRisPath>,
    pub ris_user_paths: Vec<Vec<PathParams>>,
    pub h_bs: ArrayRecord,
    pub h: Vec<ArrayRecord>,
    pub g: Vec<ArrayRecord>,
    /// One pilot block per user, if simulated.
    #[serde(default)]
    pub pilots: Vec<PilotRecord>,
}

impl SceneFile {
    pub fn new(system: &SystemConfig, scene: &SceneRealization, pilots: &[PilotBlock]) -> Self {
        Self {
            format: SCENE_FORMAT.into(),
            version: FORMAT_VERSION,
            system: system.clone(),
            bs_ris_paths: scene.bs_ris_paths.clone(),
            ris_user_paths: scene.ris_user_paths.clone(),
            h_bs: ArrayRecord::from_matrix(&scene.h_bs),
            h: scene.h.iter().map(|v| ArrayRecord::from_vector(v)).collect(),
            g: scene.g.iter().map(ArrayRecord::from_matrix).collect(),
            pilots: pilots
                .iter()
                .map(|b| PilotRecord {
                    e: ArrayRecord::from_matrix(&b.e),
                    y: ArrayRecord::from_matrix(&b.y),
                    sigma2: b.sigma2,
                })
                .collect(),
        }
    }

    pub fn scene(&self) -> anyhow::Result<SceneRealization> {
        Ok(SceneRealization {
            bs_ris_paths: self.bs_ris_paths.clone(),
            ris_user_paths: self.ris_user_paths.clone(),
            h_bs: self.h_bs.to_matrix()?,
            h: self.h.iter().map(ArrayRecord::to_vector).collect::<anyhow::Result<_>>()?,
            g: self.g.iter().map(ArrayRecord::to_matrix).collect::<anyhow::Result<_>>()?,
        })
    }

    pub fn pilot_blocks(&self) -> anyhow::Result<Vec<PilotBlock>> {
        self.pilots
            .iter()
            .map(|p| {
                Ok(PilotBlock {
                    e: p.e.to_matrix()?,
                    y: p.y.to_matrix()?,
                    sigma2: p.sigma2,
                })
            })
            .collect()
    }
}

pub fn write_scene(path: &Path, file: &SceneFile) -> anyhow::Result<()> {
    write_json(path, file)
}

pub fn read_scene(path: &Path) -> anyhow::Result<SceneFile> {
    let f: SceneFile = read_json(path)?;
    check_tag(&f.format, f.version, SCENE_FORMAT)?;
    Ok(f)
}

fn check_tag(format: &str, version: u32, want: &str) -> anyhow::Result<()> {
    if format != want {
        bail!("expected a {want} file, found {format:?}");
    }
    if version != FORMAT_VERSION {
        bail!("{want} version {version} is not supported (expected {FORMAT_VERSION})");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Stage1,
    Stage2,
}

impl Network {
    pub fn name(self) -> &'static str {
        match self {
            Network::Stage1 => "stage1",
            Network::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Versioned, shape-tagged container for trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<P> {
    pub format: String,
    pub version: u32,
    pub network: Network,
    /// Hash of the config the parameters were trained under.
    pub config_hash: String,
    pub shapes: Vec<TensorShape>,
    /// Episode-averaged training loss.
    pub loss_trace: Vec<f64>,
    pub params: P,
}

pub trait Checkpointed: Serialize + DeserializeOwned {
    const NETWORK: Network;
    fn shapes(&self) -> Vec<TensorShape>;
}

impl Checkpointed for DenoiserParams {
    const NETWORK: Network = Network::Stage1;
    fn shapes(&self) -> Vec<TensorShape> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(TensorShape {
                name: format!("conv{i}.kernel"),
                shape: c.kernel.shape.clone(),
            });
            out.push(TensorShape {
                name: format!("conv{i}.bias"),
                shape: c.bias.shape.clone(),
            });
        }
        for (i, b) in self.bns.iter().enumerate() {
            out.push(TensorShape {
                name: format!("bn{i}.gamma"),
                shape: b.gamma.shape.clone(),
            });
            out.push(TensorShape {
                name: format!("bn{i}.running_var"),
                shape: vec![b.running_var.len()],
            });
        }
        out
    }
}

impl Checkpointed for ListaParams {
    const NETWORK: Network = Network::Stage2;
    fn shapes(&self) -> Vec<TensorShape> {
        vec![
            TensorShape {
                name: "lambda".into(),
                shape: vec![self.lambda.len()],
            },
            TensorShape {
                name: "kappa".into(),
                shape: vec![self.kappa.len()],
            },
            TensorShape {
                name: "v".into(),
                shape: vec![self.v.rows(), self.v.cols()],
            },
            TensorShape {
                name: "f".into(),
                shape: vec![self.f.rows(), self.f.cols()],
            },
        ]
    }
}

impl<P: Checkpointed> Checkpoint<P> {
    pub fn new(config_hash: &str, params: P, loss_trace: Vec<f64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            network: P::NETWORK,
            config_hash: config_hash.into(),
            shapes: params.shapes(),
            loss_trace,
            params,
        }
    }

    /// Reads a checkpoint and checks its tag, network and recorded shapes.
    /// With `config_hash` set, also requires a matching training config.
    pub fn read(path: &Path, config_hash: Option<&str>) -> anyhow::Result<Self> {
        let c: Self = read_json(path)?;
        check_tag(&c.format, c.version, CHECKPOINT_FORMAT)?;
        ensure!(c.network == P::NETWORK, "{} holds a {} checkpoint, expected {}", path.display(), c.network.name(), P::NETWORK.name());
        ensure!(c.shapes == c.params.shapes(), "{}: recorded shapes disagree with the parameters", path.display());
        if let Some(h) = config_hash {
            ensure!(c.config_hash == h, "{} was trained under config {} but the current config is {h}", path.display(), c.config_hash);
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        write_json(path, self)
    }
}

/// `<dir>/<network>-<first 16 hex digits of the config hash>.json`.
pub fn checkpoint_path(dir: &Path, network: Network, cfg: &ExperimentConfig) -> PathBuf {
    dir.join(format!("{}-{}.json", network.name(), &cfg.hash()[..16]))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

/// Sidecar describing a CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub table: String,
    pub columns: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    /// How SNR values map to noise variance.
    pub snr_definition: String,
    pub notes: Vec<String>,
}

impl TableMeta {
    pub fn new(table: &str, columns: &[&str], cfg: &ExperimentConfig) -> Self {
        let snr_definition = match cfg.snr_convention {
            crate::config::SnrConvention::Receive => "receive: p ||G E||_F^2 / (N tau sigma2)",
            crate::config::SnrConvention::Transmit => "transmit: p / sigma2",
        };
        Self {
            table: table.into(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            snr_definition: snr_definition.into(),
            notes: Vec::new(),
        }
    }
}

/// Writes `rows` under `header` and the `.meta.json` sidecar next to it.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R], meta: &TableMeta) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&meta_path(path), meta)
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes a line of text to stdout, ignoring a closed pipe.
pub fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use xlris_core::channel::{draw_scene, make_phase_matrix, simulate_pilots, PhaseDesign};
    use xlris_core::rng;

    #[test]
    fn array_encoding_is_little_endian_interleaved() {
        let s = encode_c64(&[C64::new(1.0, -2.0)]);
        let bytes = STANDARD.decode(&s).unwrap();
        assert_eq!(&bytes[..8], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[8..], &(-2.0f64).to_le_bytes());
        assert!(decode_c64("AAAA").is_err());
    }

    #[test]
    fn scene_round_trip_is_exact() {
        let sys = SystemConfig {
            n: 8,
            m: 12,
            tau: 4,
            ..SystemConfig::default()
        };
        let mut r = rng::stream(5, 0);
        let scene = draw_scene(&sys, &mut r).unwrap();
        let e = make_phase_matrix(sys.m, sys.tau, PhaseDesign::Random, &mut r).unwrap();
        let pilots = simulate_pilots(&scene.g[0], &e, sys.p, 0.1, &mut r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        write_scene(&path, &SceneFile::new(&sys, &scene, std::slice::from_ref(&pilots))).unwrap();
        let back = read_scene(&path).unwrap();
        assert_eq!(back.scene().unwrap(), scene);
        assert_eq!(back.pilot_blocks().unwrap(), vec![pilots]);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut a = ArrayRecord::from_matrix(&ComplexMatrix::zeros(2, 3));
        a.shape = vec![3, 3];
        assert!(a.to_matrix().is_err());
        assert!(ArrayRecord::from_vector(&[C64::new(0.0, 0.0)]).to_matrix().is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let e = make_phase_matrix(6, 4, PhaseDesign::Random, &mut rng::stream(1, 0)).unwrap();
        let f = ComplexMatrix::from_fn(6, 9, |r, c| C64::new((r * c) as f64 * 0.1, 0.3));
        let p = ListaParams::init(2, &e, &f, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        Checkpoint::new("abc", p.clone(), vec![1.0, 0.5]).write(&path).unwrap();
        let back = Checkpoint::<ListaParams>::read(&path, Some("abc")).unwrap();
        assert_eq!(back.params, p);
        assert!(Checkpoint::<ListaParams>::read(&path, Some("other")).is_err());
        assert!(Checkpoint::<DenoiserParams>::read(&path, None).is_err());
    }

    #[test]
    fn csv_has_header_and_sidecar() {
        #[derive(Serialize)]
        struct Row {
            a: u32,
            b: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let meta = TableMeta::new("t", &["a", "b"], &ExperimentConfig::desk());
        write_csv(&path, &["a", "b"], &[Row { a: 1, b: 0.5 }], &meta).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n1,0.5\n");
        let m: TableMeta = read_json(&meta_path(&path)).unwrap();
        assert_eq!(m, meta);
    }
}
