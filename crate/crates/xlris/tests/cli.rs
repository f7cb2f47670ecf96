use std::path::Path;
use std::process::{Command, Output};

use xlris::config::ExperimentConfig;
use xlris::io::{read_json, read_scene, TableMeta};

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.system.n = 8;
    c.system.m = 16;
    c.system.tau = 8;
    c.system.l_br = 2;
    c.system.l_ru = 2;
    c.bs_grid.angle_count = 16;
    c.ris_grid.angle_count = 12;
    c.ris_grid.max_rings = Some(1);
    c.stage1.layers = 3;
    c.stage1.width = 4;
    c.stage1.batch_size = 4;
    c.stage1.episodes = 2;
    c.stage1.steps_per_episode = 2;
    c.stage2.layers = 2;
    c.stage2.batch_size = 4;
    c.stage2.episodes = 2;
    c.stage2.steps_per_episode = 2;
    c.training.stage1_scenes = 16;
    c.training.stage2_scenes = 8;
    c.sweep.snr_db = vec![0.0, 20.0];
    c.sweep.tau = vec![4, 8];
    c.sweep.layers = vec![2, 3];
    c.trials = 3;
    c
}

fn xlris(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlris"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("XLRIS_THREADS", "2")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_string_pretty(&tiny()).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr_error(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).expect("stderr is one JSON object")
}

#[test]
fn missing_config_exits_2_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = xlris(dir.path(), &["info", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    let v = stderr_error(&o);
    assert!(v["error"].as_str().unwrap().contains("here.json"));
    assert_eq!(v["exit_code"], 2);
}

#[test]
fn unknown_flag_and_malformed_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = xlris(dir.path(), &["info", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    stderr_error(&o);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"version\": 1}").unwrap();
    let o = xlris(dir.path(), &["info", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    stderr_error(&o);
}

#[test]
fn info_reports_derived_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = xlris(dir.path(), &["info", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["sizes"]["n_g"], 16);
    assert!(v["sizes"]["m_g_prime"].as_u64().unwrap() > 12);
    assert!(v["wavelength_m"].as_f64().unwrap() > 0.0);
    assert!(v["rayleigh_distance_ris_m"].as_f64().unwrap() > v["rayleigh_distance_bs_m"].as_f64().unwrap());
}

#[test]
fn snr_sweep_csv_is_byte_stable_and_reuses_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = xlris(dir.path(), &["sweep", "snr", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv_path = dir.path().join("snr_sweep.csv");
    let first = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = first.lines();
    assert_eq!(lines.next(), Some("scheme,snr_db,nmse_mean,nmse_std,trials"));
    assert_eq!(lines.count(), 6);
    let meta: TableMeta = read_json(&dir.path().join("snr_sweep.csv.meta.json")).unwrap();
    assert!(meta.snr_definition.starts_with("receive"));

    // second run loads the checkpoints written by the first
    let o = xlris(dir.path(), &["sweep", "snr", "--config", &cfg, "--no-train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), first);

    // a different seed has no checkpoint
    let o = xlris(dir.path(), &["sweep", "snr", "--config", &cfg, "--seed", "5", "--no-train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_error(&o)["error"].as_str().unwrap().contains("checkpoint"));
}

#[test]
fn simulate_writes_readable_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = xlris(dir.path(), &["simulate", "--config", &cfg, "--count", "2", "--snr", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = read_scene(&dir.path().join("scenes/scene_0001.json")).unwrap();
    let scene = f.scene().unwrap();
    assert_eq!(scene.g[0].shape(), (8, 16));
    assert_eq!(f.pilot_blocks().unwrap()[0].y.shape(), (8, 8));
}

#[test]
fn build_dict_leakage_and_train_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for args in [&["build-dict"][..], &["leakage"], &["train", "stage1"], &["train", "stage2"]] {
        let mut a = args.to_vec();
        a.extend(["--config", &cfg]);
        let o = xlris(dir.path(), &a);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["bs_grid.csv", "ris_grid.csv", "cascaded_grid.csv", "leakage.csv", "drift.csv", "leakage_summary.json", "stage1_loss.csv", "stage2_loss.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let trace = std::fs::read_to_string(dir.path().join("stage1_loss.csv")).unwrap();
    assert!(trace.starts_with("episode,loss\n1,"));
    assert_eq!(std::fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 2);
}

#[test]
fn tau_and_layer_sweeps_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = xlris(dir.path(), &["sweep", "tau", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = std::fs::read_to_string(dir.path().join("tau_sweep.csv")).unwrap();
    assert!(t.starts_with("scheme,tau,nmse_mean,nmse_std,trials\nOMP,4,"));
    let o = xlris(dir.path(), &["sweep", "layers", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = std::fs::read_to_string(dir.path().join("loss_curves.csv")).unwrap();
    assert!(t.starts_with("network,layers,episode,loss\nstage1,2,1,"));
}
