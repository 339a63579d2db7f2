//! End-to-end runs of the binary on a small, fast configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rss-atlas");

/// 40 access points over 30 m × 20 m, short autoencoder training.
const SMALL: &str = r#"{
  "seed": 5,
  "dataset": {"synth": {
    "area": {"width": 30.0, "height": 20.0},
    "n_aps": 40,
    "trajectory": {"waypoints": [
      {"x": 2.0, "y": 2.0}, {"x": 28.0, "y": 2.0}, {"x": 28.0, "y": 8.0}, {"x": 2.0, "y": 8.0},
      {"x": 2.0, "y": 14.0}, {"x": 28.0, "y": 14.0}, {"x": 28.0, "y": 18.0}, {"x": 2.0, "y": 18.0}
    ], "sample_spacing": 1.0}
  }},
  "autoencoder": {"epochs": 4, "batch_size": 32, "hidden_dim": 16},
  "evaluation": {"cell_size": 2.0, "raster_indices": [0, 3]},
  "output_dir": "out"
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), config).unwrap();
        Workspace { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("config.json")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.config();
        let mut cmd = Command::new(BIN);
        cmd.args(args).arg("--config").arg(&config);
        cmd.output().unwrap()
    }
}

fn small_with(compressors: &str) -> String {
    SMALL.replacen(
        "\"seed\": 5,",
        &format!("\"seed\": 5, \"compressors\": {compressors},"),
        1,
    )
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn data_lines(csv: &str) -> Vec<&str> {
    csv.lines().skip(1).collect()
}

#[test]
fn synth_writes_header_and_rows() {
    let ws = Workspace::new(SMALL);
    let out = ws.dir.path().join("survey.csv");
    let status = ws.run(&["synth", "--out", out.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = read(&out);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("x,y,ap00,"));
    assert_eq!(header.split(',').count(), 42);
    assert!(data_lines(&text).len() > 100);

    let again = ws.dir.path().join("again.csv");
    ws.run(&["synth", "--out", again.to_str().unwrap()]);
    assert_eq!(read(&again), text);

    let other = ws.dir.path().join("other.csv");
    ws.run(&["synth", "--out", other.to_str().unwrap(), "--seed", "6"]);
    assert_ne!(read(&other), text);
}

#[test]
fn synth_accepts_a_bare_environment_config() {
    let ws = Workspace::new(r#"{"n_aps": 5}"#);
    let out = ws.dir.path().join("s.csv");
    let status = ws.run(&["synth", "--out", out.to_str().unwrap()]);
    assert!(status.status.success());
    assert_eq!(read(&out).lines().next().unwrap(), "x,y,ap00,ap01,ap02,ap03,ap04");
}

#[test]
fn synth_into_missing_directory_fails_cleanly() {
    let ws = Workspace::new(SMALL);
    let target = ws.dir.path().join("missing").join("survey.csv");
    let status = ws.run(&["synth", "--out", target.to_str().unwrap()]);
    assert_eq!(status.status.code(), Some(2));
    assert!(!target.exists());
    assert!(!ws.dir.path().join("missing").exists());
}

#[test]
fn bad_config_exits_with_config_code() {
    let ws = Workspace::new("{ not json");
    assert_eq!(ws.run(&["train"]).status.code(), Some(1));
    let ws = Workspace::new(r#"{"compressors": []}"#);
    assert_eq!(ws.run(&["train"]).status.code(), Some(1));
    let ws = Workspace::new(r#"{"dataset": {"csv": {"path": "nowhere.csv"}}}"#);
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
}

#[test]
fn thread_variable_must_be_positive() {
    let ws = Workspace::new(SMALL);
    let out = Command::new(BIN)
        .args(["train", "--config"])
        .arg(ws.config())
        .env("RSS_ATLAS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identity_train_fits_only_a_gp() {
    let ws = Workspace::new(&small_with(r#"[{"kind": "identity", "label": "raw"}]"#));
    let out = ws.run(&["train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.out("raw.gp.json").exists());
    assert!(!ws.out("raw.model.json").exists());
    let summary = read(&ws.out("train_summary.csv"));
    let rows = data_lines(&summary);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("raw,identity,40,"));
}

#[test]
fn train_is_reproducible_and_reports_autoencoders() {
    let ws = Workspace::new(&small_with(
        r#"[{"kind": "distance_ae", "label": "di"}, {"kind": "pca", "label": "p4", "components": 4}]"#,
    ));
    assert!(ws.run(&["train"]).status.success());
    let names = [
        "di.model.json",
        "di.gp.json",
        "p4.model.json",
        "p4.gp.json",
        "train_di.csv",
        "train_summary.csv",
    ];
    let first: Vec<String> = names.iter().map(|n| read(&ws.out(n))).collect();
    let report = &first[4];
    assert_eq!(
        report.lines().next().unwrap(),
        "epoch,reconstruction,sparsity,distance,total"
    );
    assert_eq!(data_lines(report).len(), 4);
    assert!(ws.run(&["train"]).status.success());
    for (name, before) in names.iter().zip(&first) {
        assert_eq!(&read(&ws.out(name)), before, "{name} changed between runs");
    }
    let manifest = read(&ws.out("manifest.json"));
    assert!(manifest.contains("\"command\": \"train\""));
    assert!(manifest.contains("di.model.json"));
}

#[test]
fn evaluate_needs_trained_models() {
    let ws = Workspace::new(&small_with(r#"[{"kind": "pca", "label": "p4", "components": 4}]"#));
    let out = ws.run(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalization.json"));

    assert!(ws.run(&["train"]).status.success());
    fs::remove_file(ws.out("p4.model.json")).unwrap();
    let out = ws.run(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p4.model.json"));
    assert!(!ws.out("summary.csv").exists());
}

#[test]
fn evaluate_writes_results_rasters_and_summary() {
    let ws = Workspace::new(&small_with(
        r#"[{"kind": "identity", "label": "raw"}, {"kind": "pca", "label": "p4", "components": 4}]"#,
    ));
    assert!(ws.run(&["train"]).status.success());
    let out = ws.run(&["evaluate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary = read(&ws.out("summary.csv"));
    assert_eq!(
        summary.lines().next().unwrap(),
        "label,kind,latent_dim,mean_kl,mean_argmax_error_m"
    );
    let rows = data_lines(&summary);
    assert_eq!(rows.len(), 2);
    for (label, line) in ["raw", "p4"].iter().zip(rows) {
        let mean_kl: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        let per_point = read(&ws.out(&format!("eval_{label}.csv")));
        let kls: Vec<f64> = data_lines(&per_point)
            .iter()
            .filter(|l| !l.starts_with("mean"))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        let mean = kls.iter().sum::<f64>() / kls.len() as f64;
        assert!((mean - mean_kl).abs() < 1e-12, "{label}: {mean} vs {mean_kl}");
        for idx in [0, 3] {
            assert!(ws.out(&format!("field_{label}_{idx}.pgm")).exists());
            let field = read(&ws.out(&format!("field_{label}_{idx}.csv")));
            let total: f64 = data_lines(&field)
                .iter()
                .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
    assert!(ws.out("ideal_3.csv").exists());
}

#[test]
fn raster_index_out_of_range_is_rejected() {
    let config = small_with(r#"[{"kind": "identity", "label": "raw"}]"#).replace("[0, 3]", "[100000]");
    let ws = Workspace::new(&config);
    assert!(ws.run(&["train"]).status.success());
    let out = ws.run(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("100000"));
    assert!(!ws.out("summary.csv").exists());
}

#[test]
fn compare_ranks_five_pipelines_deterministically() {
    // pca30 needs at least 30 access points, which the small survey has
    let ws = Workspace::new(SMALL);
    let out = ws.run(&["compare"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ranking = read(&ws.out("ranking.csv"));
    let rows = data_lines(&ranking);
    assert_eq!(rows.len(), 5);
    let mut labels: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    labels.sort_unstable();
    assert_eq!(labels, ["distance_ae", "input", "pca10", "pca30", "sparse_ae"]);
    let kls: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(kls.windows(2).all(|w| w[0] <= w[1]));

    let first_summary = read(&ws.out("summary.csv"));
    assert!(ws.run(&["compare"]).status.success());
    assert_eq!(read(&ws.out("ranking.csv")), ranking);
    assert_eq!(read(&ws.out("summary.csv")), first_summary);
}
