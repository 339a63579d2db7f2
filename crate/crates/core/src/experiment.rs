//! Experiment configuration and the train / evaluate / compare stages.
//!
//! Every stage rebuilds the dataset and split from the configuration, so a
//! given config and seed always produce the same artifacts. Outputs are
//! computed in memory first and written only once the stage has succeeded.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{self, TrainConfig, TrainReport};
use crate::dataset::{self, NormalizationStats, SplitMode, SurveyDataset, SynthEnvConfig, DEFAULT_FLOOR_DBM};
use crate::error::{Error, Result};
use crate::gp_map::{self, GpHyperparams, GpModel};
use crate::io_util;
use crate::localization::{self, Compressor, EvalResult, EvalSettings, Grid, GridMap, KlDirection, Pipeline};
use crate::pca::PcaModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RANKING_FILE: &str = "ranking.csv";

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synth(SynthEnvConfig),
    Csv {
        path: PathBuf,
        #[serde(default = "default_floor")]
        floor_dbm: f64,
    },
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR_DBM
}

/// One pipeline to build. Autoencoder specs without an explicit `train`
/// block use the experiment-wide `autoencoder` settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorSpec {
    Identity {
        label: String,
    },
    Pca {
        label: String,
        components: usize,
    },
    SparseAe {
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train: Option<TrainConfig>,
    },
    DistanceAe {
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train: Option<TrainConfig>,
    },
}

impl CompressorSpec {
    pub fn label(&self) -> &str {
        match self {
            CompressorSpec::Identity { label }
            | CompressorSpec::Pca { label, .. }
            | CompressorSpec::SparseAe { label, .. }
            | CompressorSpec::DistanceAe { label, .. } => label,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CompressorSpec::Identity { .. } => "identity",
            CompressorSpec::Pca { .. } => "pca",
            CompressorSpec::SparseAe { .. } => "sparse_ae",
            CompressorSpec::DistanceAe { .. } => "distance_ae",
        }
    }

    fn is_autoencoder(&self) -> bool {
        matches!(
            self,
            CompressorSpec::SparseAe { .. } | CompressorSpec::DistanceAe { .. }
        )
    }
}

/// Input space, PCA with 30 and 10 components, and both autoencoders.
pub fn standard_compressors() -> Vec<CompressorSpec> {
    vec![
        CompressorSpec::Identity { label: "input".into() },
        CompressorSpec::Pca {
            label: "pca30".into(),
            components: 30,
        },
        CompressorSpec::Pca {
            label: "pca10".into(),
            components: 10,
        },
        CompressorSpec::SparseAe {
            label: "sparse_ae".into(),
            train: None,
        },
        CompressorSpec::DistanceAe {
            label: "distance_ae".into(),
            train: None,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.3,
            mode: SplitMode::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub cell_size: f64,
    pub sigma: f64,
    pub kl_direction: KlDirection,
    /// Test rows whose likelihood fields are exported as rasters.
    pub raster_indices: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            cell_size: localization::DEFAULT_CELL_SIZE,
            sigma: localization::DEFAULT_IDEAL_SIGMA,
            kl_direction: KlDirection::IdealToEstimate,
            raster_indices: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    /// Shared autoencoder settings. The sparse autoencoder uses them with
    /// `lambda_d = 0`.
    pub autoencoder: TrainConfig,
    pub compressors: Vec<CompressorSpec>,
    /// Hyperparameter candidates in unit-variance terms; `None` uses the
    /// default grid.
    pub gp_grid: Option<Vec<GpHyperparams>>,
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSource::Synth(SynthEnvConfig::default()),
            split: SplitConfig::default(),
            autoencoder: TrainConfig::default(),
            compressors: standard_compressors(),
            gp_grid: None,
            evaluation: EvaluationConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config. Relative paths inside it are taken relative to
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = io_util::read_to_string(path).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSource::Csv { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Synth(s) => s.validate()?,
            DatasetSource::Csv { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
                }
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.split.test_fraction
            )));
        }
        if self.compressors.is_empty() {
            return Err(Error::Config("at least one compressor is required".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.compressors {
            let label = spec.label();
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!(
                    "compressor label {label:?} must be non-empty and use only letters, digits, '_' or '-'"
                )));
            }
            if !seen.insert(label) {
                return Err(Error::Config(format!("duplicate compressor label {label:?}")));
            }
            if let CompressorSpec::Pca { components: 0, .. } = spec {
                return Err(Error::Config(format!("{label}: PCA needs at least one component")));
            }
            if spec.is_autoencoder() {
                self.train_config(spec).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{label}: {m}")),
                    other => other,
                })?;
            }
        }
        if let Some(grid) = &self.gp_grid {
            if grid.is_empty() {
                return Err(Error::Config("gp_grid is empty".into()));
            }
            for hp in grid {
                hp.validate()?;
            }
        }
        let ev = &self.evaluation;
        if !(ev.cell_size > 0.0 && ev.cell_size.is_finite()) {
            return Err(Error::Config("evaluation.cell_size must be > 0".into()));
        }
        if !(ev.sigma > 0.0 && ev.sigma.is_finite()) {
            return Err(Error::Config("evaluation.sigma must be > 0".into()));
        }
        Ok(())
    }

    /// Effective training configuration for an autoencoder spec; the
    /// experiment seed is added to the configured seed.
    pub fn train_config(&self, spec: &CompressorSpec) -> Result<TrainConfig> {
        let mut cfg = match spec {
            CompressorSpec::SparseAe { train: Some(t), .. } => {
                if t.lambda_d != 0.0 {
                    return Err(Error::Config("sparse_ae requires lambda_d = 0".into()));
                }
                t.clone()
            }
            CompressorSpec::SparseAe { train: None, .. } => TrainConfig {
                lambda_d: 0.0,
                ..self.autoencoder.clone()
            },
            CompressorSpec::DistanceAe { train, .. } => {
                let t = train.clone().unwrap_or_else(|| self.autoencoder.clone());
                if t.lambda_d <= 0.0 {
                    return Err(Error::Config("distance_ae requires lambda_d > 0".into()));
                }
                t
            }
            _ => return Err(Error::Config(format!("{} is not an autoencoder", spec.label()))),
        };
        cfg.seed = cfg.seed.wrapping_add(self.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hyperparameter_grid(&self) -> Vec<GpHyperparams> {
        self.gp_grid.clone().unwrap_or_else(gp_map::default_grid)
    }

    /// Lowercase hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Accepts either a full experiment config with a synthetic dataset or a
/// bare environment config. Returns the environment and the file's seed.
pub fn load_synth_config(path: &Path) -> Result<(SynthEnvConfig, u64)> {
    let text = io_util::read_to_string(path).map_err(|e| Error::Config(e.to_string()))?;
    if let Ok(env) = serde_json::from_str::<SynthEnvConfig>(&text) {
        env.validate()?;
        return Ok((env, 0));
    }
    let cfg = ExperimentConfig::from_json(&text, path.parent().unwrap_or(Path::new("")))?;
    match cfg.dataset {
        DatasetSource::Synth(env) => Ok((env, cfg.seed)),
        DatasetSource::Csv { .. } => Err(Error::Config("synth needs a synthetic dataset config".into())),
    }
}

/// Synthesizes a survey and writes it as CSV.
pub fn run_synth(env: &SynthEnvConfig, seed: u64, out: &Path) -> Result<SurveyDataset> {
    let ds = dataset::synthesize(env, seed)?;
    dataset::save_csv(&ds, out)?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Shared preparation

/// Raw survey plus its normalized train/test partitions.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub full: SurveyDataset,
    pub train: SurveyDataset,
    pub test: SurveyDataset,
    pub stats: NormalizationStats,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SurveyDataset> {
    match &cfg.dataset {
        DatasetSource::Synth(env) => dataset::synthesize(env, cfg.seed),
        DatasetSource::Csv { path, floor_dbm } => dataset::load_csv_with_floor(path, *floor_dbm),
    }
}

/// Splits the survey and normalizes both halves with the training statistics.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let full = load_dataset(cfg)?;
    let split_seed = cfg.seed ^ 0x5b17_0000_0000_0001;
    let (train_raw, test_raw) = dataset::split_with_mode(&full, cfg.split.test_fraction, split_seed, cfg.split.mode)?;
    let (train, stats) = dataset::normalize(&train_raw)?;
    let test = dataset::apply_normalization(&test_raw, &stats)?;
    Ok(Prepared {
        full,
        train,
        test,
        stats,
    })
}

pub fn evaluation_grid(cfg: &ExperimentConfig, full: &SurveyDataset) -> Result<Grid> {
    Grid::for_dataset(full, cfg.evaluation.cell_size)
}

// ---------------------------------------------------------------------------
// Run bookkeeping

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageTiming>,
    /// File names relative to the output directory.
    pub artifacts: Vec<String>,
}

/// Artifacts collected in memory until the stage has succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    stages: Vec<StageTiming>,
}

impl Outputs {
    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn time<T>(&mut self, stage: impl Into<String>, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let out = f()?;
        self.stages.push(StageTiming {
            stage: stage.into(),
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    /// Writes every file, then the manifest listing them.
    fn commit(self, cfg: &ExperimentConfig, command: &str) -> Result<RunManifest> {
        let dir = &cfg.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (name, bytes) in &self.files {
            io_util::write_atomic(&dir.join(name), bytes)?;
        }
        let manifest = RunManifest {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            stages: self.stages,
            artifacts: self.files.into_iter().map(|(n, _)| n).collect(),
        };
        io_util::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

pub fn gp_file(label: &str) -> String {
    format!("{label}.gp.json")
}

pub fn compressor_file(label: &str) -> String {
    format!("{label}.model.json")
}

// ---------------------------------------------------------------------------
// Train

#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub spec: CompressorSpec,
    pub pipeline: Pipeline,
    /// Present for autoencoders.
    pub report: Option<TrainReport>,
    /// Reconstruction RMSE of the training set in dBm.
    pub reconstruction_rmse_dbm: f64,
    pub seconds: f64,
}

fn fit_compressor(
    cfg: &ExperimentConfig,
    spec: &CompressorSpec,
    train: &SurveyDataset,
) -> Result<(Compressor, Option<TrainReport>, f64)> {
    match spec {
        CompressorSpec::Identity { .. } => Ok((Compressor::Identity, None, 0.0)),
        CompressorSpec::Pca { components, .. } => {
            let pca = PcaModel::fit(train.rss(), *components)?;
            let recon = pca.inverse_transform(&pca.transform(train.rss())?)?;
            let rmse = rmse_dbm(train, &recon);
            Ok((Compressor::Pca(pca), None, rmse))
        }
        CompressorSpec::SparseAe { .. } | CompressorSpec::DistanceAe { .. } => {
            let tc = cfg.train_config(spec)?;
            let (params, report) = autoencoder::train(train, &tc)?;
            let rmse = report.final_rmse_dbm;
            Ok((Compressor::Autoencoder(params), Some(report), rmse))
        }
    }
}

fn rmse_dbm(ds: &SurveyDataset, recon: &DMatrix<f64>) -> f64 {
    let (z, zh) = match ds.normalization() {
        Some(s) => (s.denormalize_matrix(ds.rss()), s.denormalize_matrix(recon)),
        None => (ds.rss().clone(), recon.clone()),
    };
    ((z - zh).norm_squared() / ds.rss().len() as f64).sqrt()
}

/// Fits every configured compressor and its GP map. Independent pipelines
/// run in parallel; each is deterministic on its own.
pub fn train_pipelines(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<TrainedPipeline>> {
    let grid = cfg.hyperparameter_grid();
    cfg.compressors
        .par_iter()
        .map(|spec| {
            let started = Instant::now();
            let stage = || -> Result<TrainedPipeline> {
                let (compressor, report, rmse) = fit_compressor(cfg, spec, &prepared.train)?;
                let pipeline = Pipeline::fit(spec.label(), compressor, &prepared.train, &grid)?;
                Ok(TrainedPipeline {
                    spec: spec.clone(),
                    pipeline,
                    report,
                    reconstruction_rmse_dbm: rmse,
                    seconds: 0.0,
                })
            };
            let mut out = stage().map_err(|e| e.context(&format!("train {}", spec.label())))?;
            out.seconds = started.elapsed().as_secs_f64();
            Ok(out)
        })
        .collect()
}

pub fn train_report_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,reconstruction,sparsity,distance,total\n");
    for (i, e) in report.epochs.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            i + 1,
            e.reconstruction,
            e.sparsity,
            e.distance,
            e.total()
        );
    }
    s
}

pub fn train_summary_csv(trained: &[TrainedPipeline]) -> String {
    let mut s =
        String::from("label,kind,latent_dim,signal_variance,length_scale,noise_variance,reconstruction_rmse_dbm\n");
    for t in trained {
        let hp = t.pipeline.gp.hyperparams();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            t.spec.label(),
            t.spec.kind(),
            t.pipeline.latent_dim(),
            hp.signal_variance,
            hp.length_scale,
            hp.noise_variance,
            t.reconstruction_rmse_dbm
        );
    }
    s
}

fn train_outputs(out: &mut Outputs, prepared: &Prepared, trained: &[TrainedPipeline]) -> Result<()> {
    out.add(NORMALIZATION_FILE, io_util::to_json_string(&prepared.stats)?);
    for t in trained {
        let label = t.spec.label();
        out.stages.push(StageTiming {
            stage: format!("train:{label}"),
            seconds: t.seconds,
        });
        match &t.pipeline.compressor {
            Compressor::Identity => {}
            Compressor::Pca(p) => out.add(compressor_file(label), p.to_json()?),
            Compressor::Autoencoder(p) => out.add(compressor_file(label), autoencoder::model_to_json(p)?),
        }
        out.add(gp_file(label), t.pipeline.gp.to_json()?);
        if let Some(r) = &t.report {
            out.add(format!("train_{label}.csv"), train_report_csv(r));
        }
    }
    out.add(TRAIN_SUMMARY_FILE, train_summary_csv(trained));
    Ok(())
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<(Vec<TrainedPipeline>, RunManifest)> {
    let mut out = Outputs::default();
    let prepared = out.time("prepare", || prepare(cfg))?;
    let trained = train_pipelines(cfg, &prepared)?;
    train_outputs(&mut out, &prepared, &trained)?;
    let manifest = out.commit(cfg, "train")?;
    Ok((trained, manifest))
}

// ---------------------------------------------------------------------------
// Evaluate

pub fn load_pipeline(dir: &Path, spec: &CompressorSpec) -> Result<Pipeline> {
    let label = spec.label();
    let gp = GpModel::load(&dir.join(gp_file(label)))?;
    let compressor = match spec {
        CompressorSpec::Identity { .. } => Compressor::Identity,
        CompressorSpec::Pca { .. } => Compressor::Pca(PcaModel::load(&dir.join(compressor_file(label)))?),
        CompressorSpec::SparseAe { .. } | CompressorSpec::DistanceAe { .. } => {
            Compressor::Autoencoder(autoencoder::load_model(&dir.join(compressor_file(label)))?)
        }
    };
    Pipeline::new(label, compressor, gp)
}

fn load_trained(cfg: &ExperimentConfig) -> Result<(Prepared, Vec<Pipeline>)> {
    let dir = &cfg.output_dir;
    let stats: NormalizationStats = io_util::read_json(&dir.join(NORMALIZATION_FILE))?;
    let mut prepared = prepare(cfg)?;
    if stats != prepared.stats {
        return Err(Error::Data(format!(
            "{} does not match the configured dataset; rerun train",
            dir.join(NORMALIZATION_FILE).display()
        )));
    }
    prepared.stats = stats;
    let pipelines = cfg
        .compressors
        .iter()
        .map(|spec| load_pipeline(dir, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok((prepared, pipelines))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub results: Vec<EvalResult>,
    pub kinds: Vec<&'static str>,
    pub latent_dims: Vec<usize>,
}

pub fn summary_csv(eval: &Evaluation) -> String {
    let mut s = String::from("label,kind,latent_dim,mean_kl,mean_argmax_error_m\n");
    for ((r, kind), dim) in eval.results.iter().zip(&eval.kinds).zip(&eval.latent_dims) {
        let _ = writeln!(s, "{},{},{},{},{}", r.label, kind, dim, r.mean_kl, r.mean_argmax_error);
    }
    s
}

fn evaluate_outputs(
    out: &mut Outputs,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    pipelines: &[Pipeline],
    kinds: Vec<&'static str>,
) -> Result<Evaluation> {
    let test = &prepared.test;
    for &idx in &cfg.evaluation.raster_indices {
        if idx >= test.len() {
            return Err(Error::Data(format!(
                "raster index {idx} out of range ({} test points)",
                test.len()
            )));
        }
    }
    let grid = evaluation_grid(cfg, &prepared.full)?;
    let settings = EvalSettings {
        sigma: cfg.evaluation.sigma,
        direction: cfg.evaluation.kl_direction,
    };

    let started = Instant::now();
    for &idx in &cfg.evaluation.raster_indices {
        let ideal = localization::ideal_posterior(&grid, &test.location(idx), settings.sigma)?;
        out.add(format!("ideal_{idx}.csv"), ideal.to_csv_string());
        out.add(format!("ideal_{idx}.pgm"), ideal.to_pgm());
    }
    let mut results = Vec::with_capacity(pipelines.len());
    for p in pipelines {
        let map = GridMap::new(&p.gp, grid);
        let result = localization::evaluate_on_map(p, &map, test, &settings)?;
        out.add(format!("eval_{}.csv", p.label), result.to_csv_string(test));
        for &idx in &cfg.evaluation.raster_indices {
            let field = localization::field_for_row(p, &map, test, idx)?;
            out.add(format!("field_{}_{idx}.csv", p.label), field.to_csv_string());
            out.add(format!("field_{}_{idx}.pgm", p.label), field.to_pgm());
        }
        results.push(result);
    }
    out.stages.push(StageTiming {
        stage: "evaluate".into(),
        seconds: started.elapsed().as_secs_f64(),
    });

    let eval = Evaluation {
        latent_dims: pipelines.iter().map(|p| p.latent_dim()).collect(),
        kinds,
        results,
    };
    out.add(SUMMARY_FILE, summary_csv(&eval));
    Ok(eval)
}

/// Scores previously trained pipelines on the configured test split.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<(Evaluation, RunManifest)> {
    let mut out = Outputs::default();
    let (prepared, pipelines) = out.time("load", || load_trained(cfg))?;
    let kinds = cfg.compressors.iter().map(|s| s.kind()).collect();
    let eval = evaluate_outputs(&mut out, cfg, &prepared, &pipelines, kinds)?;
    let manifest = out.commit(cfg, "evaluate")?;
    Ok((eval, manifest))
}

// ---------------------------------------------------------------------------
// Compare

#[derive(Clone, Debug, PartialEq)]
pub struct RankedRow {
    pub rank: usize,
    pub label: String,
    pub mean_kl: f64,
    pub mean_argmax_error: f64,
}

/// Ascending mean KL; equal scores keep configuration order.
pub fn rank(results: &[EvalResult]) -> Vec<RankedRow> {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[a].mean_kl.total_cmp(&results[b].mean_kl));
    order
        .into_iter()
        .enumerate()
        .map(|(i, j)| RankedRow {
            rank: i + 1,
            label: results[j].label.clone(),
            mean_kl: results[j].mean_kl,
            mean_argmax_error: results[j].mean_argmax_error,
        })
        .collect()
}

pub fn ranking_csv(rows: &[RankedRow]) -> String {
    let mut s = String::from("rank,label,mean_kl,mean_argmax_error_m\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.rank, r.label, r.mean_kl, r.mean_argmax_error);
    }
    s
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub trained: Vec<TrainedPipeline>,
    pub evaluation: Evaluation,
    pub ranking: Vec<RankedRow>,
}

/// Trains and evaluates the standard five pipelines, whatever compressors
/// the config lists, and ranks them by mean KL.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<(Comparison, RunManifest)> {
    let cfg = ExperimentConfig {
        compressors: standard_compressors(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let mut out = Outputs::default();
    let prepared = out.time("prepare", || prepare(&cfg))?;
    let trained = train_pipelines(&cfg, &prepared)?;
    train_outputs(&mut out, &prepared, &trained)?;
    let pipelines: Vec<Pipeline> = trained.iter().map(|t| t.pipeline.clone()).collect();
    let kinds = cfg.compressors.iter().map(|s| s.kind()).collect();
    let evaluation = evaluate_outputs(&mut out, &cfg, &prepared, &pipelines, kinds)?;
    let ranking = rank(&evaluation.results);
    out.add(RANKING_FILE, ranking_csv(&ranking));
    let manifest = out.commit(&cfg, "compare")?;
    Ok((
        Comparison {
            trained,
            evaluation,
            ranking,
        },
        manifest,
    ))
}
