//! Likelihood fields over a spatial grid and KL scoring against an ideal
//! Gaussian posterior.
//!
//! For a measurement `z` and a candidate location `x*`, the likelihood is a
//! product of per-dimension Gaussians centered on the GP map's predicted
//! latent code, all sharing the scalar predictive variance at `x*`. Fields
//! are built entirely in log space and normalized with log-sum-exp.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, AutoencoderParams};
use crate::dataset::{Location, SurveyDataset};
use crate::error::{Error, Result};
use crate::gp_map::{self, GpHyperparams, GpModel};
use crate::io_util;
use crate::pca::PcaModel;

/// Floor applied to estimated masses inside the KL logarithm.
pub const KL_MASS_FLOOR: f64 = 1e-300;

/// Standard deviation of the ideal posterior, meters.
pub const DEFAULT_IDEAL_SIGMA: f64 = 10.0;

pub const DEFAULT_CELL_SIZE: f64 = 1.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub origin: Location,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

impl Grid {
    pub fn new(origin: Location, cell_size: f64, width: usize, height: usize) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Config(format!("cell_size must be > 0, got {cell_size}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("grid needs at least one cell per axis".into()));
        }
        if !origin.is_finite() {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(Grid {
            origin,
            cell_size,
            width,
            height,
        })
    }

    /// Smallest grid of `cell_size` cells covering the box `[min, max]` with
    /// at least `margin_cells` cells of margin on every side.
    pub fn covering(min: Location, max: Location, cell_size: f64, margin_cells: usize) -> Result<Self> {
        let margin = margin_cells as f64 * cell_size;
        let origin = Location::new(min.x - margin, min.y - margin);
        let w = ((max.x - min.x + 2.0 * margin) / cell_size).ceil().max(1.0) as usize;
        let h = ((max.y - min.y + 2.0 * margin) / cell_size).ceil().max(1.0) as usize;
        Grid::new(origin, cell_size, w, h)
    }

    /// Grid over a dataset's bounding box with a two-cell margin.
    pub fn for_dataset(ds: &SurveyDataset, cell_size: f64) -> Result<Self> {
        let (min, max) = ds.bounding_box();
        Grid::covering(min, max, cell_size, 2)
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// Cells are stored row by row starting at the origin: `iy * width + ix`.
    pub fn cell_center(&self, index: usize) -> Location {
        let ix = index % self.width;
        let iy = index / self.width;
        Location::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell_size,
            self.origin.y + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn cell_containing(&self, loc: &Location) -> Option<usize> {
        let fx = (loc.x - self.origin.x) / self.cell_size;
        let fy = (loc.y - self.origin.y) / self.cell_size;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        (ix < self.width && iy < self.height).then_some(iy * self.width + ix)
    }

    pub fn centers(&self) -> Vec<Location> {
        (0..self.n_cells()).map(|i| self.cell_center(i)).collect()
    }
}

/// Normalized probability mass over a grid (sums to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodField {
    pub grid: Grid,
    pub mass: Vec<f64>,
}

impl LikelihoodField {
    /// Normalizes unnormalized per-cell log values with log-sum-exp.
    pub fn from_log_values(grid: Grid, log_values: &[f64]) -> Result<Self> {
        if log_values.len() != grid.n_cells() {
            return Err(Error::Dimension {
                expected: grid.n_cells(),
                actual: log_values.len(),
            });
        }
        if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical("likelihood field contains NaN or +inf".into()));
        }
        let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical("likelihood field underflows everywhere".into()));
        }
        let shifted: Vec<f64> = log_values.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = shifted.iter().sum();
        Ok(LikelihoodField {
            grid,
            mass: shifted.into_iter().map(|v| v / total).collect(),
        })
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Index of the highest-mass cell (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mass.iter().enumerate() {
            if m > self.mass[best] {
                best = i;
            }
        }
        best
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("x,y,mass\n");
        for (i, m) in self.mass.iter().enumerate() {
            let c = self.grid.cell_center(i);
            let _ = writeln!(out, "{},{},{}", c.x, c.y, m);
        }
        out
    }

    /// Binary 16-bit PGM, mass scaled so the maximum maps to 65535. The
    /// first raster row is the top (largest y) row of the grid.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.mass.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n65535\n", self.grid.width, self.grid.height).into_bytes();
        for iy in (0..self.grid.height).rev() {
            for ix in 0..self.grid.width {
                let m = self.mass[iy * self.grid.width + ix];
                let v = if max > 0.0 {
                    (m / max * 65535.0).round() as u16
                } else {
                    0
                };
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, &self.to_pgm())
    }
}

// ---------------------------------------------------------------------------
// Pipelines

/// Maps normalized RSS vectors to the space the GP map lives in.
#[derive(Clone, Debug)]
pub enum Compressor {
    Identity,
    Pca(PcaModel),
    Autoencoder(AutoencoderParams),
}

impl Compressor {
    pub fn compress(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Compressor::Identity => Ok(z.clone()),
            Compressor::Pca(p) => p.transform(z),
            Compressor::Autoencoder(p) => autoencoder::encode(p, z),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Compressor::Identity => "identity",
            Compressor::Pca(_) => "pca",
            Compressor::Autoencoder(_) => "autoencoder",
        }
    }
}

/// A compressor and the GP map fitted on its output space.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub label: String,
    pub compressor: Compressor,
    pub gp: GpModel,
}

/// The standard grid with both variances scaled by the mean column variance
/// of `targets`, so latent spaces of any scale are searched in the same
/// relative units as unit-variance inputs.
pub fn scaled_grid(grid: &[GpHyperparams], targets: &DMatrix<f64>) -> Vec<GpHyperparams> {
    let n = targets.nrows() as f64;
    let mean_var = targets
        .column_iter()
        .map(|c| {
            let mu = c.sum() / n;
            c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n
        })
        .sum::<f64>()
        / targets.ncols() as f64;
    let scale = if mean_var > 0.0 && mean_var.is_finite() {
        mean_var
    } else {
        1.0
    };
    grid.iter().map(|hp| hp.scaled(scale)).collect()
}

impl Pipeline {
    pub fn new(label: impl Into<String>, compressor: Compressor, gp: GpModel) -> Result<Self> {
        let expected = match &compressor {
            Compressor::Identity => None,
            Compressor::Pca(p) => Some(p.latent_dim()),
            Compressor::Autoencoder(p) => Some(p.latent_dim()),
        };
        if let Some(expected) = expected {
            if expected != gp.output_dim() {
                return Err(Error::Dimension {
                    expected,
                    actual: gp.output_dim(),
                });
            }
        }
        Ok(Pipeline {
            label: label.into(),
            compressor,
            gp,
        })
    }

    /// Compresses the training RSS, selects hyperparameters by evidence over
    /// `grid` (scaled to the latent variance) and fits the GP map.
    pub fn fit(
        label: impl Into<String>,
        compressor: Compressor,
        train: &SurveyDataset,
        grid: &[GpHyperparams],
    ) -> Result<Self> {
        let latent = compressor.compress(train.rss())?;
        let candidates = scaled_grid(grid, &latent);
        let hp = gp_map::select_hyperparams(train.locations(), &latent, &candidates)?;
        let gp = GpModel::fit(train.locations(), &latent, &hp)?;
        Pipeline::new(label, compressor, gp)
    }

    pub fn latent_dim(&self) -> usize {
        self.gp.output_dim()
    }

    fn compress_one(&self, z: &[f64]) -> Result<DVector<f64>> {
        let row = DMatrix::from_row_slice(1, z.len(), z);
        let l = self.compressor.compress(&row)?;
        if l.ncols() != self.latent_dim() {
            return Err(Error::Dimension {
                expected: self.latent_dim(),
                actual: l.ncols(),
            });
        }
        Ok(l.row(0).transpose())
    }
}

/// `Σ_d log N(code_d; mean_d, var)`
pub fn gaussian_log_likelihood(mean: &[f64], variance: f64, code: &[f64]) -> f64 {
    let sq: f64 = mean.iter().zip(code).map(|(m, c)| (m - c) * (m - c)).sum();
    -0.5 * mean.len() as f64 * (LN_2PI + variance.ln()) - 0.5 * sq / variance
}

pub fn log_point_likelihood(pipeline: &Pipeline, z: &[f64], x_star: &Location) -> Result<f64> {
    let code = pipeline.compress_one(z)?;
    let (mean, var) = pipeline.gp.predict(x_star);
    Ok(gaussian_log_likelihood(mean.as_slice(), var, code.as_slice()))
}

/// Likelihood that measurement `z` (normalized units) originated at `x_star`.
pub fn point_likelihood(pipeline: &Pipeline, z: &[f64], x_star: &Location) -> Result<f64> {
    Ok(log_point_likelihood(pipeline, z, x_star)?.exp())
}

/// GP map predictions cached at every cell center of a grid.
#[derive(Clone, Debug)]
pub struct GridMap {
    pub grid: Grid,
    /// cells × c, row-major.
    means: Vec<f64>,
    variances: Vec<f64>,
    latent_dim: usize,
}

impl GridMap {
    pub fn new(gp: &GpModel, grid: Grid) -> Self {
        let preds: Vec<(DVector<f64>, f64)> = (0..grid.n_cells())
            .into_par_iter()
            .map(|i| gp.predict(&grid.cell_center(i)))
            .collect();
        let latent_dim = gp.output_dim();
        let mut means = Vec::with_capacity(preds.len() * latent_dim);
        let mut variances = Vec::with_capacity(preds.len());
        for (m, v) in preds {
            means.extend(m.iter());
            variances.push(v);
        }
        GridMap {
            grid,
            means,
            variances,
            latent_dim,
        }
    }

    pub fn mean(&self, cell: usize) -> &[f64] {
        &self.means[cell * self.latent_dim..(cell + 1) * self.latent_dim]
    }

    pub fn variance(&self, cell: usize) -> f64 {
        self.variances[cell]
    }

    /// Normalized field for an already-compressed code.
    pub fn field(&self, code: &[f64]) -> Result<LikelihoodField> {
        if code.len() != self.latent_dim {
            return Err(Error::Dimension {
                expected: self.latent_dim,
                actual: code.len(),
            });
        }
        let logs: Vec<f64> = (0..self.grid.n_cells())
            .into_par_iter()
            .map(|i| gaussian_log_likelihood(self.mean(i), self.variance(i), code))
            .collect();
        LikelihoodField::from_log_values(self.grid, &logs)
    }
}

pub fn likelihood_field(pipeline: &Pipeline, z: &[f64], grid: &Grid) -> Result<LikelihoodField> {
    let code = pipeline.compress_one(z)?;
    GridMap::new(&pipeline.gp, *grid).field(code.as_slice())
}

/// Isotropic Gaussian around `x_true`, evaluated at cell centers.
pub fn ideal_posterior(grid: &Grid, x_true: &Location, sigma: f64) -> Result<LikelihoodField> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let logs: Vec<f64> = (0..grid.n_cells())
        .map(|i| -grid.cell_center(i).sq_distance(x_true) * inv)
        .collect();
    LikelihoodField::from_log_values(*grid, &logs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(ideal ‖ estimated)
    #[default]
    IdealToEstimate,
    /// KL(estimated ‖ ideal)
    EstimateToIdeal,
}

/// `Σ p log(p / max(q, 1e-300))`, skipping cells where `p = 0`.
pub fn kl_divergence(p: &LikelihoodField, q: &LikelihoodField) -> Result<f64> {
    if p.grid != q.grid || p.mass.len() != q.mass.len() {
        return Err(Error::Data("KL divergence between fields on different grids".into()));
    }
    Ok(p.mass
        .iter()
        .zip(&q.mass)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_MASS_FLOOR)).ln())
        .sum())
}

pub fn kl_in_direction(ideal: &LikelihoodField, estimate: &LikelihoodField, direction: KlDirection) -> Result<f64> {
    match direction {
        KlDirection::IdealToEstimate => kl_divergence(ideal, estimate),
        KlDirection::EstimateToIdeal => kl_divergence(estimate, ideal),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub label: String,
    pub kl: Vec<f64>,
    pub argmax_error: Vec<f64>,
    pub mean_kl: f64,
    pub mean_argmax_error: f64,
}

impl EvalResult {
    fn from_values(label: String, kl: Vec<f64>, argmax_error: Vec<f64>) -> Self {
        let n = kl.len().max(1) as f64;
        let mean_kl = kl.iter().sum::<f64>() / n;
        let mean_argmax_error = argmax_error.iter().sum::<f64>() / n;
        EvalResult {
            label,
            kl,
            argmax_error,
            mean_kl,
            mean_argmax_error,
        }
    }

    /// One row per test point plus a trailing `mean` summary row.
    pub fn to_csv_string(&self, test_set: &SurveyDataset) -> String {
        let mut out = String::from("index,x,y,kl,argmax_error_m\n");
        for (i, (kl, err)) in self.kl.iter().zip(&self.argmax_error).enumerate() {
            let loc = test_set.location(i);
            let _ = writeln!(out, "{i},{},{},{kl},{err}", loc.x, loc.y);
        }
        let _ = writeln!(out, "mean,,,{},{}", self.mean_kl, self.mean_argmax_error);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub sigma: f64,
    pub direction: KlDirection,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            sigma: DEFAULT_IDEAL_SIGMA,
            direction: KlDirection::IdealToEstimate,
        }
    }
}

/// Scores every pipeline on every test row.
pub fn evaluate(
    pipelines: &[Pipeline],
    test_set: &SurveyDataset,
    grid: &Grid,
    settings: &EvalSettings,
) -> Result<Vec<EvalResult>> {
    let ideals = ideal_fields(grid, test_set, settings.sigma)?;
    pipelines
        .iter()
        .map(|p| {
            let map = GridMap::new(&p.gp, *grid);
            evaluate_with_map(p, &map, test_set, &ideals, settings.direction)
                .map_err(|e| e.context(&format!("pipeline {}", p.label)))
        })
        .collect()
}

/// Scores one pipeline on a precomputed map, so the same map can also serve
/// raster export.
pub fn evaluate_on_map(
    pipeline: &Pipeline,
    map: &GridMap,
    test_set: &SurveyDataset,
    settings: &EvalSettings,
) -> Result<EvalResult> {
    let ideals = ideal_fields(&map.grid, test_set, settings.sigma)?;
    evaluate_with_map(pipeline, map, test_set, &ideals, settings.direction)
        .map_err(|e| e.context(&format!("pipeline {}", pipeline.label)))
}

fn ideal_fields(grid: &Grid, test_set: &SurveyDataset, sigma: f64) -> Result<Vec<LikelihoodField>> {
    (0..test_set.len())
        .map(|i| ideal_posterior(grid, &test_set.location(i), sigma))
        .collect()
}

fn evaluate_with_map(
    pipeline: &Pipeline,
    map: &GridMap,
    test_set: &SurveyDataset,
    ideals: &[LikelihoodField],
    direction: KlDirection,
) -> Result<EvalResult> {
    let codes = pipeline.compressor.compress(test_set.rss())?;
    let scored: Vec<(f64, f64)> = (0..test_set.len())
        .map(|i| {
            let code: Vec<f64> = codes.row(i).iter().copied().collect();
            let field = map.field(&code).map_err(|e| e.context(&format!("test point {i}")))?;
            let kl = kl_in_direction(&ideals[i], &field, direction)?;
            let err = map.grid.cell_center(field.argmax()).distance(&test_set.location(i));
            Ok((kl, err))
        })
        .collect::<Result<_>>()?;
    let (kl, err) = scored.into_iter().unzip();
    Ok(EvalResult::from_values(pipeline.label.clone(), kl, err))
}

/// Field for test row `index`, for raster export.
pub fn field_for_row(
    pipeline: &Pipeline,
    map: &GridMap,
    test_set: &SurveyDataset,
    index: usize,
) -> Result<LikelihoodField> {
    if index >= test_set.len() {
        return Err(Error::Data(format!(
            "test index {index} out of range ({} test points)",
            test_set.len()
        )));
    }
    let z: Vec<f64> = test_set.rss().row(index).iter().copied().collect();
    let code = pipeline.compress_one(&z)?;
    map.field(code.as_slice())
}
