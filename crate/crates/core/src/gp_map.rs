//! Multi-output Gaussian-process regression from 2-D locations to signal
//! vectors.
//!
//! All output dimensions share one RBF kernel, so a fitted model is the
//! Cholesky factor of `K + σ_n² I` plus the weight matrix
//! `W = (K + σ_n² I)⁻¹ Y`; the predictive mean is `k*ᵀ W` and the predictive
//! variance is one scalar shared by every output.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataset::Location;
use crate::error::{Error, Result};
use crate::io_util;
use crate::linalg::{matrix_from_rows, matrix_to_rows};

pub const GP_FORMAT_VERSION: u32 = 1;

/// Relative diagonal jitter (times σ_s²) applied on a failed factorization.
pub const JITTER_FACTOR: f64 = 1e-8;

/// Smallest predictive variance ever returned.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub signal_variance: f64,
    pub length_scale: f64,
    pub noise_variance: f64,
}

impl GpHyperparams {
    pub fn new(signal_variance: f64, length_scale: f64, noise_variance: f64) -> Result<Self> {
        let hp = GpHyperparams {
            signal_variance,
            length_scale,
            noise_variance,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::Config("signal_variance must be > 0".into()));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::Config("length_scale must be > 0".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config("noise_variance must be >= 0".into()));
        }
        Ok(())
    }

    /// Prior variance of a new observation, `k** = σ_s² + σ_n²`.
    pub fn prior_variance(&self) -> f64 {
        self.signal_variance + self.noise_variance
    }

    /// Same hyperparameters with both variances multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        GpHyperparams {
            signal_variance: self.signal_variance * scale,
            length_scale: self.length_scale,
            noise_variance: self.noise_variance * scale,
        }
    }
}

/// Default evidence search grid in normalized output units.
pub fn default_grid() -> Vec<GpHyperparams> {
    let mut grid = Vec::with_capacity(45);
    for &l in &[2.0, 5.0, 10.0, 20.0, 40.0] {
        for &s in &[0.25, 0.5, 1.0] {
            for &n in &[0.01, 0.05, 0.1] {
                grid.push(GpHyperparams {
                    signal_variance: s,
                    length_scale: l,
                    noise_variance: n,
                });
            }
        }
    }
    grid
}

/// Squared-exponential kernel `σ_s² exp(−|p − q|² / l²)`.
pub fn rbf_kernel(p: &Location, q: &Location, hp: &GpHyperparams) -> f64 {
    hp.signal_variance * (-p.sq_distance(q) / (hp.length_scale * hp.length_scale)).exp()
}

fn row_location(x: &DMatrix<f64>, r: usize) -> Location {
    Location::new(x[(r, 0)], x[(r, 1)])
}

/// `K + σ_n² I` over the rows of `x` (n×2).
pub fn gram_matrix(x: &DMatrix<f64>, hp: &GpHyperparams) -> DMatrix<f64> {
    let n = x.nrows();
    let locs: Vec<Location> = (0..n).map(|r| row_location(x, r)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = rbf_kernel(&locs[i], &locs[j], hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = hp.signal_variance + hp.noise_variance;
    }
    k
}

/// Cross-covariance vector `k*` between the training inputs and `x_star`.
pub fn cross_covariance(x: &DMatrix<f64>, x_star: &Location, hp: &GpHyperparams) -> DVector<f64> {
    DVector::from_iterator(
        x.nrows(),
        (0..x.nrows()).map(|r| rbf_kernel(&row_location(x, r), x_star, hp)),
    )
}

/// Factorizes `K + σ_n² I`, retrying once with `1e-8·σ_s²` added to the
/// diagonal.
fn factorize(x: &DMatrix<f64>, hp: &GpHyperparams) -> Result<Cholesky<f64, Dyn>> {
    let gram = gram_matrix(x, hp);
    if let Some(ch) = Cholesky::new(gram.clone()) {
        return Ok(ch);
    }
    let jitter = JITTER_FACTOR * hp.signal_variance;
    let mut jittered = gram;
    for i in 0..jittered.nrows() {
        jittered[(i, i)] += jitter;
    }
    Cholesky::new(jittered).ok_or(Error::NotPositiveDefinite { jitter })
}

fn check_inputs(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            actual: x.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::Data("GP needs at least one training point".into()));
    }
    if y.nrows() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            actual: y.nrows(),
        });
    }
    if y.ncols() == 0 {
        return Err(Error::Data("GP targets have no columns".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GpModel {
    x_train: DMatrix<f64>,
    hyperparams: GpHyperparams,
    chol_factor: DMatrix<f64>,
    weights: DMatrix<f64>,
}

impl GpModel {
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, hp: &GpHyperparams) -> Result<Self> {
        hp.validate()?;
        check_inputs(x, y)?;
        let ch = factorize(x, hp)?;
        let weights = ch.solve(y);
        Ok(GpModel {
            x_train: x.clone(),
            hyperparams: *hp,
            chol_factor: ch.l(),
            weights,
        })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyperparams
    }

    pub fn x_train(&self) -> &DMatrix<f64> {
        &self.x_train
    }

    /// Lower-triangular factor of `K + σ_n² I` (including any jitter).
    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol_factor
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    /// Predictive mean (d-vector) and shared scalar variance at `x_star`.
    pub fn predict(&self, x_star: &Location) -> (DVector<f64>, f64) {
        let k_star = cross_covariance(&self.x_train, x_star, &self.hyperparams);
        let mean = self.weights.tr_mul(&k_star);
        let v = self
            .chol_factor
            .solve_lower_triangular(&k_star)
            .expect("cholesky factor has a positive diagonal");
        let var = (self.hyperparams.prior_variance() - v.norm_squared()).max(MIN_VARIANCE);
        (mean, var)
    }

    /// Predictive means only (cheaper: no triangular solve).
    pub fn predict_mean(&self, x_star: &Location) -> DVector<f64> {
        let k_star = cross_covariance(&self.x_train, x_star, &self.hyperparams);
        self.weights.tr_mul(&k_star)
    }

    pub fn to_json(&self) -> Result<String> {
        io_util::to_json_string(&GpModelFile::from_model(self))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: GpModelFile = io_util::read_json(path)?;
        file.into_model()
    }
}

pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, hp: &GpHyperparams) -> Result<GpModel> {
    GpModel::fit(x, y, hp)
}

pub fn predict(model: &GpModel, x_star: &Location) -> (DVector<f64>, f64) {
    model.predict(x_star)
}

/// GP evidence `log p(Y | X, θ)` summed over the independent output columns.
pub fn log_marginal_likelihood(x: &DMatrix<f64>, y: &DMatrix<f64>, hp: &GpHyperparams) -> Result<f64> {
    hp.validate()?;
    check_inputs(x, y)?;
    let ch = factorize(x, hp)?;
    let alpha = ch.solve(y);
    let (n, d) = y.shape();
    let data_fit: f64 = (0..d).map(|c| y.column(c).dot(&alpha.column(c))).sum();
    let l = ch.l_dirty();
    let log_det_half: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    Ok(-0.5 * data_fit - d as f64 * log_det_half - 0.5 * (n * d) as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Grid element with the highest evidence; ties go to the smaller length
/// scale, then to the earlier grid position. Candidates whose Gram matrix
/// cannot be factorized are skipped.
pub fn select_hyperparams(x: &DMatrix<f64>, y: &DMatrix<f64>, grid: &[GpHyperparams]) -> Result<GpHyperparams> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let mut best: Option<(f64, GpHyperparams)> = None;
    let mut last_err = None;
    for hp in grid {
        let lml = match log_marginal_likelihood(x, y, hp) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => continue,
            Err(e @ Error::NotPositiveDefinite { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let better = match &best {
            None => true,
            Some((b, bhp)) => lml > *b || (lml == *b && hp.length_scale < bhp.length_scale),
        };
        if better {
            best = Some((lml, *hp));
        }
    }
    best.map(|(_, hp)| hp)
        .ok_or_else(|| last_err.unwrap_or_else(|| Error::Numerical("no finite evidence on the grid".into())))
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
struct GpModelFile {
    format_version: u32,
    kind: String,
    hyperparams: GpHyperparams,
    n_train: usize,
    output_dim: usize,
    /// n×2 row-major.
    x_train: Vec<f64>,
    /// n×d row-major.
    weights: Vec<f64>,
    /// n×n row-major, lower triangle.
    chol_factor: Vec<f64>,
}

impl GpModelFile {
    fn from_model(m: &GpModel) -> Self {
        GpModelFile {
            format_version: GP_FORMAT_VERSION,
            kind: "gp_map".into(),
            hyperparams: m.hyperparams,
            n_train: m.n_train(),
            output_dim: m.output_dim(),
            x_train: matrix_to_rows(&m.x_train),
            weights: matrix_to_rows(&m.weights),
            chol_factor: matrix_to_rows(&m.chol_factor),
        }
    }

    fn into_model(self) -> Result<GpModel> {
        if self.format_version != GP_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: self.format_version,
                expected: GP_FORMAT_VERSION,
            });
        }
        self.hyperparams.validate()?;
        let (n, d) = (self.n_train, self.output_dim);
        for (name, len, want) in [
            ("x_train", self.x_train.len(), n * 2),
            ("weights", self.weights.len(), n * d),
            ("chol_factor", self.chol_factor.len(), n * n),
        ] {
            if len != want {
                return Err(Error::Data(format!(
                    "GP model field {name} has {len} values, expected {want}"
                )));
            }
        }
        Ok(GpModel {
            x_train: matrix_from_rows(n, 2, &self.x_train),
            hyperparams: self.hyperparams,
            chol_factor: matrix_from_rows(n, n, &self.chol_factor),
            weights: matrix_from_rows(n, d, &self.weights),
        })
    }
}
