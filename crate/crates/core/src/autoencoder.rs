//! Two-layer encoder/decoder with tanh, batch normalization and dropout.
//!
//! Each half is `dense → tanh → batchnorm → dropout → dense`, with linear
//! latent and reconstruction heads. Training minimizes
//!
//! ```text
//! Σ_i |z_i − ẑ_i|²  +  λ_r Σ_i |l_i|₁  +  w_d Σ_i Σ_j (|z_i − z_j|² − |l_i − l_j|²)²
//! ```
//!
//! over minibatches with Adam, where `w_d = λ_d / b²` by default. Gradients
//! are computed analytically; see the crate tests for the finite-difference
//! checks.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SurveyDataset;
use crate::error::{Error, Result};
use crate::io_util;
use crate::linalg::{matrix_from_rows, matrix_to_rows};

pub const AE_FORMAT_VERSION: u32 = 1;

/// Variance epsilon inside batch normalization.
pub const BN_EPSILON: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
}

impl BatchNorm {
    fn identity(width: usize) -> Self {
        BatchNorm {
            gamma: DVector::from_element(width, 1.0),
            beta: DVector::zeros(width),
            running_mean: DVector::zeros(width),
            running_var: DVector::from_element(width, 1.0),
        }
    }
}

/// Dense layer; `weights` is out×in.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub batch_norm: Option<BatchNorm>,
}

impl LayerParams {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn glorot(input: usize, output: usize, batch_norm: bool, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        LayerParams {
            weights: DMatrix::from_fn(output, input, |_, _| rng.random_range(-limit..=limit)),
            biases: DVector::zeros(output),
            batch_norm: batch_norm.then(|| BatchNorm::identity(output)),
        }
    }

    /// `x Wᵀ + 1 bᵀ`
    fn affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.weights.transpose();
        for mut row in out.row_iter_mut() {
            row += self.biases.transpose();
        }
        out
    }
}

/// One half of the network: hidden layer (with batch norm) and linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Half {
    pub hidden: LayerParams,
    pub output: LayerParams,
}

impl Half {
    fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Half {
            hidden: LayerParams::glorot(input, hidden, true, rng),
            output: LayerParams::glorot(hidden, output, false, rng),
        }
    }

    fn bn(&self) -> &BatchNorm {
        self.hidden
            .batch_norm
            .as_ref()
            .expect("hidden layer carries batch norm")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 || self.latent_dim == 0 {
            return Err(Error::Config("autoencoder dimensions must be positive".into()));
        }
        if self.latent_dim >= self.input_dim {
            return Err(Error::Config(format!(
                "latent_dim ({}) must be smaller than input_dim ({})",
                self.latent_dim, self.input_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams {
    pub encoder: Half,
    pub decoder: Half,
    /// Configuration the parameters were trained with, if any.
    pub train_config: Option<TrainConfig>,
}

impl AutoencoderParams {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(AutoencoderParams {
            encoder: Half::new(arch.input_dim, arch.encoder_hidden, arch.latent_dim, &mut rng),
            decoder: Half::new(arch.latent_dim, arch.decoder_hidden, arch.input_dim, &mut rng),
            train_config: None,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            encoder_hidden: self.encoder.hidden.output_dim(),
            latent_dim: self.latent_dim(),
            decoder_hidden: self.decoder.hidden.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.hidden.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output.output_dim()
    }

    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.encoder.hidden.output_dim(), self.decoder.hidden.output_dim())
    }

    fn check(&self) -> Result<()> {
        let a = self.architecture();
        a.validate()?;
        let chain = [
            (self.encoder.output.input_dim(), a.encoder_hidden),
            (self.decoder.hidden.input_dim(), a.latent_dim),
            (self.decoder.output.input_dim(), a.decoder_hidden),
            (self.decoder.output.output_dim(), a.input_dim),
        ];
        for (actual, expected) in chain {
            if actual != expected {
                return Err(Error::Dimension { expected, actual });
            }
        }
        for layer in [
            &self.encoder.hidden,
            &self.encoder.output,
            &self.decoder.hidden,
            &self.decoder.output,
        ] {
            if layer.biases.len() != layer.output_dim() {
                return Err(Error::Dimension {
                    expected: layer.output_dim(),
                    actual: layer.biases.len(),
                });
            }
        }
        if self.encoder.hidden.batch_norm.is_none() || self.decoder.hidden.batch_norm.is_none() {
            return Err(Error::Data("hidden layers must carry batch norm".into()));
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order shared with [`Gradients::named_slices`].
    pub fn named_slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        fn half<'a>(h: &'a mut Half, names: [&'static str; 6], out: &mut Vec<(&'static str, &'a mut [f64])>) {
            let bn = h.hidden.batch_norm.as_mut().expect("hidden layer carries batch norm");
            out.push((names[0], h.hidden.weights.as_mut_slice()));
            out.push((names[1], h.hidden.biases.as_mut_slice()));
            out.push((names[2], bn.gamma.as_mut_slice()));
            out.push((names[3], bn.beta.as_mut_slice()));
            out.push((names[4], h.output.weights.as_mut_slice()));
            out.push((names[5], h.output.biases.as_mut_slice()));
        }
        let mut out = Vec::with_capacity(12);
        half(&mut self.encoder, ENCODER_NAMES, &mut out);
        half(&mut self.decoder, DECODER_NAMES, &mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_model(path)
    }
}

const ENCODER_NAMES: [&str; 6] = [
    "encoder.hidden.weights",
    "encoder.hidden.biases",
    "encoder.bn.gamma",
    "encoder.bn.beta",
    "encoder.output.weights",
    "encoder.output.biases",
];
const DECODER_NAMES: [&str; 6] = [
    "decoder.hidden.weights",
    "decoder.hidden.biases",
    "decoder.bn.gamma",
    "decoder.bn.beta",
    "decoder.output.weights",
    "decoder.output.biases",
];

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceForm {
    /// `(|z_i − z_j|² − |l_i − l_j|²)²`
    #[default]
    SquaredDistance,
    /// `(|z_i − z_j| − |l_i − l_j|)²`
    Distance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub distance_form: DistanceForm,
    /// Divide the distance term by b² so λ_d does not depend on batch size.
    pub normalize_distance_by_batch: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_r: 1e-4,
            lambda_d: 1e-3,
            batch_size: 64,
            epochs: 2000,
            learning_rate: 1e-3,
            dropout_rate: 0.1,
            bn_momentum: 0.9,
            seed: 0,
            hidden_dim: 60,
            latent_dim: 10,
            distance_form: DistanceForm::SquaredDistance,
            normalize_distance_by_batch: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Default configuration with the distance term switched off.
    pub fn sparse() -> Self {
        TrainConfig {
            lambda_d: 0.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return bad("lambda_r must be >= 0");
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            return bad("lambda_d must be >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("bn_momentum must be in (0, 1)");
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return bad("hidden_dim and latent_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_epsilon > 0.0)
        {
            return bad("invalid Adam constants");
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            encoder_hidden: self.hidden_dim,
            latent_dim: self.latent_dim,
            decoder_hidden: self.hidden_dim,
        }
    }

    /// Multiplier applied to the raw pairwise sum for a batch of `b` rows.
    pub fn distance_weight(&self, b: usize) -> f64 {
        if self.normalize_distance_by_batch {
            self.lambda_d / (b * b) as f64
        } else {
            self.lambda_d
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics and inverted Bernoulli dropout.
    Training { dropout_rate: f64 },
    /// Running statistics, no dropout; deterministic.
    Inference,
}

#[derive(Clone, Debug)]
struct HalfCache {
    input: DMatrix<f64>,
    activated: DMatrix<f64>,
    normalized: DMatrix<f64>,
    inv_std: DVector<f64>,
    batch_stats: bool,
    batch_mean: DVector<f64>,
    batch_var: DVector<f64>,
    /// Scaled keep mask (0 or 1/(1−p)); `None` when dropout is inactive.
    mask: Option<DMatrix<f64>>,
    dropped: DMatrix<f64>,
}

/// Intermediates retained for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    encoder: HalfCache,
    decoder: HalfCache,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub latent: DMatrix<f64>,
    pub reconstruction: DMatrix<f64>,
    pub cache: ForwardCache,
}

fn half_forward(half: &Half, x: &DMatrix<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, HalfCache) {
    let b = x.nrows();
    let activated = half.hidden.affine(x).map(f64::tanh);
    let bn = half.bn();
    let width = activated.ncols();

    let (batch_stats, mean, var) = match mode {
        Mode::Training { .. } => {
            let mean = DVector::from_iterator(width, activated.column_iter().map(|c| c.sum() / b as f64));
            let var = DVector::from_iterator(
                width,
                activated
                    .column_iter()
                    .zip(mean.iter())
                    .map(|(c, &mu)| c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / b as f64),
            );
            (true, mean, var)
        }
        Mode::Inference => (false, bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std = var.map(|v| 1.0 / (v + BN_EPSILON).sqrt());
    let normalized = DMatrix::from_fn(b, width, |r, c| (activated[(r, c)] - mean[c]) * inv_std[c]);
    let scaled = DMatrix::from_fn(b, width, |r, c| bn.gamma[c] * normalized[(r, c)] + bn.beta[c]);

    let mask = match mode {
        Mode::Training { dropout_rate } if dropout_rate > 0.0 => {
            let keep = 1.0 / (1.0 - dropout_rate);
            Some(DMatrix::from_fn(b, width, |_, _| {
                if rng.random::<f64>() < dropout_rate {
                    0.0
                } else {
                    keep
                }
            }))
        }
        _ => None,
    };
    let dropped = match &mask {
        Some(m) => scaled.component_mul(m),
        None => scaled,
    };
    let out = half.output.affine(&dropped);
    (
        out,
        HalfCache {
            input: x.clone(),
            activated,
            normalized,
            inv_std,
            batch_stats,
            batch_mean: mean,
            batch_var: var,
            mask,
            dropped,
        },
    )
}

/// Runs the full network on a b×m batch.
pub fn forward(params: &AutoencoderParams, batch: &DMatrix<f64>, mode: Mode, seed: u64) -> Result<Forward> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::Dimension {
            expected: params.input_dim(),
            actual: batch.ncols(),
        });
    }
    if let Mode::Training { dropout_rate } = mode {
        if batch.nrows() < 2 {
            return Err(Error::Data(format!(
                "batch normalization needs at least 2 rows in training mode, got {}",
                batch.nrows()
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (latent, encoder) = half_forward(&params.encoder, batch, mode, &mut rng);
    let (reconstruction, decoder) = half_forward(&params.decoder, &latent, mode, &mut rng);
    Ok(Forward {
        latent,
        reconstruction,
        cache: ForwardCache { encoder, decoder },
    })
}

/// Latent codes in inference mode. Each row is pushed through the network
/// on its own, so a row's code never depends on its neighbours.
pub fn encode(params: &AutoencoderParams, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    rowwise(params.input_dim(), params.latent_dim(), z, |row| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        half_forward(&params.encoder, row, Mode::Inference, &mut rng).0
    })
}

/// Reconstructions from latent codes in inference mode.
pub fn decode(params: &AutoencoderParams, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    rowwise(params.latent_dim(), params.input_dim(), l, |row| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        half_forward(&params.decoder, row, Mode::Inference, &mut rng).0
    })
}

fn rowwise(
    input_dim: usize,
    output_dim: usize,
    x: &DMatrix<f64>,
    f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x.ncols() != input_dim {
        return Err(Error::Dimension {
            expected: input_dim,
            actual: x.ncols(),
        });
    }
    let mut out = DMatrix::zeros(x.nrows(), output_dim);
    for r in 0..x.nrows() {
        let row = x.rows(r, 1).clone_owned();
        out.set_row(r, &f(&row).row(0));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub distance: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.sparsity + self.distance
    }

    fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.sparsity.is_finite() && self.distance.is_finite()
    }
}

/// `Σ_i |z_i − ẑ_i|²`
pub fn reconstruction_loss(z: &DMatrix<f64>, z_hat: &DMatrix<f64>) -> f64 {
    assert_eq!(z.shape(), z_hat.shape());
    z.iter().zip(z_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `λ_r Σ_i |l_i|₁`
pub fn sparsity_loss(latent: &DMatrix<f64>, lambda_r: f64) -> f64 {
    lambda_r * latent.iter().map(|v| v.abs()).sum::<f64>()
}

fn pairwise_sq(m: &DMatrix<f64>) -> DMatrix<f64> {
    let b = m.nrows();
    let mut d = DMatrix::zeros(b, b);
    for i in 0..b {
        for j in (i + 1)..b {
            let v = crate::linalg::row_sq_dist(m, i, j);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Squared-distance invariance penalty summed over all ordered pairs,
/// `λ_d Σ_i Σ_j (|z_i − z_j|² − |l_i − l_j|²)²`.
pub fn distance_loss(z: &DMatrix<f64>, latent: &DMatrix<f64>, lambda_d: f64) -> f64 {
    distance_loss_with(z, latent, lambda_d, DistanceForm::SquaredDistance)
}

pub fn distance_loss_with(z: &DMatrix<f64>, latent: &DMatrix<f64>, lambda_d: f64, form: DistanceForm) -> f64 {
    assert_eq!(z.nrows(), latent.nrows());
    let dz = pairwise_sq(z);
    let dl = pairwise_sq(latent);
    let sum: f64 = match form {
        DistanceForm::SquaredDistance => dz.iter().zip(dl.iter()).map(|(a, b)| (a - b) * (a - b)).sum(),
        DistanceForm::Distance => dz
            .iter()
            .zip(dl.iter())
            .map(|(a, b)| {
                let e = a.sqrt() - b.sqrt();
                e * e
            })
            .sum(),
    };
    lambda_d * sum
}

/// The three weighted terms of the training objective for one batch.
pub fn loss_breakdown(
    z: &DMatrix<f64>,
    latent: &DMatrix<f64>,
    z_hat: &DMatrix<f64>,
    config: &TrainConfig,
) -> LossBreakdown {
    LossBreakdown {
        reconstruction: reconstruction_loss(z, z_hat),
        sparsity: sparsity_loss(latent, config.lambda_r),
        distance: distance_loss_with(z, latent, config.distance_weight(z.nrows()), config.distance_form),
    }
}

pub fn total_loss(z: &DMatrix<f64>, latent: &DMatrix<f64>, z_hat: &DMatrix<f64>, config: &TrainConfig) -> f64 {
    loss_breakdown(z, latent, z_hat, config).total()
}

// ---------------------------------------------------------------------------
// Backward pass

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub gamma: Option<DVector<f64>>,
    pub beta: Option<DVector<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: [LayerGrads; 2],
    pub decoder: [LayerGrads; 2],
}

impl Gradients {
    /// Same order and names as [`AutoencoderParams::named_slices_mut`].
    pub fn named_slices(&self) -> Vec<(&'static str, &[f64])> {
        fn half<'a>(g: &'a [LayerGrads; 2], names: [&'static str; 6], out: &mut Vec<(&'static str, &'a [f64])>) {
            out.push((names[0], g[0].weights.as_slice()));
            out.push((names[1], g[0].biases.as_slice()));
            out.push((names[2], g[0].gamma.as_ref().expect("hidden gamma").as_slice()));
            out.push((names[3], g[0].beta.as_ref().expect("hidden beta").as_slice()));
            out.push((names[4], g[1].weights.as_slice()));
            out.push((names[5], g[1].biases.as_slice()));
        }
        let mut out = Vec::with_capacity(12);
        half(&self.encoder, ENCODER_NAMES, &mut out);
        half(&self.decoder, DECODER_NAMES, &mut out);
        out
    }
}

/// Gradient of the distance term with respect to the latent rows.
pub fn distance_loss_latent_grad(
    z: &DMatrix<f64>,
    latent: &DMatrix<f64>,
    weight: f64,
    form: DistanceForm,
) -> DMatrix<f64> {
    let (b, c) = latent.shape();
    let mut grad = DMatrix::zeros(b, c);
    if weight == 0.0 {
        return grad;
    }
    let dz = pairwise_sq(z);
    let dl = pairwise_sq(latent);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            // Both ordered pairs (i, j) and (j, i) contribute.
            let coeff = match form {
                DistanceForm::SquaredDistance => 8.0 * weight * (dl[(i, j)] - dz[(i, j)]),
                DistanceForm::Distance => {
                    let nl = dl[(i, j)].sqrt();
                    if nl == 0.0 {
                        continue;
                    }
                    4.0 * weight * (nl - dz[(i, j)].sqrt()) / nl
                }
            };
            for k in 0..c {
                grad[(i, k)] += coeff * (latent[(i, k)] - latent[(j, k)]);
            }
        }
    }
    grad
}

fn colsum(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Backpropagates `d_out` (gradient at the half's output) and returns the
/// layer gradients plus the gradient at the half's input.
fn half_backward(half: &Half, cache: &HalfCache, d_out: &DMatrix<f64>) -> ([LayerGrads; 2], DMatrix<f64>) {
    let b = d_out.nrows() as f64;
    let output = LayerGrads {
        weights: d_out.tr_mul(&cache.dropped),
        biases: colsum(d_out),
        gamma: None,
        beta: None,
    };
    let mut d_y = d_out * &half.output.weights;
    if let Some(mask) = &cache.mask {
        d_y.component_mul_assign(mask);
    }
    let bn = half.bn();
    let d_gamma = colsum(&d_y.component_mul(&cache.normalized));
    let d_beta = colsum(&d_y);
    let width = d_y.ncols();
    let d_xhat = DMatrix::from_fn(d_y.nrows(), width, |r, c| d_y[(r, c)] * bn.gamma[c]);
    let d_act = if cache.batch_stats {
        let s1 = colsum(&d_xhat);
        let s2 = colsum(&d_xhat.component_mul(&cache.normalized));
        DMatrix::from_fn(d_y.nrows(), width, |r, c| {
            cache.inv_std[c] / b * (b * d_xhat[(r, c)] - s1[c] - cache.normalized[(r, c)] * s2[c])
        })
    } else {
        DMatrix::from_fn(d_y.nrows(), width, |r, c| d_xhat[(r, c)] * cache.inv_std[c])
    };
    let d_pre = d_act.zip_map(&cache.activated, |g, t| g * (1.0 - t * t));
    let hidden = LayerGrads {
        weights: d_pre.tr_mul(&cache.input),
        biases: colsum(&d_pre),
        gamma: Some(d_gamma),
        beta: Some(d_beta),
    };
    let d_input = &d_pre * &half.hidden.weights;
    ([hidden, output], d_input)
}

/// Analytic gradient of [`total_loss`] for one batch, holding the dropout
/// mask (drawn from `seed`) fixed. In training mode the gradient flows
/// through the batch statistics; in inference mode they are the running
/// statistics and act as constants.
pub fn gradients(
    params: &AutoencoderParams,
    batch: &DMatrix<f64>,
    config: &TrainConfig,
    mode: Mode,
    seed: u64,
) -> Result<(Gradients, LossBreakdown, ForwardCache)> {
    let fwd = forward(params, batch, mode, seed)?;
    let losses = loss_breakdown(batch, &fwd.latent, &fwd.reconstruction, config);
    let d_recon = (&fwd.reconstruction - batch) * 2.0;
    let (decoder, mut d_latent) = half_backward(&params.decoder, &fwd.cache.decoder, &d_recon);
    if config.lambda_r != 0.0 {
        d_latent += fwd.latent.map(|v| config.lambda_r * sign(v));
    }
    d_latent += distance_loss_latent_grad(
        batch,
        &fwd.latent,
        config.distance_weight(batch.nrows()),
        config.distance_form,
    );
    let (encoder, _) = half_backward(&params.encoder, &fwd.cache.encoder, &d_latent);
    Ok((Gradients { encoder, decoder }, losses, fwd.cache))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug)]
struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    learning_rate: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    fn new(params: &mut AutoencoderParams, config: &TrainConfig) -> Self {
        let sizes: Vec<usize> = params.named_slices_mut().iter().map(|(_, s)| s.len()).collect();
        Adam {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            learning_rate: config.learning_rate,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn update(&mut self, params: &mut AutoencoderParams, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut targets = params.named_slices_mut();
        for (k, ((_, g), (_, p))) in grads.named_slices().into_iter().zip(targets.iter_mut()).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

fn update_running_stats(half: &mut Half, cache: &HalfCache, momentum: f64) {
    let b = cache.input.nrows() as f64;
    let bn = half
        .hidden
        .batch_norm
        .as_mut()
        .expect("hidden layer carries batch norm");
    let unbias = b / (b - 1.0);
    for c in 0..bn.running_mean.len() {
        bn.running_mean[c] = momentum * bn.running_mean[c] + (1.0 - momentum) * cache.batch_mean[c];
        bn.running_var[c] = momentum * bn.running_var[c] + (1.0 - momentum) * cache.batch_var[c] * unbias;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-epoch sums of the weighted loss terms over all batches.
    pub epochs: Vec<LossBreakdown>,
    /// Reconstruction RMSE of the whole training set in inference mode, in
    /// dBm when the dataset carries normalization statistics.
    pub final_rmse_dbm: f64,
    pub wall_clock_seconds: f64,
    pub normalize_distance_by_batch: bool,
}

/// Minibatch Adam training on a normalized dataset.
pub fn train(ds: &SurveyDataset, config: &TrainConfig) -> Result<(AutoencoderParams, TrainReport)> {
    config.validate()?;
    if !ds.is_normalized() {
        return Err(Error::Data("autoencoder training expects a normalized dataset".into()));
    }
    if ds.len() < config.batch_size {
        return Err(Error::Data(format!(
            "dataset has {} rows, fewer than batch_size {}",
            ds.len(),
            config.batch_size
        )));
    }
    let started = Instant::now();
    let z = ds.rss();
    let mut params = AutoencoderParams::init(config.architecture(ds.n_aps()), config.seed)?;
    params.train_config = Some(config.clone());
    let mut adam = Adam::new(&mut params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mode = Mode::Training {
        dropout_rate: config.dropout_rate,
    };

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut totals = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = z.select_rows(chunk);
            let (grads, losses, cache) = gradients(&params, &batch, config, mode, rng.next_u64())?;
            if !losses.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("non-finite loss {losses:?}"),
                });
            }
            totals.reconstruction += losses.reconstruction;
            totals.sparsity += losses.sparsity;
            totals.distance += losses.distance;
            adam.update(&mut params, &grads);
            update_running_stats(&mut params.encoder, &cache.encoder, config.bn_momentum);
            update_running_stats(&mut params.decoder, &cache.decoder, config.bn_momentum);
        }
        if params
            .named_slices_mut()
            .iter()
            .any(|(_, s)| s.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                epoch,
                message: "non-finite parameter after update".into(),
            });
        }
        history.push(totals);
    }

    let final_rmse_dbm = reconstruction_rmse(&params, ds)?;
    let report = TrainReport {
        epochs: history,
        final_rmse_dbm,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        normalize_distance_by_batch: config.normalize_distance_by_batch,
    };
    Ok((params, report))
}

/// RMSE of `decode(encode(Z))` against `Z` over every entry, converted back
/// to dBm when the dataset is normalized.
pub fn reconstruction_rmse(params: &AutoencoderParams, ds: &SurveyDataset) -> Result<f64> {
    let recon = decode(params, &encode(params, ds.rss())?)?;
    let (z, zh) = match ds.normalization() {
        Some(stats) => (stats.denormalize_matrix(ds.rss()), stats.denormalize_matrix(&recon)),
        None => (ds.rss().clone(), recon),
    };
    let n = z.len() as f64;
    Ok((reconstruction_loss(&z, &zh) / n).sqrt())
}

// ---------------------------------------------------------------------------
// Model files

#[derive(Serialize, Deserialize)]
struct BatchNormFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    input_dim: usize,
    output_dim: usize,
    /// out×in row-major.
    weights: Vec<f64>,
    biases: Vec<f64>,
    batch_norm: Option<BatchNormFile>,
}

#[derive(Serialize, Deserialize)]
struct AutoencoderFile {
    format_version: u32,
    kind: String,
    input_dim: usize,
    latent_dim: usize,
    hidden_dims: [usize; 2],
    encoder: [LayerFile; 2],
    decoder: [LayerFile; 2],
    train_config: Option<TrainConfig>,
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

impl LayerFile {
    fn from_layer(l: &LayerParams) -> Self {
        LayerFile {
            input_dim: l.input_dim(),
            output_dim: l.output_dim(),
            weights: matrix_to_rows(&l.weights),
            biases: vec_of(&l.biases),
            batch_norm: l.batch_norm.as_ref().map(|bn| BatchNormFile {
                gamma: vec_of(&bn.gamma),
                beta: vec_of(&bn.beta),
                running_mean: vec_of(&bn.running_mean),
                running_var: vec_of(&bn.running_var),
            }),
        }
    }

    fn into_layer(self) -> Result<LayerParams> {
        let (i, o) = (self.input_dim, self.output_dim);
        if self.weights.len() != i * o || self.biases.len() != o {
            return Err(Error::Data("layer tensor sizes do not match its dimensions".into()));
        }
        let batch_norm = match self.batch_norm {
            None => None,
            Some(bn) => {
                if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                    .iter()
                    .any(|v| v.len() != o)
                {
                    return Err(Error::Data("batch norm vectors do not match layer width".into()));
                }
                if bn.running_var.iter().any(|&v| v < 0.0) {
                    return Err(Error::Data("negative running variance".into()));
                }
                Some(BatchNorm {
                    gamma: DVector::from_vec(bn.gamma),
                    beta: DVector::from_vec(bn.beta),
                    running_mean: DVector::from_vec(bn.running_mean),
                    running_var: DVector::from_vec(bn.running_var),
                })
            }
        };
        Ok(LayerParams {
            weights: matrix_from_rows(o, i, &self.weights),
            biases: DVector::from_vec(self.biases),
            batch_norm,
        })
    }
}

pub fn save_model(params: &AutoencoderParams, path: &Path) -> Result<()> {
    io_util::write_atomic(path, model_to_json(params)?.as_bytes())
}

pub fn model_to_json(params: &AutoencoderParams) -> Result<String> {
    let (he, hd) = params.hidden_dims();
    let file = AutoencoderFile {
        format_version: AE_FORMAT_VERSION,
        kind: "autoencoder".into(),
        input_dim: params.input_dim(),
        latent_dim: params.latent_dim(),
        hidden_dims: [he, hd],
        encoder: [
            LayerFile::from_layer(&params.encoder.hidden),
            LayerFile::from_layer(&params.encoder.output),
        ],
        decoder: [
            LayerFile::from_layer(&params.decoder.hidden),
            LayerFile::from_layer(&params.decoder.output),
        ],
        train_config: params.train_config.clone(),
    };
    io_util::to_json_string(&file)
}

pub fn load_model(path: &Path) -> Result<AutoencoderParams> {
    let file: AutoencoderFile = io_util::read_json(path)?;
    if file.format_version != AE_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: file.format_version,
            expected: AE_FORMAT_VERSION,
        });
    }
    let [eh, eo] = file.encoder;
    let [dh, dout] = file.decoder;
    let params = AutoencoderParams {
        encoder: Half {
            hidden: eh.into_layer()?,
            output: eo.into_layer()?,
        },
        decoder: Half {
            hidden: dh.into_layer()?,
            output: dout.into_layer()?,
        },
        train_config: file.train_config,
    };
    params.check()?;
    if params.input_dim() != file.input_dim
        || params.latent_dim() != file.latent_dim
        || params.hidden_dims() != (file.hidden_dims[0], file.hidden_dims[1])
    {
        return Err(Error::Data(
            "autoencoder header dimensions disagree with tensors".into(),
        ));
    }
    Ok(params)
}
