//! Wireless signal-strength mapping with compressed representations.
//!
//! A survey pairs 2-D robot locations with RSS vectors from many access
//! points. The crate learns location-to-signal Gaussian-process maps either
//! directly on the RSS vectors or on a compressed latent space (PCA or an
//! autoencoder trained with a distance-invariance penalty), and scores the
//! resulting per-measurement likelihood fields against an ideal posterior.
//!
//! Module map:
//!
//! - [`dataset`]: CSV I/O, synthetic surveys, normalization, splits.
//! - [`gp_map`]: multi-output GP regression with an RBF kernel.
//! - [`autoencoder`]: two-layer encoder/decoder with hand-written backprop.
//! - [`pca`]: principal-component baseline compressor.
//! - [`localization`]: likelihood fields on a grid and KL scoring.
//! - [`experiment`]: configuration and orchestration used by the CLI.

pub mod autoencoder;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gp_map;
pub mod io_util;
pub mod linalg;
pub mod localization;
pub mod pca;

pub use error::{Error, Result};
