//! Principal component analysis baseline.
//!
//! The sample covariance (1/(n−1)) is diagonalized with a cyclic Jacobi
//! sweep so results are reproducible bit-for-bit, and each component is
//! signed so its largest-magnitude entry is positive.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;
use crate::linalg::{column_means, matrix_from_rows, matrix_to_rows};

pub const PCA_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    /// m×c, columns are unit eigenvectors.
    components: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending, eigenvectors in
/// columns.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    assert!(a.is_square());
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ties in index order
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).clone_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Sample covariance with 1/(n−1) normalization.
pub fn sample_covariance(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_means(z);
    let mut centered = z.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    centered.tr_mul(&centered) / (z.nrows() as f64 - 1.0)
}

impl PcaModel {
    pub fn fit(z: &DMatrix<f64>, components: usize) -> Result<Self> {
        let (n, m) = z.shape();
        if components == 0 || components > m {
            return Err(Error::Config(format!("PCA needs 1 <= c <= {m}, got c = {components}")));
        }
        if n < 2 {
            return Err(Error::Data(format!("PCA needs at least 2 rows, got {n}")));
        }
        let cov = sample_covariance(z);
        let (values, vectors) = symmetric_eigen(&cov);
        Ok(PcaModel {
            mean: column_means(z),
            components: vectors.columns(0, components).clone_owned(),
            eigenvalues: values.rows(0, components).clone_owned(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// `(Z − mean) · components`
    pub fn transform(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: z.ncols(),
            });
        }
        let mut centered = z.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.components)
    }

    /// `L · componentsᵀ + mean`
    pub fn inverse_transform(&self, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if l.ncols() != self.latent_dim() {
            return Err(Error::Dimension {
                expected: self.latent_dim(),
                actual: l.ncols(),
            });
        }
        let mut out = l * self.components.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn to_json(&self) -> Result<String> {
        io_util::to_json_string(&PcaModelFile {
            format_version: PCA_FORMAT_VERSION,
            kind: "pca".into(),
            input_dim: self.input_dim(),
            latent_dim: self.latent_dim(),
            mean: self.mean.iter().copied().collect(),
            components: matrix_to_rows(&self.components),
            eigenvalues: self.eigenvalues.iter().copied().collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: PcaModelFile = io_util::read_json(path)?;
        if f.format_version != PCA_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: f.format_version,
                expected: PCA_FORMAT_VERSION,
            });
        }
        if f.mean.len() != f.input_dim
            || f.components.len() != f.input_dim * f.latent_dim
            || f.eigenvalues.len() != f.latent_dim
        {
            return Err(Error::Data("PCA model file has inconsistent dimensions".into()));
        }
        Ok(PcaModel {
            mean: DVector::from_vec(f.mean),
            components: matrix_from_rows(f.input_dim, f.latent_dim, &f.components),
            eigenvalues: DVector::from_vec(f.eigenvalues),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PcaModelFile {
    format_version: u32,
    kind: String,
    input_dim: usize,
    latent_dim: usize,
    mean: Vec<f64>,
    /// m×c row-major.
    components: Vec<f64>,
    eigenvalues: Vec<f64>,
}
