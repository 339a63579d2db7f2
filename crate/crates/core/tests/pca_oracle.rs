//! PCA against a closed-form 3×3 eigen-solver and basic projection laws.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rss_atlas::pca::{sample_covariance, symmetric_eigen, PcaModel};

fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// Roots of the characteristic polynomial of a symmetric 3×3 matrix via the
/// trigonometric solution of the depressed cubic, descending.
fn cubic_eigenvalues(a: &DMatrix<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = (a[(0, 0)] + a[(1, 1)] + a[(2, 2)]) / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - DMatrix::<f64>::identity(3, 3) * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

/// Null vector of `A − λI` as the largest cross product of two of its rows.
fn null_vector(a: &DMatrix<f64>, lambda: f64) -> Vector3<f64> {
    let m = a - DMatrix::<f64>::identity(3, 3) * lambda;
    let r = |i: usize| Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)]);
    [r(0).cross(&r(1)), r(0).cross(&r(2)), r(1).cross(&r(2))]
        .into_iter()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .unwrap()
        .normalize()
}

#[test]
fn three_by_three_eigenpairs_match_characteristic_polynomial() {
    for seed in 0..25 {
        let z = random(12, 3, 100 + seed);
        let cov = sample_covariance(&z);
        let expected = cubic_eigenvalues(&cov);
        let (values, vectors) = symmetric_eigen(&cov);
        for k in 0..3 {
            assert!(
                (values[k] - expected[k]).abs() < 1e-8,
                "eigenvalue {k}: {} vs {}",
                values[k],
                expected[k]
            );
            let v = Vector3::new(vectors[(0, k)], vectors[(1, k)], vectors[(2, k)]);
            let oracle = null_vector(&cov, expected[k]);
            // eigenvectors are defined up to sign
            assert!((v.dot(&oracle).abs() - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn sample_covariance_uses_n_minus_one() {
    let z = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
    assert_eq!(sample_covariance(&z)[(0, 0)], 2.0);
}

fn mse(pca: &PcaModel, z: &DMatrix<f64>) -> f64 {
    let back = pca.inverse_transform(&pca.transform(z).unwrap()).unwrap();
    (back - z).norm_squared() / z.len() as f64
}

#[test]
fn reconstruction_error_is_non_increasing_in_components() {
    let z = random(30, 12, 7);
    let errors: Vec<f64> = (1..=12).map(|c| mse(&PcaModel::fit(&z, c).unwrap(), &z)).collect();
    for w in errors.windows(2) {
        assert!(w[1] <= w[0] + 1e-15);
    }
    assert!(errors[11] < 1e-16);
}

#[test]
fn full_rank_round_trip() {
    let z = random(30, 12, 8);
    let pca = PcaModel::fit(&z, 12).unwrap();
    let back = pca.inverse_transform(&pca.transform(&z).unwrap()).unwrap();
    assert!((back - &z).abs().max() < 1e-8);
}

#[test]
fn projected_columns_are_uncorrelated() {
    let z = random(40, 8, 9);
    let pca = PcaModel::fit(&z, 5).unwrap();
    let cov = sample_covariance(&pca.transform(&z).unwrap());
    let scale = cov.diagonal().max();
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                assert!(cov[(i, j)].abs() < 1e-6 * scale);
            }
        }
        // component variances are the eigenvalues
        assert!((cov[(i, i)] - pca.eigenvalues()[i]).abs() < 1e-10 * scale);
    }
}

#[test]
fn fit_is_reproducible() {
    let z = random(25, 6, 10);
    let a = PcaModel::fit(&z, 3).unwrap();
    let b = PcaModel::fit(&z, 3).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}
