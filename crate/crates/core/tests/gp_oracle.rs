//! GP regression checked against dense-inverse and dense-density evaluation.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rss_atlas::dataset::Location;
use rss_atlas::gp_map::{self, GpHyperparams, GpModel};

fn random_points(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * extent)
}

fn random_targets(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn kernel(a: [f64; 2], b: [f64; 2], hp: &GpHyperparams) -> f64 {
    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    hp.signal_variance * (-d2 / (hp.length_scale * hp.length_scale)).exp()
}

fn row(x: &DMatrix<f64>, i: usize) -> [f64; 2] {
    [x[(i, 0)], x[(i, 1)]]
}

/// `(K + σ_n² I)` built entry by entry.
fn dense_cov(x: &DMatrix<f64>, hp: &GpHyperparams) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        kernel(row(x, i), row(x, j), hp) + if i == j { hp.noise_variance } else { 0.0 }
    })
}

/// Mean and variance from an explicit LU inverse.
fn dense_predict(x: &DMatrix<f64>, y: &DMatrix<f64>, hp: &GpHyperparams, q: [f64; 2]) -> (DVector<f64>, f64) {
    let inv = dense_cov(x, hp).try_inverse().expect("invertible");
    let k = DVector::from_fn(x.nrows(), |i, _| kernel(row(x, i), q, hp));
    let mean = y.transpose() * &inv * &k;
    let var = hp.signal_variance + hp.noise_variance - (k.transpose() * &inv * &k)[(0, 0)];
    (mean, var)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300).max(a.abs()).max(1e-12)
}

fn random_hp(rng: &mut ChaCha8Rng) -> GpHyperparams {
    GpHyperparams::new(
        0.25 + rng.random::<f64>(),
        2.0 + 6.0 * rng.random::<f64>(),
        0.01 + 0.2 * rng.random::<f64>(),
    )
    .unwrap()
}

#[test]
fn gram_matches_entrywise_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_points(3, 10.0, &mut rng);
    let hp = GpHyperparams::new(0.7, 3.0, 0.05).unwrap();
    let gram = gp_map::gram_matrix(&x, &hp);
    let oracle = dense_cov(&x, &hp);
    assert!((gram - oracle).abs().max() < 1e-15);
}

#[test]
fn fit_residual_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = random_points(20, 20.0, &mut rng);
        let y = random_targets(20, 3, &mut rng);
        let hp = random_hp(&mut rng);
        let model = GpModel::fit(&x, &y, &hp).unwrap();
        let residual = dense_cov(&x, &hp) * model.weights() - &y;
        assert!(residual.norm() / y.norm() < 1e-8);
    }
}

#[test]
fn five_point_prediction_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_points(5, 8.0, &mut rng);
    let y = random_targets(5, 2, &mut rng);
    let hp = GpHyperparams::new(1.0, 3.0, 0.1).unwrap();
    let model = GpModel::fit(&x, &y, &hp).unwrap();
    for _ in 0..10 {
        let q = [rng.random::<f64>() * 8.0, rng.random::<f64>() * 8.0];
        let (m, v) = model.predict(&Location::new(q[0], q[1]));
        let (mo, vo) = dense_predict(&x, &y, &hp, q);
        for d in 0..2 {
            assert!(rel(m[d], mo[d]) < 1e-8);
        }
        assert!(rel(v, vo) < 1e-8);
    }
}

#[test]
fn fifty_twenty_point_problems_match_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let x = random_points(20, 20.0, &mut rng);
        let y = random_targets(20, 4, &mut rng);
        let hp = random_hp(&mut rng);
        let model = GpModel::fit(&x, &y, &hp).unwrap();
        let q = [rng.random::<f64>() * 20.0, rng.random::<f64>() * 20.0];
        let (m, v) = model.predict(&Location::new(q[0], q[1]));
        let (mo, vo) = dense_predict(&x, &y, &hp, q);
        for d in 0..4 {
            assert!(rel(m[d], mo[d]) < 1e-8, "mean {} vs {}", m[d], mo[d]);
        }
        assert!(rel(v, vo) < 1e-8, "variance {v} vs {vo}");
    }
}

#[test]
fn noiseless_fit_interpolates_training_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [5, 20, 50] {
        // spread points on a jittered lattice so the Gram matrix stays well conditioned
        let side = (n as f64).sqrt().ceil() as usize;
        let x = DMatrix::from_fn(n, 2, |i, c| {
            let cell = if c == 0 { i % side } else { i / side };
            6.0 * cell as f64 + rng.random::<f64>()
        });
        let y = random_targets(n, 2, &mut rng);
        let hp = GpHyperparams::new(1.0, 3.0, 0.0).unwrap();
        let model = GpModel::fit(&x, &y, &hp).unwrap();
        for i in 0..n {
            let (m, v) = model.predict(&Location::new(x[(i, 0)], x[(i, 1)]));
            for d in 0..2 {
                assert!((m[d] - y[(i, d)]).abs() < 1e-6);
            }
            assert!(v <= 1e-6);
        }
    }
}

#[test]
fn variance_stays_within_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_points(30, 15.0, &mut rng);
    let y = random_targets(30, 1, &mut rng);
    let hp = GpHyperparams::new(0.5, 4.0, 0.05).unwrap();
    let model = GpModel::fit(&x, &y, &hp).unwrap();
    for _ in 0..200 {
        let q = Location::new(rng.random::<f64>() * 40.0 - 10.0, rng.random::<f64>() * 40.0 - 10.0);
        let (_, v) = model.predict(&q);
        assert!(v >= 0.0 && v <= hp.prior_variance());
    }
}

#[test]
fn mean_is_invariant_under_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_points(15, 10.0, &mut rng);
    let y = random_targets(15, 3, &mut rng);
    let hp = GpHyperparams::new(1.0, 4.0, 0.05).unwrap();
    let (theta, tx, ty) = (0.7f64, 12.5, -3.25);
    let (c, s) = (theta.cos(), theta.sin());
    let moved = DMatrix::from_fn(15, 2, |i, k| {
        let (a, b) = (x[(i, 0)], x[(i, 1)]);
        if k == 0 {
            c * a - s * b + tx
        } else {
            s * a + c * b + ty
        }
    });
    let m1 = GpModel::fit(&x, &y, &hp).unwrap();
    let m2 = GpModel::fit(&moved, &y, &hp).unwrap();
    for _ in 0..20 {
        let (a, b) = (rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0);
        let p1 = m1.predict_mean(&Location::new(a, b));
        let p2 = m2.predict_mean(&Location::new(c * a - s * b + tx, s * a + c * b + ty));
        assert!((p1 - p2).abs().max() < 1e-9);
    }
}

#[test]
fn mean_is_linear_in_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_points(12, 10.0, &mut rng);
    let y1 = random_targets(12, 2, &mut rng);
    let y2 = random_targets(12, 2, &mut rng);
    let (a, b) = (1.7, -0.4);
    let hp = GpHyperparams::new(0.5, 3.0, 0.05).unwrap();
    let m1 = GpModel::fit(&x, &y1, &hp).unwrap();
    let m2 = GpModel::fit(&x, &y2, &hp).unwrap();
    let mc = GpModel::fit(&x, &(&y1 * a + &y2 * b), &hp).unwrap();
    for _ in 0..10 {
        let q = Location::new(rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0);
        let lhs = mc.predict_mean(&q);
        let rhs = m1.predict_mean(&q) * a + m2.predict_mean(&q) * b;
        assert!((lhs - rhs).abs().max() < 1e-9);
    }
}

/// `Σ_cols log N(y_col; 0, K + σ_n² I)` from an explicit determinant and inverse.
fn dense_log_density(x: &DMatrix<f64>, y: &DMatrix<f64>, hp: &GpHyperparams) -> f64 {
    let cov = dense_cov(x, hp);
    let n = x.nrows() as f64;
    let det = cov.determinant();
    let inv = cov.try_inverse().unwrap();
    y.column_iter()
        .map(|col| {
            let quad = (col.transpose() * &inv * col)[(0, 0)];
            -0.5 * quad - 0.5 * det.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

#[test]
fn evidence_matches_dense_density_on_four_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x = random_points(4, 6.0, &mut rng);
        let y = random_targets(4, 3, &mut rng);
        let hp = random_hp(&mut rng);
        let lml = gp_map::log_marginal_likelihood(&x, &y, &hp).unwrap();
        assert!(rel(lml, dense_log_density(&x, &y, &hp)) < 1e-10);
    }
}

#[test]
fn evidence_ignores_column_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_points(10, 6.0, &mut rng);
    let y = random_targets(10, 3, &mut rng);
    let permuted = DMatrix::from_fn(10, 3, |i, j| y[(i, (j + 1) % 3)]);
    let hp = GpHyperparams::new(1.0, 2.0, 0.1).unwrap();
    let a = gp_map::log_marginal_likelihood(&x, &y, &hp).unwrap();
    let b = gp_map::log_marginal_likelihood(&x, &permuted, &hp).unwrap();
    assert!((a - b).abs() < 1e-10 * a.abs());
}

#[test]
fn selection_on_a_gp_draw_picks_the_highest_dense_evidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_points(60, 40.0, &mut rng);
    let truth = GpHyperparams::new(1.0, 10.0, 0.05).unwrap();
    // draw Y ~ N(0, K + σ_n² I) through a dense Cholesky factor
    let l = dense_cov(&x, &truth).cholesky().unwrap().unpack();
    let normal = rand_distr::StandardNormal;
    let white = DMatrix::from_fn(60, 4, |_, _| rng.sample::<f64, _>(normal));
    let y = l * white;
    let grid = gp_map::default_grid();
    assert!(grid.contains(&truth));
    let chosen = gp_map::select_hyperparams(&x, &y, &grid).unwrap();
    let best = dense_log_density(&x, &y, &chosen);
    for hp in &grid {
        assert!(best >= dense_log_density(&x, &y, hp) - 1e-8 * best.abs());
    }
}

proptest! {
    #[test]
    fn kernel_is_symmetric(ax in -50.0..50.0f64, ay in -50.0..50.0f64, bx in -50.0..50.0f64, by in -50.0..50.0f64,
                           s in 0.1..4.0f64, l in 0.5..40.0f64) {
        let hp = GpHyperparams::new(s, l, 0.0).unwrap();
        let (p, q) = (Location::new(ax, ay), Location::new(bx, by));
        prop_assert_eq!(gp_map::rbf_kernel(&p, &q, &hp), gp_map::rbf_kernel(&q, &p, &hp));
    }
}
