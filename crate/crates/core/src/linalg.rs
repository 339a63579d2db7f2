//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub(crate) fn matrix_from_rows(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Squared Euclidean distance between rows `i` and `j`.
pub fn row_sq_dist(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..m.ncols())
        .map(|c| {
            let d = m[(i, c)] - m[(j, c)];
            d * d
        })
        .sum()
}

/// Column means as a vector.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Pearson correlation of two equal-length samples. Returns 0 when either
/// sample is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Pearson correlation between all pairwise Euclidean row distances of `a`
/// and of `b` (unordered pairs, `i < j`).
pub fn pairwise_distance_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows());
    let n = a.nrows();
    let mut da = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut db = Vec::with_capacity(da.capacity());
    for i in 0..n {
        for j in (i + 1)..n {
            da.push(row_sq_dist(a, i, j).sqrt());
            db.push(row_sq_dist(b, i, j).sqrt());
        }
    }
    pearson(&da, &db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_affine_copy_is_one() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &c) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_layout_round_trip() {
        let m = matrix_from_rows(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(matrix_to_rows(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
