use nalgebra::DMatrix;

use super::{CostMatrix, Metric};
use crate::{Error, Result};

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "row dimension {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Shape("empty point set".into()));
    }
    Ok(())
}

/// `D[i][j] = ‖aᵢ − bⱼ‖²`.
pub fn squared_euclidean_cost(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<CostMatrix> {
    check_dims(a, b)?;
    let sq_a: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let sq_b: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = a * b.transpose();
    for j in 0..d.ncols() {
        for i in 0..d.nrows() {
            let v = sq_a[i] + sq_b[j] - 2.0 * d[(i, j)];
            // cancellation can leave tiny negatives for coincident points
            d[(i, j)] = v.max(0.0);
        }
    }
    CostMatrix::new(d, Some(Metric::SquaredEuclidean))
}

/// Mean of the `k` largest values.
pub(crate) fn mean_top_k(values: &mut [f64], k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= values.len());
    let idx = values.len() - k;
    values.select_nth_unstable_by(idx, |x, y| x.total_cmp(y));
    values[idx..].iter().sum::<f64>() / k as f64
}

/// Row-wise mean of the `k` largest entries of `s`.
pub(crate) fn row_neighbourhood(s: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let mut scratch = vec![0.0; s.ncols()];
    s.row_iter()
        .map(|r| {
            scratch.iter_mut().zip(r.iter()).for_each(|(d, &v)| *d = v);
            mean_top_k(&mut scratch, k)
        })
        .collect()
}

/// Column-wise mean of the `k` largest entries of `s`.
pub(crate) fn col_neighbourhood(s: &DMatrix<f64>, k: usize) -> Vec<f64> {
    s.column_iter()
        .map(|c| {
            let mut col: Vec<f64> = c.iter().copied().collect();
            mean_top_k(&mut col, k)
        })
        .collect()
}

pub(crate) fn check_unit_rows(m: &DMatrix<f64>, name: &str) -> Result<()> {
    for (i, r) in m.row_iter().enumerate() {
        let n = r.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("{name} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Relaxed CSLS cost between unit-norm point sets:
///
/// `D[i][j] = −2·aᵢ·bⱼ + r_B(aᵢ) + r_A(bⱼ)`
///
/// where `r_B(a)` is the mean dot product of `a` with its `k` nearest rows of
/// `b` (and symmetrically for `r_A`).
pub fn rcsls_cost(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Result<CostMatrix> {
    check_dims(a, b)?;
    if k == 0 || k > a.nrows() || k > b.nrows() {
        return Err(Error::Invalid(format!(
            "neighbourhood size {k} must be in 1..={}",
            a.nrows().min(b.nrows())
        )));
    }
    check_unit_rows(a, "source")?;
    check_unit_rows(b, "target")?;

    let s = a * b.transpose();
    let r_a = row_neighbourhood(&s, k);
    let r_b = col_neighbourhood(&s, k);
    let d = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| -2.0 * s[(i, j)] + r_a[i] + r_b[j]);
    CostMatrix::new(d, Some(Metric::Rcsls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn unit_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
        for mut r in m.row_iter_mut() {
            let n = r.norm();
            r /= n;
        }
        m
    }

    #[test]
    fn sqeuclid_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(squared_euclidean_cost(&a, &b).unwrap().values()[(0, 0)], 25.0);
        let a = DMatrix::from_row_slice(1, 2, &[0.6, -1.3]);
        assert_eq!(squared_euclidean_cost(&a, &a).unwrap().values()[(0, 0)], 0.0);
    }

    #[test]
    fn sqeuclid_matches_double_loop() {
        let a = random(3, 2, 1);
        let b = random(3, 2, 2);
        let d = squared_euclidean_cost(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for c in 0..2 {
                    s += (a[(i, c)] - b[(j, c)]).powi(2);
                }
                assert!((d.values()[(i, j)] - s).abs() < 1e-12);
            }
        }
        assert_eq!(d.metric(), Some(Metric::SquaredEuclidean));
    }

    #[test]
    fn sqeuclid_dim_mismatch() {
        assert!(squared_euclidean_cost(&random(2, 3, 0), &random(2, 2, 0)).is_err());
    }

    #[test]
    fn sqeuclid_transpose_symmetry() {
        let a = random(4, 3, 5);
        let b = random(6, 3, 6);
        let ab = squared_euclidean_cost(&a, &b).unwrap();
        let ba = squared_euclidean_cost(&b, &a).unwrap();
        assert!((ab.values() - ba.values().transpose()).amax() < 1e-15);
    }

    #[test]
    fn rcsls_examples() {
        let e1 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let e2 = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(rcsls_cost(&e1, &e1, 1).unwrap().values()[(0, 0)], 0.0);
        assert_eq!(rcsls_cost(&e1, &e2, 1).unwrap().values()[(0, 0)], 0.0);
    }

    #[test]
    fn rcsls_matches_sorting_oracle() {
        let a = unit_rows(random(5, 4, 10));
        let b = unit_rows(random(5, 4, 11));
        let k = 2;
        let d = rcsls_cost(&a, &b, k).unwrap();
        let dot = |x: &DMatrix<f64>, i: usize, y: &DMatrix<f64>, j: usize| -> f64 {
            (0..4).map(|c| x[(i, c)] * y[(j, c)]).sum()
        };
        let knn_mean = |x: &DMatrix<f64>, i: usize, set: &DMatrix<f64>| -> f64 {
            let mut all: Vec<f64> = (0..set.nrows()).map(|j| dot(x, i, set, j)).collect();
            all.sort_by(|p, q| q.partial_cmp(p).unwrap());
            all[..k].iter().sum::<f64>() / k as f64
        };
        for i in 0..5 {
            for j in 0..5 {
                let expect = -2.0 * dot(&a, i, &b, j) + knn_mean(&a, i, &b) + knn_mean(&b, j, &a);
                assert!((d.values()[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rcsls_errors() {
        let a = unit_rows(random(3, 2, 0));
        assert!(rcsls_cost(&a, &a, 4).is_err());
        assert!(rcsls_cost(&a, &a, 0).is_err());
        assert!(rcsls_cost(&(&a * 2.0), &a, 1).is_err());
    }
}
