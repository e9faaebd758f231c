//! Exact joint Gaussian sampling from a factored covariance.

use super::matrix::CovarianceMatrix;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Column-major matrix of i.i.d. standard normals drawn from `rng`.
pub(crate) fn standard_normal_matrix(
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    DMatrix::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)))
}

/// Draws `count` exact samples of N(mean, cov). One factorization, one matrix
/// product; deterministic in `seed`.
pub fn chol_sample(
    cov: &CovarianceMatrix,
    mean: &DVector<f64>,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if mean.len() != cov.dim() {
        return Err(Error::invalid(format!(
            "mean length {} does not match covariance dimension {}",
            mean.len(),
            cov.dim()
        )));
    }
    let factor = cov.factor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal_matrix(cov.dim(), count, &mut rng);
    let x = factor.lower() * z;
    Ok(x.column_iter().map(|col| col + mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_moments_match() {
        let cov = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]))
            .unwrap();
        let mean = DVector::from_row_slice(&[0.5, -1.0]);
        let n = 40_000;
        let draws = chol_sample(&cov, &mean, n, 321).unwrap();
        let tol = 5.0 / (n as f64).sqrt();

        let mut sum = DVector::zeros(2);
        for d in &draws {
            sum += d;
        }
        let emp_mean = sum / n as f64;
        assert!((emp_mean[0] - 0.5).abs() < tol && (emp_mean[1] + 1.0).abs() < 2.0 * tol);

        let mut cc = DMatrix::zeros(2, 2);
        for d in &draws {
            let c = d - &emp_mean;
            cc += &c * c.transpose();
        }
        cc /= (n - 1) as f64;
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (cc[(i, j)] - cov.entry(i, j)).abs() < 5.0 * tol,
                    "cov[{i}][{j}] = {} vs {}",
                    cc[(i, j)],
                    cov.entry(i, j)
                );
            }
        }
    }

    #[test]
    fn degenerate_direction_gives_equal_coordinates() {
        let cov = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]))
            .unwrap();
        let draws = chol_sample(&cov, &DVector::zeros(2), 500, 7).unwrap();
        for d in &draws {
            assert!((d[0] - d[1]).abs() < 1e-4, "coordinates differ: {d}");
        }
    }

    #[test]
    fn kernel_grid_correlations() {
        // Ten equally spaced points under the unit Gaussian kernel.
        let pts: Vec<f64> = (0..10).map(|i| 0.25 * i as f64).collect();
        let cov = CovarianceMatrix::from_fn(10, |i, j| {
            let d: f64 = pts[i] - pts[j];
            (-d * d / 2.0).exp()
        })
        .unwrap();
        let n = 30_000;
        let draws = chol_sample(&cov, &DVector::zeros(10), n, 99).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        for (i, j) in [(0usize, 1usize), (0, 4), (2, 9)] {
            let mut s = 0.0;
            for d in &draws {
                s += d[i] * d[j];
            }
            let emp = s / n as f64;
            let d = pts[i] - pts[j];
            let want = (-d * d / 2.0).exp();
            assert!((emp - want).abs() < 2.0 * tol, "corr({i},{j}) = {emp} vs {want}");
        }
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let cov = CovarianceMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let a = chol_sample(&cov, &DVector::zeros(3), 5, 2024).unwrap();
        let b = chol_sample(&cov, &DVector::zeros(3), 5, 2024).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        assert!(chol_sample(&cov, &DVector::zeros(2), 5, 1).is_err());
    }
}
