//! Dense symmetric covariance matrices and their regularized factorization.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Variances below this are treated as deterministic zero coordinates.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Smallest and largest diagonal jitter, as multiples of the mean variance.
const JITTER_FLOOR: f64 = 1e-12;
const JITTER_CEILING: f64 = 1e-6;

/// A validated dense covariance matrix. Symmetrized on construction; fine
/// discretization grids routinely make these singular up to rounding, which
/// the factorization absorbs with an escalating diagonal jitter.
#[derive(Clone, Debug)]
pub struct CovarianceMatrix {
    m: DMatrix<f64>,
}

impl CovarianceMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("covariance entries must be finite".to_string()));
        }
        let scale = 1.0 + m.diagonal().amax();
        for i in 0..m.nrows() {
            if m[(i, i)] < -1e-10 * scale {
                return Err(Error::invalid(format!(
                    "negative variance {} at coordinate {i}",
                    m[(i, i)]
                )));
            }
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                    return Err(Error::invalid(format!(
                        "covariance not symmetric at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        let sym = 0.5 * (&m + m.transpose());
        Ok(CovarianceMatrix { m: sym })
    }

    /// Builds the matrix entrywise from `f(i, j)`; only the lower triangle is
    /// evaluated and mirrored, so `f` need not be symmetric to rounding.
    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..=i {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        CovarianceMatrix::new(m)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.m[(i, i)]
    }

    pub fn is_degenerate(&self, i: usize) -> bool {
        self.variance(i) < DEGENERATE_VARIANCE
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Cholesky factorization, adding diagonal jitter from 1e-12 to 1e-6
    /// times the mean variance if the plain factorization fails. Anything
    /// still unfactorizable after that is genuinely non-PSD.
    pub fn factor(&self) -> Result<CholeskyFactor> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::invalid("empty covariance".to_string()));
        }
        let mean_var = {
            let t = self.m.trace() / dim as f64;
            if t > 0.0 {
                t
            } else {
                1.0
            }
        };
        if let Some(chol) = nalgebra::Cholesky::new(self.m.clone()) {
            return Ok(CholeskyFactor {
                lower: chol.unpack(),
                jitter: 0.0,
            });
        }
        let mut jitter = JITTER_FLOOR * mean_var;
        while jitter <= JITTER_CEILING * mean_var * (1.0 + 1e-9) {
            let mut try_m = self.m.clone();
            for i in 0..dim {
                try_m[(i, i)] += jitter;
            }
            if let Some(chol) = nalgebra::Cholesky::new(try_m) {
                return Ok(CholeskyFactor {
                    lower: chol.unpack(),
                    jitter,
                });
            }
            jitter *= 10.0;
        }
        Err(Error::Factorization(format!(
            "covariance of dimension {dim} not factorizable with jitter up to {:.1e}",
            JITTER_CEILING * mean_var
        )))
    }
}

/// Lower-triangular Cholesky factor together with the jitter that was needed.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    pub jitter: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors_without_jitter() {
        let cov = CovarianceMatrix::new(DMatrix::identity(4, 4)).unwrap();
        let f = cov.factor().unwrap();
        assert_eq!(f.jitter, 0.0);
        assert!((f.lower() - DMatrix::identity(4, 4)).norm() < 1e-14);
    }

    #[test]
    fn singular_rank_one_needs_only_tiny_jitter() {
        let cov = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]))
            .unwrap();
        let f = cov.factor().unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= 1e-8);
        let rebuilt = f.lower() * f.lower().transpose();
        assert!((rebuilt - cov.matrix()).norm() < 1e-4);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let cov = CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]))
            .unwrap();
        assert!(matches!(cov.factor(), Err(Error::Factorization(_))));
    }

    #[test]
    fn construction_validation() {
        assert!(CovarianceMatrix::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).is_err());
        assert!(
            CovarianceMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0])).is_err()
        );
        assert!(CovarianceMatrix::new(DMatrix::from_row_slice(1, 1, &[-1.0])).is_err());
        let ok = CovarianceMatrix::from_fn(3, |i, j| if i == j { 1.0 } else { 0.2 }).unwrap();
        assert!(!ok.is_degenerate(0) && ok.variance(1) == 1.0);
    }
}
