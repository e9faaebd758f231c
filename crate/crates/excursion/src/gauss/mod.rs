//! Gaussian numerical kernels shared by every engine: normal special
//! functions, Gauss quadrature rules, covariance factorization with a jitter
//! ladder, exact joint sampling, the Genz quasi Monte Carlo multivariate
//! normal CDF, and the absolute-product moment of a bivariate Gaussian pair.

mod abs_moment;
mod matrix;
mod mvn;
mod quadrature;
mod sampler;
mod special;

pub use abs_moment::abs_product_moment;
pub use matrix::{CholeskyFactor, CovarianceMatrix, DEGENERATE_VARIANCE};
pub use mvn::{mvn_cdf, mvn_cdf_abs_moment, mvn_cdf_seeded, DEFAULT_QMC_SEED};
pub(crate) use mvn::MAX_DIM as MVN_MAX_DIM;
pub use quadrature::{
    gauss_hermite_expectation, gauss_legendre_rule, half_range_hermite_rule, integrate_panels,
    panel_nodes,
};
pub use sampler::chol_sample;
pub(crate) use sampler::standard_normal_matrix;

/// A numerical result with an absolute error bound and a tag naming the
/// method that produced it. Quadrature methods report tolerance-style bounds;
/// Monte Carlo methods report 3 standard errors.
#[derive(Clone, Debug)]
pub struct EstimateWithError {
    pub value: f64,
    pub abs_error: f64,
    pub method: String,
}

impl EstimateWithError {
    pub fn new(value: f64, abs_error: f64, method: impl Into<String>) -> Self {
        debug_assert!(value.is_finite() && abs_error.is_finite() && abs_error >= 0.0);
        EstimateWithError {
            value,
            abs_error,
            method: method.into(),
        }
    }
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * special::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational initial guess polished by one Halley
/// step against the erfc-based CDF, giving close to full f64 accuracy.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = quantile_initial_guess(p);
    // Halley refinement: e is the CDF residual scaled by the density.
    let e = (norm_cdf(x) - p) / norm_pdf(x);
    x - e / (1.0 + 0.5 * x * e)
}

/// Normal quantile without the Halley polish, for quasi Monte Carlo inner
/// loops where the 1.2e-9 relative error of the rational approximation sits
/// far below the rule's own accuracy and the polish would double the cost.
#[inline]
pub(crate) fn fast_norm_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    quantile_initial_guess(p)
}

/// Peter Acklam's rational approximation, |relative error| < 1.2e-9.
fn quantile_initial_guess(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        // ln(1-p) via ln_1p(-p) keeps precision for p near 1.
        let q = (-2.0 * (-p).ln_1p()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.0) - 0.841344746068543).abs() < 1e-12);
        // Deep tail stays accurate through erfc.
        assert!((norm_cdf(-8.0) - 6.22096057427178e-16).abs() < 1e-25);
        assert!((norm_cdf(3.0) + norm_cdf(-3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.7, 0.99, 1.0 - 1e-9] {
            let x = norm_quantile(p);
            assert!(
                (norm_cdf(x) - p).abs() <= 1e-14 + 1e-12 * p,
                "p={p}: x={x}, cdf={}",
                norm_cdf(x)
            );
        }
        assert_eq!(norm_quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(norm_quantile(1.0), f64::INFINITY);
        assert!((norm_quantile(0.5)).abs() < 1e-15);
    }
}
