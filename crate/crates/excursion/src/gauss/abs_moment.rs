//! E|W1 * W2| for a bivariate Gaussian pair with arbitrary moments.
//!
//! Conditioning W2 on W1 makes the inner expectation a folded-normal mean in
//! closed form, leaving a single outer integral of |w| times a smooth
//! function against the W1 density. That outer integral is evaluated with the
//! half-range Hermite rule (exact for the |w| kink), tilting the nodes'
//! Gaussian weight to the actual mean. The outer variable is chosen as the
//! one with the smaller |mean|/sd ratio to keep the tilt factor tame; when
//! both ratios are huge the product's sign is a.s. constant and the moment
//! collapses to |E[W1 W2]| in closed form.

use super::quadrature::half_range_hermite_rule;
use super::EstimateWithError;
use crate::error::{Error, Result};
use nalgebra::{Matrix2, Vector2};

const BASE_ORDER: usize = 40;
/// Beyond this many standard deviations the sign-flip mass is below 1e-18.
const SIGN_DEFINITE_RATIO: f64 = 9.0;
const DEGENERATE_VAR: f64 = 1e-12;

/// Mean of |N(m, s^2)|.
fn folded_mean(m: f64, s: f64) -> f64 {
    if s < 1e-150 {
        return m.abs();
    }
    let two_over_pi = 2.0 / std::f64::consts::PI;
    s * two_over_pi.sqrt() * (-m * m / (2.0 * s * s)).exp()
        + m * (1.0 - 2.0 * super::norm_cdf(-m / s))
}

/// E[|W| h(W)] for W ~ N(mu, sigma2) by the half-range rule, with the
/// Gaussian weight recentred through an explicit exponential tilt.
fn outer_abs_expectation(h: impl Fn(f64) -> f64, mu: f64, sigma2: f64, order: usize) -> Result<f64> {
    let rule = half_range_hermite_rule(order)?;
    let sigma = sigma2.sqrt();
    let scale = std::f64::consts::SQRT_2 * sigma;
    let tilt = std::f64::consts::SQRT_2 * mu / sigma;
    let offset = -mu * mu / (2.0 * sigma2);
    let (ref nodes, ref weights) = *rule;
    let mut sum = 0.0;
    for (&z, &w) in nodes.iter().zip(weights) {
        let abs_w = scale * z;
        sum += w
            * abs_w
            * (h(abs_w) * (tilt * z + offset).exp() + h(-abs_w) * (-tilt * z + offset).exp());
    }
    Ok(sum / std::f64::consts::PI.sqrt())
}

/// E|W1 W2| for (W1, W2) ~ N(mean, cov).
pub fn abs_product_moment(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<EstimateWithError> {
    if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
        return Err(Error::invalid("moments must be finite".to_string()));
    }
    let scale = cov[(0, 0)].abs().max(cov[(1, 1)].abs()).max(1.0);
    if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-9 * scale {
        return Err(Error::invalid(format!(
            "covariance not symmetric: {} vs {}",
            cov[(0, 1)],
            cov[(1, 0)]
        )));
    }
    let c11 = cov[(0, 0)];
    let c22 = cov[(1, 1)];
    let c12 = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    if c11 < -1e-12 * scale
        || c22 < -1e-12 * scale
        || c11 * c22 - c12 * c12 < -1e-9 * scale * scale
    {
        return Err(Error::invalid(format!(
            "covariance [[{c11}, {c12}], [{c12}, {c22}]] is not PSD"
        )));
    }
    let c11 = c11.max(0.0);
    let c22 = c22.max(0.0);

    // Deterministic factors come out of the expectation exactly.
    if c11 < DEGENERATE_VAR && c22 < DEGENERATE_VAR {
        let v = (mean.x * mean.y).abs();
        return Ok(EstimateWithError::new(v, 1e-15 * v.abs(), "degenerate-exact"));
    }
    if c11 < DEGENERATE_VAR {
        let v = mean.x.abs() * folded_mean(mean.y, c22.sqrt());
        return Ok(EstimateWithError::new(v, 1e-14 * v.abs(), "degenerate-exact"));
    }
    if c22 < DEGENERATE_VAR {
        let v = mean.y.abs() * folded_mean(mean.x, c11.sqrt());
        return Ok(EstimateWithError::new(v, 1e-14 * v.abs(), "degenerate-exact"));
    }

    let ratio1 = mean.x.abs() / c11.sqrt();
    let ratio2 = mean.y.abs() / c22.sqrt();
    if ratio1.min(ratio2) > SIGN_DEFINITE_RATIO {
        // Neither factor ever changes sign (up to mass < 1e-18), so
        // E|W1 W2| = |E[W1 W2]| = |mu1 mu2 + c12|.
        let v = (mean.x * mean.y + c12).abs();
        return Ok(EstimateWithError::new(v, 1e-12 * v, "sign-definite"));
    }

    // Outer variable: the one more likely to change sign, so the tilt stays
    // within the quadrature's comfortable range.
    let (mu_o, var_o, mu_i, var_i) = if ratio1 <= ratio2 {
        (mean.x, c11, mean.y, c22)
    } else {
        (mean.y, c22, mean.x, c11)
    };
    let slope = c12 / var_o;
    let cond_sd = (var_i - c12 * c12 / var_o).max(0.0).sqrt();
    let h = |w: f64| folded_mean(mu_i + slope * (w - mu_o), cond_sd);

    let coarse = outer_abs_expectation(h, mu_o, var_o, BASE_ORDER)?;
    let fine = outer_abs_expectation(h, mu_o, var_o, 2 * BASE_ORDER)?;
    let err = (coarse - fine).abs() + 1e-14 * fine.abs();
    Ok(EstimateWithError::new(fine.max(0.0), err, "half-range-hermite"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_standard_pair() {
        let est = abs_product_moment(Vector2::zeros(), Matrix2::identity()).unwrap();
        let want = 2.0 / std::f64::consts::PI;
        assert!((est.value - want).abs() < 1e-12, "got {}", est.value);
    }

    #[test]
    fn perfectly_correlated_pair_is_second_moment() {
        let est = abs_product_moment(Vector2::zeros(), Matrix2::new(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert!((est.value - 1.0).abs() < 1e-12, "got {}", est.value);
        assert!(est.abs_error < 1e-10);
    }

    #[test]
    fn arcsine_identity_spot_checks() {
        // E|W1 W2| = (2/pi) (sqrt(1-rho^2) + rho asin rho) for standard
        // margins; exercised densely in the acceptance suite.
        for rho in [-0.9, -0.4, 0.0, 0.3, 0.75, 0.99] {
            let est =
                abs_product_moment(Vector2::zeros(), Matrix2::new(1.0, rho, rho, 1.0)).unwrap();
            let want =
                2.0 / std::f64::consts::PI * ((1.0 - rho * rho).sqrt() + rho * rho.asin());
            assert!(
                (est.value - want).abs() < 1e-8,
                "rho={rho}: got {} want {want}",
                est.value
            );
        }
    }

    #[test]
    fn general_moments_reference_value() {
        // Frozen from adaptive quadrature of the same conditional reduction;
        // a 10^7-sample MC run gave 1.3530094 with 3 SE = 1.4e-3, consistent.
        let est = abs_product_moment(
            Vector2::new(1.0, -0.5),
            Matrix2::new(1.0, 0.3, 0.3, 2.0),
        )
        .unwrap();
        assert!(
            (est.value - 1.352_486_712_483).abs() < 1e-8,
            "got {} err {}",
            est.value,
            est.abs_error
        );
        assert!((est.value - 1.353_009_4).abs() < 1.42e-3);
    }

    #[test]
    fn degenerate_and_sign_definite_branches() {
        let est = abs_product_moment(
            Vector2::new(2.0, 0.5),
            Matrix2::new(0.0, 0.0, 0.0, 1.0),
        )
        .unwrap();
        let want = 2.0 * folded_mean(0.5, 1.0);
        assert!((est.value - want).abs() < 1e-12);

        let far = abs_product_moment(
            Vector2::new(20.0, -30.0),
            Matrix2::new(1.0, 0.5, 0.5, 1.0),
        )
        .unwrap();
        assert!((far.value - 599.5).abs() < 1e-9, "got {}", far.value);
    }

    #[test]
    fn rejects_non_psd() {
        assert!(abs_product_moment(Vector2::zeros(), Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
        assert!(
            abs_product_moment(Vector2::zeros(), Matrix2::new(1.0, 0.5, -0.5, 1.0)).is_err()
        );
        assert!(abs_product_moment(Vector2::new(f64::NAN, 0.0), Matrix2::identity()).is_err());
    }
}
