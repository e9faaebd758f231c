//! Stationary correlation models and field/derivative covariances.
//!
//! A model is the correlation function `r(h)` of a centered, unit-variance
//! stationary field on R^2 together with its partial derivatives up to total
//! order 2. Everything downstream (regression coefficients, crossing
//! intensities, spectral moments) is assembled from these six evaluators, so
//! models constructed here are validated once and then shared immutably.
//!
//! Built-ins: the unit Gaussian kernel `r(x) = exp(-|x|^2/2)` (all partials in
//! closed form) and its length-scaled variant `exp(-|x|^2/(2 l^2))`. Any other
//! twice-differentiable correlation can be supplied as a plain function; its
//! partials are then taken by central finite differences.

use crate::error::{Error, Result};
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

/// Central-difference step for the fallback partials and the construction check.
const FD_STEP: f64 = 1e-4;
/// Tolerance of the construction-time analytic-vs-finite-difference check.
const FD_RTOL: f64 = 1e-6;

type CorrFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

enum Kind {
    Gaussian,
    ScaledGaussian { ell: f64 },
    Custom { name: String, f: Box<CorrFn> },
}

/// A validated stationary correlation model. Cheap to clone.
#[derive(Clone)]
pub struct CorrelationModel {
    kind: Arc<Kind>,
}

impl fmt::Debug for CorrelationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CorrelationModel({})", self.descriptor())
    }
}

impl CorrelationModel {
    /// The unit Gaussian kernel `r(x) = exp(-|x|^2/2)`.
    pub fn gaussian() -> Self {
        // Closed-form partials make the construction check trivially pass,
        // but run it anyway: it guards the closed forms against edits.
        Self::validated(Kind::Gaussian).expect("gaussian kernel is self-consistent")
    }

    /// Gaussian kernel with length scale `ell`: `r(x) = exp(-|x|^2/(2 ell^2))`.
    pub fn scaled_gaussian(ell: f64) -> Result<Self> {
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(Error::invalid(format!(
                "length scale must be positive and finite, got {ell}"
            )));
        }
        Self::validated(Kind::ScaledGaussian { ell })
    }

    /// Any twice-differentiable correlation given as `r(h1, h2)`; partial
    /// derivatives are evaluated by central finite differences.
    pub fn from_fn(
        name: impl Into<String>,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::validated(Kind::Custom {
            name: name.into(),
            f: Box::new(f),
        })
    }

    fn validated(kind: Kind) -> Result<Self> {
        let model = CorrelationModel {
            kind: Arc::new(kind),
        };
        model.validate()?;
        Ok(model)
    }

    /// Model family and parameters, as used in configs and output records.
    pub fn descriptor(&self) -> String {
        match &*self.kind {
            Kind::Gaussian => "gaussian".to_string(),
            Kind::ScaledGaussian { ell } => format!("scaled-gaussian(ell={ell})"),
            Kind::Custom { name, .. } => format!("custom({name})"),
        }
    }

    /// Correlation at lag `h`.
    pub fn r(&self, h: Vector2<f64>) -> f64 {
        match &*self.kind {
            Kind::Gaussian => (-h.norm_squared() / 2.0).exp(),
            Kind::ScaledGaussian { ell } => (-h.norm_squared() / (2.0 * ell * ell)).exp(),
            Kind::Custom { f, .. } => f(h.x, h.y),
        }
    }

    /// First partial in the first coordinate.
    pub fn d10(&self, h: Vector2<f64>) -> f64 {
        match &*self.kind {
            Kind::Gaussian => -h.x * self.r(h),
            Kind::ScaledGaussian { ell } => -h.x / (ell * ell) * self.r(h),
            Kind::Custom { f, .. } => {
                (f(h.x + FD_STEP, h.y) - f(h.x - FD_STEP, h.y)) / (2.0 * FD_STEP)
            }
        }
    }

    /// First partial in the second coordinate.
    pub fn d01(&self, h: Vector2<f64>) -> f64 {
        match &*self.kind {
            Kind::Gaussian => -h.y * self.r(h),
            Kind::ScaledGaussian { ell } => -h.y / (ell * ell) * self.r(h),
            Kind::Custom { f, .. } => {
                (f(h.x, h.y + FD_STEP) - f(h.x, h.y - FD_STEP)) / (2.0 * FD_STEP)
            }
        }
    }

    /// Mixed second partial.
    pub fn d11(&self, h: Vector2<f64>) -> f64 {
        match &*self.kind {
            Kind::Gaussian => h.x * h.y * self.r(h),
            Kind::ScaledGaussian { ell } => {
                let e2 = ell * ell;
                h.x * h.y / (e2 * e2) * self.r(h)
            }
            Kind::Custom { f, .. } => {
                (f(h.x + FD_STEP, h.y + FD_STEP) - f(h.x + FD_STEP, h.y - FD_STEP)
                    - f(h.x - FD_STEP, h.y + FD_STEP)
                    + f(h.x - FD_STEP, h.y - FD_STEP))
                    / (4.0 * FD_STEP * FD_STEP)
            }
        }
    }

    /// Second partial in the first coordinate.
    pub fn d20(&self, h: Vector2<f64>) -> f64 {
        match &*self.kind {
            Kind::Gaussian => (h.x * h.x - 1.0) * self.r(h),
            Kind::ScaledGaussian { ell } => {
                let e2 = ell * ell;
                (h.x * h.x / (e2 * e2) - 1.0 / e2) * self.r(h)
            }
            Kind::Custom { f, .. } => {
                (f(h.x + FD_STEP, h.y) - 2.0 * f(h.x, h.y) + f(h.x - FD_STEP, h.y))
                    / (FD_STEP * FD_STEP)
            }
        }
    }

    /// Second partial in the second coordinate.
    pub fn d02(&self, h: Vector2<f64>) -> f64 {
        match &*self.kind {
            Kind::Gaussian => (h.y * h.y - 1.0) * self.r(h),
            Kind::ScaledGaussian { ell } => {
                let e2 = ell * ell;
                (h.y * h.y / (e2 * e2) - 1.0 / e2) * self.r(h)
            }
            Kind::Custom { f, .. } => {
                (f(h.x, h.y + FD_STEP) - 2.0 * f(h.x, h.y) + f(h.x, h.y - FD_STEP))
                    / (FD_STEP * FD_STEP)
            }
        }
    }

    /// Covariance E[∂_{jk}X_{s+h} · ∂_{lm}X_s] = (−1)^{l+m} ∂_{j+l,k+m} r(h).
    ///
    /// Only the field itself and first-order derivatives appear downstream, so
    /// each side must have total order ≤ 1.
    pub fn deriv_cov(
        &self,
        lag: Vector2<f64>,
        left_order: (u8, u8),
        right_order: (u8, u8),
    ) -> Result<f64> {
        let (j, k) = left_order;
        let (l, m) = right_order;
        if j + k > 1 || l + m > 1 {
            return Err(Error::invalid(format!(
                "unsupported derivative order: left ({j},{k}), right ({l},{m}); \
                 each side must have total order <= 1"
            )));
        }
        let sign = if (l + m) % 2 == 1 { -1.0 } else { 1.0 };
        let val = match (j + l, k + m) {
            (0, 0) => self.r(lag),
            (1, 0) => self.d10(lag),
            (0, 1) => self.d01(lag),
            (1, 1) => self.d11(lag),
            (2, 0) => self.d20(lag),
            (0, 2) => self.d02(lag),
            _ => unreachable!("total order bounded by 2"),
        };
        Ok(sign * val)
    }

    /// Var(∂_v X) = −∂₂₀r(0)v₁² − 2∂₁₁r(0)v₁v₂ − ∂₀₂r(0)v₂² for unit `v`.
    pub fn directional_deriv_variance(&self, v: Vector2<f64>) -> f64 {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "direction must be unit");
        let zero = Vector2::zeros();
        -self.d20(zero) * v.x * v.x - 2.0 * self.d11(zero) * v.x * v.y - self.d02(zero) * v.y * v.y
    }

    /// Spectral-moment matrix Λ = −Hess r(0); covariance of the gradient field.
    pub fn spectral_moment_matrix(&self) -> Matrix2<f64> {
        let zero = Vector2::zeros();
        Matrix2::new(
            -self.d20(zero),
            -self.d11(zero),
            -self.d11(zero),
            -self.d02(zero),
        )
    }

    /// True when the gradient covariance is a scalar multiple of the identity,
    /// which is what the closed-form boundary-length intensity requires.
    pub fn is_gradient_isotropic(&self, tol: f64) -> bool {
        let lambda = self.spectral_moment_matrix();
        (lambda[(0, 0)] - lambda[(1, 1)]).abs() <= tol * lambda.trace().abs().max(1.0)
            && lambda[(0, 1)].abs() <= tol * lambda.trace().abs().max(1.0)
    }

    /// Construction-time consistency check: unit value and flat gradient at the
    /// origin, evenness and boundedness at sampled lags, PSD spectral moments,
    /// and (for closed-form models) agreement of analytic partials with central
    /// finite differences.
    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ModelValidation(msg));
        let zero = Vector2::zeros();

        if (self.r(zero) - 1.0).abs() > 1e-10 {
            return fail(format!("r(0) = {} but must be 1", self.r(zero)));
        }
        // Custom models get their gradient from finite differences, so this
        // also catches non-differentiable-at-zero inputs like exp(-|h|).
        if self.d10(zero).abs() > 1e-5 || self.d01(zero).abs() > 1e-5 {
            return fail(format!(
                "gradient of r at 0 is ({}, {}) but must vanish",
                self.d10(zero),
                self.d01(zero)
            ));
        }
        let lambda = self.spectral_moment_matrix();
        let (tr, det) = (lambda.trace(), lambda.determinant());
        if tr < -1e-8 || det < -1e-8 * tr.abs().max(1.0) {
            return fail(format!("spectral-moment matrix not PSD: {lambda}"));
        }
        // Second differences at two step sizes must agree, or r has no second
        // derivative at 0 (e.g. exp(-|h|), whose second difference scales like
        // 1/step). Central first differences cannot see such a kink because
        // evenness cancels it exactly.
        for dir in [Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)] {
            let sd = |s: f64| (self.r(s * dir) - 2.0 + self.r(-s * dir)) / (s * s);
            let (fine, coarse) = (sd(FD_STEP), sd(2.0 * FD_STEP));
            if (fine - coarse).abs() > 1e-3 * fine.abs().max(1.0) {
                return fail(format!(
                    "second difference of r at 0 does not converge along {dir:?} \
                     ({fine} vs {coarse}); r must be twice differentiable"
                ));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..16 {
            let h = Vector2::new(rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5));
            let (rp, rm) = (self.r(h), self.r(-h));
            if (rp - rm).abs() > 1e-9 {
                return fail(format!("r not even at lag {h:?}: {rp} vs {rm}"));
            }
            if rp.abs() > 1.0 + 1e-9 {
                return fail(format!("|r| exceeds 1 at lag {h:?}: {rp}"));
            }
            if let Kind::Custom { .. } = &*self.kind {
                continue; // partials are themselves finite differences
            }
            for (analytic, fd) in self.partials_vs_finite_differences(h) {
                if (analytic - fd).abs() > FD_RTOL * analytic.abs().max(1.0) {
                    return fail(format!(
                        "analytic partial {analytic} differs from finite difference {fd} at lag {h:?}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Pairs of (analytic, central finite difference) for all five partials.
    pub(crate) fn partials_vs_finite_differences(&self, h: Vector2<f64>) -> [(f64, f64); 5] {
        let s = FD_STEP;
        let f = |x: f64, y: f64| self.r(Vector2::new(x, y));
        let (x, y) = (h.x, h.y);
        [
            (self.d10(h), (f(x + s, y) - f(x - s, y)) / (2.0 * s)),
            (self.d01(h), (f(x, y + s) - f(x, y - s)) / (2.0 * s)),
            (
                self.d11(h),
                (f(x + s, y + s) - f(x + s, y - s) - f(x - s, y + s) + f(x - s, y - s))
                    / (4.0 * s * s),
            ),
            (self.d20(h), (f(x + s, y) - 2.0 * f(x, y) + f(x - s, y)) / (s * s)),
            (self.d02(h), (f(x, y + s) - 2.0 * f(x, y) + f(x, y - s)) / (s * s)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn anisotropic() -> CorrelationModel {
        CorrelationModel::from_fn("anisotropic-4-1", |x, y| {
            (-(4.0 * x * x + y * y) / 2.0).exp()
        })
        .unwrap()
    }

    #[test]
    fn gaussian_closed_forms_at_reference_lags() {
        let m = CorrelationModel::gaussian();
        let zero = Vector2::zeros();
        assert_eq!(m.deriv_cov(zero, (0, 0), (0, 0)).unwrap(), 1.0);

        // E[∂₁₀X_{s+h} X_s] = -∂₁₀r(h)... with left derivative the sign is
        // (+1): deriv_cov(lag, (1,0), (0,0)) = ∂₁₀r(lag) = -lag_x r(lag).
        let h = Vector2::new(1.0, 0.0);
        let expected = -1.0 * (-0.5f64).exp();
        assert!((m.deriv_cov(h, (1, 0), (0, 0)).unwrap() - expected).abs() < 1e-12);

        // Same-point derivative variance: -∂₂₀r(0) = 1.
        assert!((m.deriv_cov(zero, (1, 0), (1, 0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deriv_cov_rejects_higher_orders() {
        let m = CorrelationModel::gaussian();
        assert!(m.deriv_cov(Vector2::zeros(), (1, 1), (0, 0)).is_err());
        assert!(m.deriv_cov(Vector2::zeros(), (1, 0), (0, 2)).is_err());
    }

    #[test]
    fn directional_variance_isotropic_and_anisotropic() {
        let g = CorrelationModel::gaussian();
        for phi in [0.0, 0.3, 1.1, std::f64::consts::FRAC_PI_2] {
            let v = Vector2::new(phi.cos(), phi.sin());
            assert!((g.directional_deriv_variance(v) - 1.0).abs() < 1e-12);
        }
        // r(h)=exp(-(4h1^2+h2^2)/2) has Var(∂X/∂x1) = 4.
        let a = anisotropic();
        let got = a.directional_deriv_variance(Vector2::new(1.0, 0.0));
        assert!((got - 4.0).abs() < 1e-4, "got {got}");
        let got_y = a.directional_deriv_variance(Vector2::new(0.0, 1.0));
        assert!((got_y - 1.0).abs() < 1e-4, "got {got_y}");
    }

    #[test]
    fn scaled_gaussian_matches_rescaled_unit_kernel() {
        let ell = 0.7;
        let m = CorrelationModel::scaled_gaussian(ell).unwrap();
        let g = CorrelationModel::gaussian();
        let h = Vector2::new(0.4, -0.9);
        assert!((m.r(h) - g.r(h / ell)).abs() < 1e-15);
        // d/dh scales by 1/ell per order.
        assert!((m.d20(h) - g.d20(h / ell) / (ell * ell)).abs() < 1e-12);
    }

    #[test]
    fn construction_rejects_bad_models() {
        // Local maximum of the correlation away from zero lag: the hump
        // (1+q)exp(-q/2) rises above 1, and its spectral moments go negative.
        assert!(CorrelationModel::from_fn("hump", |x, y| {
            let q = x * x + y * y;
            (1.0 + q) * (-q / 2.0).exp()
        })
        .is_err());
        // No second derivative at the origin.
        assert!(
            CorrelationModel::from_fn("exponential", |x, y| (-(x * x + y * y).sqrt()).exp())
                .is_err()
        );
        assert!(CorrelationModel::scaled_gaussian(-1.0).is_err());
    }

    #[test]
    fn spectral_moment_matrix_values() {
        let lam = CorrelationModel::gaussian().spectral_moment_matrix();
        assert!((lam - Matrix2::identity()).norm() < 1e-12);
        let lam_a = anisotropic().spectral_moment_matrix();
        assert!((lam_a[(0, 0)] - 4.0).abs() < 1e-4);
        assert!((lam_a[(1, 1)] - 1.0).abs() < 1e-4);
        assert!(lam_a[(0, 1)].abs() < 1e-4);
    }

    #[test]
    fn analytic_partials_match_finite_differences_on_100_lags() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for model in [
            CorrelationModel::gaussian(),
            CorrelationModel::scaled_gaussian(1.6).unwrap(),
        ] {
            for _ in 0..100 {
                let h = Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                for (analytic, fd) in model.partials_vs_finite_differences(h) {
                    assert!(
                        (analytic - fd).abs() <= 1e-6 * analytic.abs().max(1.0),
                        "{}: partial {analytic} vs fd {fd} at {h:?}",
                        model.descriptor()
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn first_order_cov_flips_sign_with_lag(hx in -2.0f64..2.0, hy in -2.0f64..2.0) {
            // E[∂_{jk}X_{s+h}X_s] = (−1)^{j+k} E[∂_{jk}X_{s−h}X_s] for j+k=1.
            let m = CorrelationModel::gaussian();
            let h = Vector2::new(hx, hy);
            for order in [(1u8, 0u8), (0, 1)] {
                let plus = m.deriv_cov(h, order, (0, 0)).unwrap();
                let minus = m.deriv_cov(-h, order, (0, 0)).unwrap();
                prop_assert!((plus + minus).abs() < 1e-12);
            }
        }

        #[test]
        fn directional_variance_nonnegative(phi in 0.0f64..std::f64::consts::PI) {
            let v = Vector2::new(phi.cos(), phi.sin());
            for model in [CorrelationModel::gaussian(), CorrelationModel::scaled_gaussian(0.5).unwrap()] {
                prop_assert!(model.directional_deriv_variance(v) >= 0.0);
            }
        }
    }
}
