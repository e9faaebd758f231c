//! Gauss quadrature rules assembled from Jacobi matrices.
//!
//! Legendre rules come from the classical three-term recurrence. The
//! half-range Hermite rule (weight exp(-z^2) on (0, inf)) has no classical
//! recurrence; its coefficients are built by the discretized Stieltjes
//! procedure over composite Legendre panels. Splitting the Hermite weight at
//! zero makes expectations of |y| times a smooth factor converge
//! geometrically in the order, where the full-range rule stalls near O(1/n)
//! because of the kink at the origin; every conditional-expectation integrand
//! in this crate has exactly that |y| factor.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and matching weights of a quadrature rule.
pub type Rule = (Vec<f64>, Vec<f64>);

const MAX_ORDER: usize = 128;

/// Panel edges for the discretized Stieltjes measure; beyond 9 the weight
/// exp(-z^2) is below 1e-35 and contributes nothing at f64 precision.
const STIELTJES_PANELS: [f64; 6] = [0.0, 1.0, 2.0, 3.5, 5.5, 9.0];
const STIELTJES_PANEL_ORDER: usize = 60;

fn rule_cache() -> &'static Mutex<HashMap<(u8, usize), Arc<Rule>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u8, usize), Arc<Rule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached_rule(kind: u8, order: usize, build: impl FnOnce() -> Rule) -> Arc<Rule> {
    if let Some(rule) = rule_cache()
        .lock()
        .expect("quadrature cache poisoned")
        .get(&(kind, order))
    {
        return rule.clone();
    }
    // Build outside the lock: the half-range construction itself requests a
    // Legendre rule, and concurrent duplicate builds are deterministic anyway.
    let built = Arc::new(build());
    rule_cache()
        .lock()
        .expect("quadrature cache poisoned")
        .entry((kind, order))
        .or_insert(built)
        .clone()
}

/// Symmetric tridiagonal eigendecomposition of a Jacobi matrix: eigenvalues
/// are the nodes, scaled squared first eigenvector components the weights.
fn golub_welsch(diag: &[f64], offdiag: &[f64], total_mass: f64) -> Rule {
    let n = diag.len();
    let mut jacobi = DMatrix::zeros(n, n);
    for i in 0..n {
        jacobi[(i, i)] = diag[i];
    }
    for i in 0..n - 1 {
        jacobi[(i, i + 1)] = offdiag[i];
        jacobi[(i + 1, i)] = offdiag[i];
    }
    let eigen = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let first = eigen.eigenvectors[(0, i)];
            (eigen.eigenvalues[i], total_mass * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn build_legendre(order: usize) -> Rule {
    let diag = vec![0.0; order];
    let offdiag: Vec<f64> = (1..order)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &offdiag, 2.0)
}

/// Gauss-Legendre rule of the given order on [-1, 1].
pub fn gauss_legendre_rule(order: usize) -> Result<Arc<Rule>> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::invalid(format!(
            "Legendre order must lie in [1, {MAX_ORDER}], got {order}"
        )));
    }
    Ok(cached_rule(0, order, || build_legendre(order)))
}

/// Recurrence coefficients for the weight exp(-z^2) on (0, inf) via the
/// Stieltjes procedure on a fixed high-accuracy discretization.
fn build_half_range_hermite(order: usize) -> Rule {
    let gl = gauss_legendre_rule(STIELTJES_PANEL_ORDER).expect("fixed panel order is valid");
    let (ref gx, ref gw) = *gl;
    let mut z = Vec::new();
    let mut mu = Vec::new();
    for panel in STIELTJES_PANELS.windows(2) {
        let half = 0.5 * (panel[1] - panel[0]);
        let mid = 0.5 * (panel[1] + panel[0]);
        for (x, w) in gx.iter().zip(gw) {
            let zi = mid + half * x;
            z.push(zi);
            mu.push(half * w * (-zi * zi).exp());
        }
    }
    let mass: f64 = mu.iter().sum();

    // Orthonormal-polynomial Stieltjes recurrence on the discrete measure:
    // sqrt(b_{k+1}) q_{k+1} = (z - a_k) q_k - sqrt(b_k) q_{k-1}.
    let npts = z.len();
    let mut q_prev = vec![0.0; npts];
    let mut q_cur = vec![1.0 / mass.sqrt(); npts];
    let mut diag = Vec::with_capacity(order);
    let mut offdiag = Vec::with_capacity(order - 1);
    let mut sqrt_b_prev = 0.0;
    for _ in 0..order {
        let a: f64 = (0..npts).map(|i| mu[i] * z[i] * q_cur[i] * q_cur[i]).sum();
        diag.push(a);
        let mut t: Vec<f64> = (0..npts)
            .map(|i| (z[i] - a) * q_cur[i] - sqrt_b_prev * q_prev[i])
            .collect();
        let norm: f64 = (0..npts)
            .map(|i| mu[i] * t[i] * t[i])
            .sum::<f64>()
            .sqrt();
        if diag.len() < order {
            offdiag.push(norm);
        }
        for ti in &mut t {
            *ti /= norm;
        }
        q_prev = std::mem::replace(&mut q_cur, t);
        sqrt_b_prev = norm;
    }
    offdiag.truncate(order - 1);
    golub_welsch(&diag, &offdiag, mass)
}

/// Gauss rule for the weight exp(-z^2) on the half line (0, inf); all nodes
/// positive. Integrates z^k exp(-z^2) exactly for k < 2*order.
pub fn half_range_hermite_rule(order: usize) -> Result<Arc<Rule>> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::invalid(format!(
            "half-range Hermite order must lie in [1, {MAX_ORDER}], got {order}"
        )));
    }
    Ok(cached_rule(1, order, || build_half_range_hermite(order)))
}

/// E[f(Y)] for Y ~ N(0, variance), evaluated by mirroring the half-range
/// Hermite rule across zero. Exact for polynomials of degree < 2*order, and
/// for such polynomials multiplied by |y|.
pub fn gauss_hermite_expectation(
    f: impl Fn(f64) -> f64,
    variance: f64,
    order: usize,
) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!(
            "variance must be positive and finite, got {variance}"
        )));
    }
    let rule = half_range_hermite_rule(order)?;
    let scale = (2.0 * variance).sqrt();
    let (ref nodes, ref weights) = *rule;
    let sum: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(&z, &w)| w * (f(scale * z) + f(-scale * z)))
        .sum();
    Ok(sum / std::f64::consts::PI.sqrt())
}

/// Composite Gauss-Legendre nodes and weights over consecutive panels given
/// by `breaks`; empty panels (zero length) are skipped.
pub fn panel_nodes(breaks: &[f64], order: usize) -> Result<Vec<(f64, f64)>> {
    if breaks.len() < 2 {
        return Err(Error::invalid("need at least one panel".to_string()));
    }
    let rule = gauss_legendre_rule(order)?;
    let (ref gx, ref gw) = *rule;
    let mut out = Vec::new();
    for panel in breaks.windows(2) {
        let half = 0.5 * (panel[1] - panel[0]);
        if half <= 0.0 {
            continue;
        }
        let mid = 0.5 * (panel[1] + panel[0]);
        for (x, w) in gx.iter().zip(gw) {
            out.push((mid + half * x, half * w));
        }
    }
    Ok(out)
}

/// Composite Gauss-Legendre integral of `f` over the panels of `breaks`.
pub fn integrate_panels(f: impl Fn(f64) -> f64, breaks: &[f64], order: usize) -> Result<f64> {
    Ok(panel_nodes(breaks, order)?
        .into_iter()
        .map(|(x, w)| w * f(x))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::norm_cdf;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let (nodes, weights) = (*gauss_legendre_rule(5).unwrap()).clone();
        // Degree 9 is exact for a 5-point rule: integral of x^8 on [-1,1].
        let got: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * x.powi(8))
            .sum();
        assert!((got - 2.0 / 9.0).abs() < 1e-14);
        let total: f64 = weights.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn panels_integrate_cosine() {
        let got = integrate_panels(f64::cos, &[0.0, 0.7, 1.0, 2.0], 16).unwrap();
        assert!((got - 2.0f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn half_range_rule_reproduces_gaussian_moments() {
        let (nodes, weights) = (*half_range_hermite_rule(12).unwrap()).clone();
        assert!(nodes.iter().all(|&z| z > 0.0));
        // Integrals of z^k exp(-z^2) on (0, inf): sqrt(pi)/2, 1/2, sqrt(pi)/4.
        let moment = |k: i32| -> f64 {
            nodes
                .iter()
                .zip(&weights)
                .map(|(z, w)| w * z.powi(k))
                .sum()
        };
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((moment(0) - sqrt_pi / 2.0).abs() < 1e-13);
        assert!((moment(1) - 0.5).abs() < 1e-14);
        assert!((moment(2) - sqrt_pi / 4.0).abs() < 1e-13);
    }

    #[test]
    fn expectation_of_abs_is_folded_normal_mean() {
        let got = gauss_hermite_expectation(f64::abs, 1.0, 8).unwrap();
        let want = (2.0 / std::f64::consts::PI).sqrt();
        assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
    }

    #[test]
    fn expectation_exact_for_quadratics() {
        for sigma2 in [0.3, 1.0, 2.7] {
            let got = gauss_hermite_expectation(|y| y * y, sigma2, 4).unwrap();
            assert!((got - sigma2).abs() < 1e-13 * sigma2.max(1.0));
        }
    }

    #[test]
    fn expectation_of_kinked_cdf_product() {
        // E[|y| Phi(1 - y)] for y ~ N(0,1), frozen from adaptive quadrature.
        let want = 0.556_944_426_960_664_5;
        let got = gauss_hermite_expectation(|y| y.abs() * norm_cdf(1.0 - y), 1.0, 24).unwrap();
        assert!((got - want).abs() < 1e-9, "got {got}");
        // The error should already be tiny at modest order and keep shrinking.
        let coarse = gauss_hermite_expectation(|y| y.abs() * norm_cdf(1.0 - y), 1.0, 12).unwrap();
        assert!((coarse - want).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gauss_hermite_expectation(f64::abs, 0.0, 8).is_err());
        assert!(gauss_hermite_expectation(f64::abs, -1.0, 8).is_err());
        assert!(gauss_hermite_expectation(f64::abs, 1.0, 0).is_err());
        assert!(panel_nodes(&[0.0], 8).is_err());
    }
}
