//! Sweeping-line evaluation of the hitting probability of a two-segment
//! bundle by the excursion set {X >= u}.
//!
//! The event {sup_K X >= u} is decomposed over the first position where the
//! restricted path touches the level u while K is swept from the origin
//! outward. Each sweep position theta contributes the level-touch density
//! there times the probability that every already-swept position is still
//! below u. That conditional probability is discretized on an m-point grid
//! over the swept interval, turned into a multivariate normal rectangle
//! probability by regressing the grid values on the touch value and its
//! derivative, and integrated over the derivative with a quadrature that is
//! exact for |y| times polynomials.

use crate::error::{Error, Result};
use crate::gauss::{
    gauss_hermite_expectation, mvn_cdf_abs_moment, mvn_cdf_seeded, norm_cdf, norm_pdf,
    panel_nodes, CovarianceMatrix, EstimateWithError, DEFAULT_QMC_SEED,
};
use crate::geometry::TwoSegmentProblem;
use rayon::prelude::*;
use std::cell::{Cell, RefCell};
use std::f64::consts::PI;

/// Residual variances below this are pinned to exactly zero. The residual
/// covariance is assembled as differences of order-one correlations, so below
/// this level the entries are dominated by cancellation noise; pinning turns
/// those coordinates into deterministic gates instead of feeding the noise
/// into the factorization.
pub(crate) const RESIDUAL_VAR_FLOOR: f64 = 1e-9;

/// Accuracy knobs shared by the capacity engines.
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Relative tolerance for each conditional-factor lattice integral.
    pub cdf_rel_tol: f64,
    /// Absolute error floor for the same integrals, so factors that are
    /// genuinely tiny stop instead of chasing an unreachable relative target.
    pub cdf_abs_tol: f64,
    /// Stream for the randomized lattices.
    pub qmc_seed: u64,
    /// Re-evaluate on the nested 2m-1 grid and fold the difference into the
    /// reported error. Doubles the work but bounds the discretization bias.
    pub refine_grid: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            cdf_rel_tol: 1e-3,
            cdf_abs_tol: 1e-7,
            qmc_seed: DEFAULT_QMC_SEED,
            refine_grid: true,
        }
    }
}

/// Variance of the path derivative at sweep position `theta`, taken along
/// the outward direction of the branch containing it. At the corner the
/// first branch's one-sided value is returned.
pub fn y_deriv_variance(problem: &TwoSegmentProblem, theta: f64) -> f64 {
    debug_assert!(
        (-1e-9..=problem.total_length() + 1e-9).contains(&theta),
        "sweep position {theta} outside the bundle"
    );
    problem
        .model
        .directional_deriv_variance(problem.branch_direction(theta))
}

/// Correlation of the path values at arc positions `s` and `t`.
fn path_correlation(problem: &TwoSegmentProblem, s: f64, t: f64) -> Result<f64> {
    Ok(problem.model.r(problem.rho_map(s)? - problem.rho_map(t)?))
}

/// Regression coefficients of the path value at `alpha` on the value and the
/// outward derivative at `theta`: a = E[Y_alpha Y_theta], b = E[Y_alpha
/// Y'_theta]. Both are assembled from the two-dimensional lag geometry, so
/// same-branch and cross-branch pairs go through one code path.
pub fn regression_coeffs(problem: &TwoSegmentProblem, alpha: f64, theta: f64) -> Result<(f64, f64)> {
    if alpha == theta {
        return Ok((1.0, 0.0));
    }
    let lag = problem.rho_map(theta)? - problem.rho_map(alpha)?;
    let a = problem.model.r(lag);
    let w = problem.branch_direction(theta);
    // E[dX(rho(theta)) X(rho(alpha))] = grad r at lag rho(theta) - rho(alpha).
    let gx = problem.model.deriv_cov(lag, (1, 0), (0, 0))?;
    let gy = problem.model.deriv_cov(lag, (0, 1), (0, 0))?;
    Ok((a, w.x * gx + w.y * gy))
}

/// The grid discretization of one conditional-probability factor: the swept
/// interval, the regression of each grid value on (Y_theta, Y'_theta), and
/// the covariance of the regression residuals.
#[derive(Clone, Debug)]
pub struct RegressionState {
    theta: f64,
    grid: Vec<f64>,
    a: Vec<f64>,
    /// Coefficient against the standardized derivative, b / sqrt(y_var).
    b_std: Vec<f64>,
    y_var: f64,
    sigma: CovarianceMatrix,
}

impl RegressionState {
    /// Discretizes `interval` on `m` equidistant points (endpoints included)
    /// and assembles the residual covariance for conditioning at `theta`.
    pub fn build(
        problem: &TwoSegmentProblem,
        theta: f64,
        interval: (f64, f64),
        m: usize,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(format!("grid size must be at least 2, got {m}")));
        }
        let (lo, hi) = interval;
        if !(lo <= hi) || lo < -1e-12 || hi > problem.total_length() + 1e-12 {
            return Err(Error::invalid(format!(
                "swept interval [{lo}, {hi}] is not inside the bundle"
            )));
        }
        let y_var = y_deriv_variance(problem, theta);
        if !(y_var > 0.0) {
            return Err(Error::ModelValidation(format!(
                "path derivative variance must be positive, got {y_var}"
            )));
        }
        let sd = y_var.sqrt();
        let grid: Vec<f64> = (0..m)
            .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
            .collect();
        let mut a = Vec::with_capacity(m);
        let mut b_std = Vec::with_capacity(m);
        for &eta in &grid {
            let (ai, bi) = regression_coeffs(problem, eta, theta)?;
            a.push(ai);
            b_std.push(bi / sd);
        }
        // Cross-grid correlations feed the residual covariance below; the
        // closure handed to the matrix builder cannot fail, so resolve them
        // first.
        let mut cross = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let rij = path_correlation(problem, grid[i], grid[j])?;
                cross[i * m + j] = rij;
                cross[j * m + i] = rij;
            }
        }
        let mut var = Vec::with_capacity(m);
        for i in 0..m {
            let v = 1.0 - a[i] * a[i] - b_std[i] * b_std[i];
            if v < -1e-7 {
                return Err(Error::ModelValidation(format!(
                    "residual variance {v} at grid point {} is negative beyond rounding",
                    grid[i]
                )));
            }
            var.push(v);
        }
        // Coordinates at or below the cancellation floor are deterministic at
        // working precision; zeroing their rows keeps the matrix clean for
        // the factorization and the rectangle probability treats them as
        // exact indicators.
        let pinned: Vec<bool> = var.iter().map(|&v| v < RESIDUAL_VAR_FLOOR).collect();
        let sigma = CovarianceMatrix::from_fn(m, |i, j| {
            if pinned[i] || pinned[j] {
                0.0
            } else if i == j {
                var[i]
            } else {
                cross[i * m + j] - a[i] * a[j] - b_std[i] * b_std[j]
            }
        })?;
        Ok(RegressionState {
            theta,
            grid,
            a,
            b_std,
            y_var,
            sigma,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn a_coeffs(&self) -> &[f64] {
        &self.a
    }

    /// Regression coefficients against the standardized derivative.
    pub fn b_coeffs_standardized(&self) -> &[f64] {
        &self.b_std
    }

    pub fn y_var(&self) -> f64 {
        self.y_var
    }

    /// Covariance of the regression residuals at grid indices `i`, `j`:
    /// a(eta_i, eta_j) - a_i a_j - b_i b_j in the standardized convention,
    /// with variance 1 - a_i^2 - b_i^2 on the diagonal.
    pub fn xi_covariance(&self, i: usize, j: usize) -> f64 {
        self.sigma.entry(i, j)
    }

    pub fn residual_covariance(&self) -> &CovarianceMatrix {
        &self.sigma
    }
}

/// Validates a conditional-factor request and returns the derivative
/// variance at the touch point, or the folded-normal shortcut when the swept
/// interval is effectively a single point and imposes no constraint.
fn validate_cond_factor(
    problem: &TwoSegmentProblem,
    c: f64,
    interval: (f64, f64),
) -> Result<std::result::Result<f64, EstimateWithError>> {
    let (lo, hi) = interval;
    if !(lo <= hi) {
        return Err(Error::invalid(format!("empty swept interval [{lo}, {hi}]")));
    }
    if !(-1e-12..=problem.total_length() + 1e-12).contains(&c) {
        return Err(Error::invalid(format!("conditioning point {c} outside the bundle")));
    }
    let y_var = y_deriv_variance(problem, c);
    if !(y_var > 0.0) {
        return Err(Error::ModelValidation(format!(
            "path derivative variance must be positive, got {y_var}"
        )));
    }
    // A zero-length interval imposes no constraints besides the touch itself,
    // so the expectation is the folded-normal mean of the derivative.
    if hi - lo <= 1e-12 * problem.total_length().max(1.0) {
        let v = (2.0 * y_var / PI).sqrt();
        return Ok(Err(EstimateWithError::new(v, 1e-14 * v, "folded-normal-exact")));
    }
    Ok(Ok(y_var))
}

/// E[|Y'_c| 1(Y_eta <= u on the grid) | Y_c = u] with the default accuracy
/// settings. The grid has `m` points; `y_quad_order` controls the derivative
/// quadrature.
pub fn cond_integrand(
    problem: &TwoSegmentProblem,
    c: f64,
    interval: (f64, f64),
    m: usize,
    y_quad_order: usize,
) -> Result<EstimateWithError> {
    cond_integrand_with(problem, c, interval, m, y_quad_order, 3e-4, DEFAULT_QMC_SEED)
}

/// As [`cond_integrand`], with the rectangle-probability tolerance and the
/// lattice stream chosen by the caller. This is the layered route: an outer
/// quadrature over the derivative with one rectangle probability per node.
/// The capacity engine itself uses the joint lattice route; keeping both
/// alive lets the tests check one against the other.
pub fn cond_integrand_with(
    problem: &TwoSegmentProblem,
    c: f64,
    interval: (f64, f64),
    m: usize,
    y_quad_order: usize,
    cdf_rel_tol: f64,
    qmc_seed: u64,
) -> Result<EstimateWithError> {
    let state = match validate_cond_factor(problem, c, interval)? {
        Err(shortcut) => return Ok(shortcut),
        Ok(_) => RegressionState::build(problem, c, interval, m)?,
    };
    let (value, cdf_err) = constrained_expectation(&state, problem.u, y_quad_order, cdf_rel_tol, qmc_seed)?;
    // The derivative quadrature converges geometrically on these integrands;
    // the gap to a rule of half the order is a usable truncation estimate.
    let coarse_order = (y_quad_order / 2).max(4);
    let quad_err = if coarse_order < y_quad_order {
        let (coarse, _) =
            constrained_expectation(&state, problem.u, coarse_order, cdf_rel_tol, qmc_seed)?;
        (value - coarse).abs()
    } else {
        0.0
    };
    Ok(EstimateWithError::new(
        value,
        cdf_err + quad_err + 1e-14 * value.abs(),
        "grid-conditional-expectation",
    ))
}

/// The same conditional factor through the joint lattice rule: the
/// derivative integral and the rectangle probability share one lattice, so a
/// sweep node costs one adaptive integral instead of one per quadrature
/// node. This is the route the capacity engine runs on.
fn cond_point_joint(
    problem: &TwoSegmentProblem,
    c: f64,
    interval: (f64, f64),
    m: usize,
    opts: &SolverOptions,
) -> Result<EstimateWithError> {
    let state = match validate_cond_factor(problem, c, interval)? {
        Err(shortcut) => return Ok(shortcut),
        Ok(_) => RegressionState::build(problem, c, interval, m)?,
    };
    let sd = state.y_var.sqrt();
    let u = problem.u;
    // Constraint at standardized derivative z: Y_eta <= u becomes
    // xi_eta <= u (1 - a_eta) - z b_eta.
    let base: Vec<f64> = state.a.iter().map(|&ai| u * (1.0 - ai)).collect();
    let slope: Vec<f64> = state.b_std.iter().map(|&bi| -bi).collect();
    let est = mvn_cdf_abs_moment(
        &base,
        &slope,
        &state.sigma,
        opts.cdf_rel_tol,
        opts.cdf_abs_tol,
        opts.qmc_seed,
    )?;
    Ok(EstimateWithError::new(
        sd * est.value,
        sd * est.abs_error + 1e-14 * sd * est.value.abs(),
        est.method,
    ))
}

/// Integrates |y| times the residual rectangle probability over the
/// derivative law N(0, y_var). Returns the value and the aggregated
/// rectangle-probability error, scaled by E|y|.
fn constrained_expectation(
    state: &RegressionState,
    u: f64,
    y_quad_order: usize,
    cdf_rel_tol: f64,
    qmc_seed: u64,
) -> Result<(f64, f64)> {
    let sd = state.y_var.sqrt();
    let m = state.grid.len();
    let worst_cdf_err = Cell::new(0.0f64);
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let value = gauss_hermite_expectation(
        |y| {
            let z = y / sd;
            let upper: Vec<f64> = (0..m)
                .map(|i| u * (1.0 - state.a[i]) - z * state.b_std[i])
                .collect();
            match mvn_cdf_seeded(&upper, &state.sigma, cdf_rel_tol, qmc_seed) {
                Ok(cdf) => {
                    worst_cdf_err.set(worst_cdf_err.get().max(cdf.abs_error));
                    y.abs() * cdf.value
                }
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        },
        state.y_var,
        y_quad_order,
    )?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let abs_mean = (2.0 * state.y_var / PI).sqrt();
    Ok((value, worst_cdf_err.get() * abs_mean))
}

/// Hitting probability of the bundle with the default accuracy settings.
/// `m` is the constraint grid size, `theta_quad_order` the Gauss-Legendre
/// order per sweep panel.
pub fn capacity_two_segments(
    problem: &TwoSegmentProblem,
    m: usize,
    theta_quad_order: usize,
) -> Result<EstimateWithError> {
    capacity_two_segments_with(problem, m, theta_quad_order, &SolverOptions::default())
}

/// As [`capacity_two_segments`] with explicit accuracy settings.
pub fn capacity_two_segments_with(
    problem: &TwoSegmentProblem,
    m: usize,
    theta_quad_order: usize,
    opts: &SolverOptions,
) -> Result<EstimateWithError> {
    if theta_quad_order == 0 {
        return Err(Error::invalid("sweep quadrature order must be positive".to_string()));
    }
    let u = problem.u;
    // A point bundle is hit exactly when the field exceeds u at the origin.
    if problem.total_length() == 0.0 {
        return Ok(EstimateWithError::new(1.0 - norm_cdf(u), 0.0, "point-limit"));
    }
    let (mut sweep, mut err) = sweep_integral(problem, m, theta_quad_order, opts)?;
    if opts.refine_grid {
        let (fine, fine_err) = sweep_integral(problem, 2 * m - 1, theta_quad_order, opts)?;
        err = fine_err + (fine - sweep).abs();
        sweep = fine;
    }
    // Survival of the whole bundle = P(X_origin < u) minus the first-touch
    // mass swept over K, so the hitting probability gains the point term.
    let density = norm_pdf(u);
    let raw = (1.0 - norm_cdf(u)) + density * sweep;
    err *= density;
    let value = raw.clamp(0.0, 1.0);
    let overshoot = (raw - value).abs();
    let method = if overshoot > err {
        "sweep-line (clamped beyond error bound)"
    } else {
        "sweep-line"
    };
    Ok(EstimateWithError::new(value, err + overshoot, method))
}

/// Upper bound on the hitting probability: the point mass at the origin plus
/// the expected number of up-crossings of level u along each branch.
pub fn rice_upper_bound(problem: &TwoSegmentProblem) -> f64 {
    let u = problem.u;
    let mut crossings = 0.0;
    if problem.l1 > 0.0 {
        crossings += problem.l1 * y_deriv_variance(problem, 0.0).sqrt();
    }
    if problem.l2 > 0.0 {
        crossings += problem.l2 * y_deriv_variance(problem, problem.total_length()).sqrt();
    }
    (1.0 - norm_cdf(u)) + crossings * (-0.5 * u * u).exp() / (2.0 * PI)
}

/// Which of the two assembly routes to use: the routes differ in how the
/// sweep range splits once one segment is exhausted, and must agree when
/// both apply (equal lengths).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SweepRoute {
    /// Tail integral runs along the second segment (l1 <= l2).
    TailOnSecond,
    /// Tail integral runs along the first segment (l1 >= l2).
    TailOnFirst,
}

fn sweep_integral(
    problem: &TwoSegmentProblem,
    m: usize,
    theta_quad_order: usize,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    let route = if problem.l1 <= problem.l2 {
        SweepRoute::TailOnSecond
    } else {
        SweepRoute::TailOnFirst
    };
    sweep_integral_via(problem, route, m, theta_quad_order, opts)
}

/// The sweep integral along one assembly route. Exposed to the tests so the
/// equal-length case can exercise both routes against each other.
fn sweep_integral_via(
    problem: &TwoSegmentProblem,
    route: SweepRoute,
    m: usize,
    theta_quad_order: usize,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    let (l1, l2) = (problem.l1, problem.l2);
    // (position, weight, paired?) for every sweep node. While both segments
    // are alive the sweep line meets the bundle twice and both meeting
    // points contribute a first-touch term over the same swept interval;
    // on the leftover tail of the longer segment only one term remains.
    let mut nodes: Vec<(f64, f64, bool)> = Vec::new();
    match route {
        SweepRoute::TailOnSecond => {
            if l1 > l2 + 1e-12 {
                return Err(Error::invalid(format!(
                    "route expects l1 <= l2, got ({l1}, {l2})"
                )));
            }
            for (x, w) in panel_nodes(&[0.0, l1], theta_quad_order)? {
                nodes.push((x, w, true));
            }
            for (x, w) in panel_nodes(&[2.0 * l1, l1 + l2], theta_quad_order)? {
                nodes.push((x, w, false));
            }
        }
        SweepRoute::TailOnFirst => {
            if l2 > l1 + 1e-12 {
                return Err(Error::invalid(format!(
                    "route expects l1 >= l2, got ({l1}, {l2})"
                )));
            }
            for (x, w) in panel_nodes(&[0.0, l1 - l2], theta_quad_order)? {
                nodes.push((x, w, false));
            }
            for (x, w) in panel_nodes(&[(l1 - l2).max(0.0), l1], theta_quad_order)? {
                nodes.push((x, w, true));
            }
        }
    }
    let parts: Vec<(f64, f64)> = nodes
        .par_iter()
        .map(|&(theta, weight, paired)| -> Result<(f64, f64)> {
            let interval = problem.conditioning_interval(theta)?;
            let first = cond_point_joint(problem, theta, interval, m, opts)?;
            let (mut val, mut err) = (first.value, first.abs_error);
            if paired {
                // The mirrored meeting point of the sweep line.
                let second =
                    cond_point_joint(problem, 2.0 * l1 - theta, interval, m, opts)?;
                val += second.value;
                err += second.abs_error;
            }
            Ok((weight * val, weight * err))
        })
        .collect::<Result<Vec<_>>>()?;
    // Sequential reduction in node order, independent of the worker count.
    Ok(parts
        .iter()
        .fold((0.0, 0.0), |(v, e), (dv, de)| (v + dv, e + de)))
}
