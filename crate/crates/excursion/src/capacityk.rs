//! Growing-circle evaluation of the hitting probability for a star of k
//! segments sharing the origin.
//!
//! A circle grows from the origin until the field first touches the level u
//! somewhere on the star. The event decomposes over the touch radius t and
//! the segment i carrying the touch point: the touch density there times the
//! probability that every already-covered point (all grid points within
//! radius t, on every segment) is still below u. Each such conditional
//! factor regresses the covered grid values on the touch value and the
//! outward derivative at the touch point, exactly as the two-segment sweep
//! does, and the same joint lattice rule integrates the derivative and the
//! residual rectangle probability in one pass.
//!
//! For k = 2 this reproduces the sweeping-line decomposition in arc-length
//! coordinates, so the two engines cross-validate each other on shared
//! configurations.

use crate::capacity2::{SolverOptions, RESIDUAL_VAR_FLOOR};
use crate::error::{Error, Result};
use crate::gauss::{
    gauss_hermite_expectation, mvn_cdf_abs_moment, mvn_cdf_seeded, norm_cdf, norm_pdf,
    panel_nodes, CovarianceMatrix, EstimateWithError, DEFAULT_QMC_SEED, MVN_MAX_DIM,
};
use crate::geometry::KSegmentProblem;
use rayon::prelude::*;
use std::cell::{Cell, RefCell};
use std::f64::consts::PI;

/// Regression coefficients of the grid value at distance `h` along segment
/// `j` on the touch pair at radius `t` of segment `i`: alpha is the plain
/// correlation r(t v_i - h v_j), beta the covariance with the outward
/// derivative v_i . grad r(t v_i - h v_j). beta is returned unstandardized.
pub fn alpha_beta(
    problem: &KSegmentProblem,
    i: usize,
    t: f64,
    j: usize,
    h: f64,
) -> Result<(f64, f64)> {
    let k = problem.k();
    if i >= k || j >= k {
        return Err(Error::invalid(format!(
            "segment indices ({i}, {j}) out of range for k = {k}"
        )));
    }
    let max_l = problem.lengths.iter().cloned().fold(0.0, f64::max);
    if !(-1e-12..=problem.lengths[i] + 1e-12).contains(&t) {
        return Err(Error::invalid(format!(
            "touch radius {t} outside segment {i} of length {}",
            problem.lengths[i]
        )));
    }
    if !(-1e-12..=max_l + 1e-12).contains(&h) {
        return Err(Error::invalid(format!(
            "grid distance {h} outside [0, {max_l}]"
        )));
    }
    let vi = problem.direction_vec(i);
    let lag = t * vi - h * problem.direction_vec(j);
    let alpha = problem.model.r(lag);
    let gx = problem.model.deriv_cov(lag, (1, 0), (0, 0))?;
    let gy = problem.model.deriv_cov(lag, (0, 1), (0, 0))?;
    Ok((alpha, vi.x * gx + vi.y * gy))
}

/// The grid discretization of one circle-touch factor: the shared n-point
/// grid on [0, max l_j], the regression of every grid value on the touch
/// pair, the residual covariance, and the active-coordinate bookkeeping.
///
/// Coordinates are laid out per segment, flat index j * n + m for grid point
/// m of segment j. A coordinate is active when its grid distance satisfies
/// h_m <= min(l_j, t); inactive coordinates impose no constraint and carry
/// an infinite bound in [`w_matrix`].
#[derive(Clone, Debug)]
pub struct KRegressionState {
    pivot: usize,
    t: f64,
    grid: Vec<f64>,
    alpha: Vec<f64>,
    /// Coefficient against the standardized derivative, beta / sqrt(deriv_var).
    beta_std: Vec<f64>,
    deriv_var: f64,
    sigma: CovarianceMatrix,
    active_flag: Vec<bool>,
    /// Active flat indices with the duplicated origin kept only once: the
    /// grid point at distance 0 is the same planar point on every segment,
    /// and repeating the constraint would only pad the rectangle dimension.
    active: Vec<usize>,
}

impl KRegressionState {
    /// Assembles the state for the touch at radius `t` on segment `pivot`,
    /// with `n` grid points per segment.
    pub fn build(problem: &KSegmentProblem, pivot: usize, t: f64, n: usize) -> Result<Self> {
        let k = problem.k();
        if pivot >= k {
            return Err(Error::invalid(format!(
                "pivot segment {pivot} out of range for k = {k}"
            )));
        }
        if n < 2 {
            return Err(Error::invalid(format!("grid size must be at least 2, got {n}")));
        }
        let dim = n * k;
        if dim > MVN_MAX_DIM {
            return Err(Error::ResourceLimit(format!(
                "{k} segments with {n} grid points need rectangle dimension {dim}, beyond the cap {MVN_MAX_DIM}"
            )));
        }
        if !(-1e-12..=problem.lengths[pivot] + 1e-12).contains(&t) {
            return Err(Error::invalid(format!(
                "touch radius {t} outside segment {pivot} of length {}",
                problem.lengths[pivot]
            )));
        }
        let deriv_var = problem
            .model
            .directional_deriv_variance(problem.direction_vec(pivot));
        if !(deriv_var > 0.0) {
            return Err(Error::ModelValidation(format!(
                "derivative variance must be positive, got {deriv_var}"
            )));
        }
        let sd = deriv_var.sqrt();
        let max_l = problem.lengths.iter().cloned().fold(0.0, f64::max);
        let grid: Vec<f64> = (0..n)
            .map(|m| max_l * m as f64 / (n - 1) as f64)
            .collect();
        let mut alpha = vec![0.0; dim];
        let mut beta_std = vec![0.0; dim];
        for j in 0..k {
            for m in 0..n {
                let (a, b) = alpha_beta(problem, pivot, t, j, grid[m])?;
                alpha[j * n + m] = a;
                beta_std[j * n + m] = b / sd;
            }
        }
        // Raw correlations between the planar grid points; resolved before
        // the covariance builder because its closure cannot fail.
        let points: Vec<nalgebra::Vector2<f64>> = (0..dim)
            .map(|p| grid[p % n] * problem.direction_vec(p / n))
            .collect();
        let mut cross = vec![0.0; dim * dim];
        for p in 0..dim {
            for q in 0..=p {
                let r = problem.model.r(points[p] - points[q]);
                cross[p * dim + q] = r;
                cross[q * dim + p] = r;
            }
        }
        let mut var = Vec::with_capacity(dim);
        for p in 0..dim {
            let v = 1.0 - alpha[p] * alpha[p] - beta_std[p] * beta_std[p];
            if v < -1e-7 {
                return Err(Error::ModelValidation(format!(
                    "residual variance {v} at grid point {} of segment {} is negative beyond rounding",
                    grid[p % n],
                    p / n
                )));
            }
            var.push(v);
        }
        // Same cancellation-noise floor as the two-segment engine: residual
        // variances this small are deterministic at working precision and
        // enter the rectangle probability as exact indicator gates.
        let pinned: Vec<bool> = var.iter().map(|&v| v < RESIDUAL_VAR_FLOOR).collect();
        let sigma = CovarianceMatrix::from_fn(dim, |p, q| {
            if pinned[p] || pinned[q] {
                0.0
            } else if p == q {
                var[p]
            } else {
                cross[p * dim + q] - alpha[p] * alpha[q] - beta_std[p] * beta_std[q]
            }
        })?;
        let tol = 1e-9 * max_l.max(1.0);
        let active_flag: Vec<bool> = (0..dim)
            .map(|p| grid[p % n] <= problem.lengths[p / n].min(t) + tol)
            .collect();
        let active: Vec<usize> = (0..dim)
            .filter(|&p| active_flag[p] && !(p % n == 0 && p / n > 0))
            .collect();
        Ok(KRegressionState {
            pivot,
            t,
            grid,
            alpha,
            beta_std,
            deriv_var,
            sigma,
            active_flag,
            active,
        })
    }

    pub fn pivot(&self) -> usize {
        self.pivot
    }

    pub fn radius(&self) -> f64 {
        self.t
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn deriv_var(&self) -> f64 {
        self.deriv_var
    }

    pub fn alpha(&self, m: usize, j: usize) -> f64 {
        self.alpha[j * self.grid.len() + m]
    }

    /// Regression coefficient against the standardized derivative.
    pub fn beta_standardized(&self, m: usize, j: usize) -> f64 {
        self.beta_std[j * self.grid.len() + m]
    }

    /// Residual covariance between grid point `m1` of segment `j1` and grid
    /// point `m2` of segment `j2`.
    pub fn z_covariance(&self, m1: usize, j1: usize, m2: usize, j2: usize) -> f64 {
        let n = self.grid.len();
        self.sigma.entry(j1 * n + m1, j2 * n + m2)
    }

    pub fn residual_covariance(&self) -> &CovarianceMatrix {
        &self.sigma
    }

    /// Whether grid point `m` of segment `j` lies inside the grown circle
    /// and on its segment, h_m <= min(l_j, t).
    pub fn is_active(&self, m: usize, j: usize) -> bool {
        self.active_flag[j * self.grid.len() + m]
    }

    /// Number of constraints actually handed to the rectangle probability
    /// (active coordinates, with the origin counted once).
    pub fn active_dimension(&self) -> usize {
        self.active.len()
    }

    fn active_covariance(&self) -> Result<CovarianceMatrix> {
        CovarianceMatrix::from_fn(self.active.len(), |a, b| {
            self.sigma.entry(self.active[a], self.active[b])
        })
    }
}

/// Constraint bounds at standardized derivative value `y`: finite entries
/// u (1 - alpha) - y beta for active coordinates, infinity elsewhere.
#[derive(Clone, Debug)]
pub struct WMatrix {
    n: usize,
    k: usize,
    entries: Vec<f64>,
}

impl WMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Bound for grid point `m` of segment `j`.
    pub fn entry(&self, m: usize, j: usize) -> f64 {
        self.entries[j * self.n + m]
    }
}

/// The constraint-bound matrix of `state` at standardized derivative `y` and
/// level `u`. Inactive coordinates (grid points outside the circle or past
/// their segment end) carry an infinite bound, which is the same as leaving
/// them out of the rectangle probability.
pub fn w_matrix(state: &KRegressionState, y: f64, u: f64) -> WMatrix {
    let n = state.grid.len();
    let k = state.alpha.len() / n;
    let entries = (0..n * k)
        .map(|p| {
            if state.active_flag[p] {
                u * (1.0 - state.alpha[p]) - y * state.beta_std[p]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    WMatrix { n, k, entries }
}

/// E[|d_{v_i} X| 1(X <= u at every active grid point) | X_{t v_i} = u] with
/// the default accuracy settings: the touch-factor integrand of the growing
/// circle at radius `t` on segment `i`, discretized on `n` grid points per
/// segment. `y_quad_order` controls the derivative quadrature.
pub fn e_i_of_t(
    problem: &KSegmentProblem,
    i: usize,
    t: f64,
    n: usize,
    y_quad_order: usize,
) -> Result<EstimateWithError> {
    e_i_of_t_with(problem, i, t, n, y_quad_order, 3e-4, DEFAULT_QMC_SEED)
}

/// As [`e_i_of_t`], with the rectangle-probability tolerance and lattice
/// stream chosen by the caller. This is the layered route, one rectangle
/// probability per derivative node; the survival engine itself runs on the
/// joint lattice route, and the tests hold the two against each other.
pub fn e_i_of_t_with(
    problem: &KSegmentProblem,
    i: usize,
    t: f64,
    n: usize,
    y_quad_order: usize,
    cdf_rel_tol: f64,
    qmc_seed: u64,
) -> Result<EstimateWithError> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("touch radius must be positive, got {t}")));
    }
    let state = KRegressionState::build(problem, i, t, n)?;
    let (value, cdf_err) =
        circle_expectation(problem.u, &state, y_quad_order, cdf_rel_tol, qmc_seed)?;
    let coarse_order = (y_quad_order / 2).max(4);
    let quad_err = if coarse_order < y_quad_order {
        let (coarse, _) =
            circle_expectation(problem.u, &state, coarse_order, cdf_rel_tol, qmc_seed)?;
        (value - coarse).abs()
    } else {
        0.0
    };
    Ok(EstimateWithError::new(
        value,
        cdf_err + quad_err + 1e-14 * value.abs(),
        "circle-conditional-expectation",
    ))
}

/// Integrates |y| times the active-constraint rectangle probability over the
/// derivative law N(0, deriv_var), one rectangle probability per node.
fn circle_expectation(
    u: f64,
    state: &KRegressionState,
    y_quad_order: usize,
    cdf_rel_tol: f64,
    qmc_seed: u64,
) -> Result<(f64, f64)> {
    let sd = state.deriv_var.sqrt();
    let sigma = state.active_covariance()?;
    let worst_cdf_err = Cell::new(0.0f64);
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let value = gauss_hermite_expectation(
        |y| {
            let z = y / sd;
            let upper: Vec<f64> = state
                .active
                .iter()
                .map(|&p| u * (1.0 - state.alpha[p]) - z * state.beta_std[p])
                .collect();
            match mvn_cdf_seeded(&upper, &sigma, cdf_rel_tol, qmc_seed) {
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
        state.deriv_var,
        y_quad_order,
    )?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let abs_mean = (2.0 * state.deriv_var / PI).sqrt();
    Ok((value, worst_cdf_err.get() * abs_mean))
}

/// The same touch factor through the joint lattice rule, one adaptive
/// integral for the derivative and the rectangle probability together.
fn e_point_joint(
    u: f64,
    state: &KRegressionState,
    opts: &SolverOptions,
) -> Result<EstimateWithError> {
    let sd = state.deriv_var.sqrt();
    let base: Vec<f64> = state
        .active
        .iter()
        .map(|&p| u * (1.0 - state.alpha[p]))
        .collect();
    let slope: Vec<f64> = state.active.iter().map(|&p| -state.beta_std[p]).collect();
    let est = mvn_cdf_abs_moment(
        &base,
        &slope,
        &state.active_covariance()?,
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

/// P[the field stays below u on every segment] with the default accuracy
/// settings. `n` is the per-segment grid size, `t_quad_order` the
/// Gauss-Legendre order per radius panel.
pub fn joint_survival_k(
    problem: &KSegmentProblem,
    n: usize,
    t_quad_order: usize,
) -> Result<EstimateWithError> {
    joint_survival_k_with(problem, n, t_quad_order, &SolverOptions::default())
}

/// As [`joint_survival_k`] with explicit accuracy settings.
pub fn joint_survival_k_with(
    problem: &KSegmentProblem,
    n: usize,
    t_quad_order: usize,
    opts: &SolverOptions,
) -> Result<EstimateWithError> {
    if t_quad_order == 0 {
        return Err(Error::invalid("radius quadrature order must be positive".to_string()));
    }
    if n < 2 {
        return Err(Error::invalid(format!("grid size must be at least 2, got {n}")));
    }
    let k = problem.k();
    let worst_n = if opts.refine_grid { 2 * n - 1 } else { n };
    if worst_n * k > MVN_MAX_DIM {
        return Err(Error::ResourceLimit(format!(
            "{k} segments with {worst_n} grid points need rectangle dimension {}, beyond the cap {MVN_MAX_DIM}",
            worst_n * k
        )));
    }
    // Reassemble the star in a canonical segment order so that permuting the
    // input changes nothing, down to the floating-point reduction order.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let na = problem.directions[a].rem_euclid(2.0 * PI);
        let nb = problem.directions[b].rem_euclid(2.0 * PI);
        na.total_cmp(&nb)
    });
    let canon = KSegmentProblem::new(
        problem.u,
        order.iter().map(|&j| problem.directions[j]).collect(),
        order.iter().map(|&j| problem.lengths[j]).collect(),
        problem.model.clone(),
    )?;
    let (mut integral, mut err) = circle_integral(&canon, n, t_quad_order, opts)?;
    if opts.refine_grid {
        let (fine, fine_err) = circle_integral(&canon, 2 * n - 1, t_quad_order, opts)?;
        err = fine_err + (fine - integral).abs();
        integral = fine;
    }
    let u = problem.u;
    let density = norm_pdf(u);
    // Survival of the star = P(X_origin < u) minus the first-touch mass
    // integrated over the growing circle.
    let raw = norm_cdf(u) - density * integral;
    let mut abs_error = err * density;
    let value = raw.clamp(0.0, 1.0);
    let overshoot = (raw - value).abs();
    let method = if overshoot > abs_error {
        "growing-circle (clamped beyond error bound)"
    } else {
        "growing-circle"
    };
    abs_error += overshoot;
    Ok(EstimateWithError::new(value, abs_error, method))
}

/// Hitting probability of the star, 1 minus [`joint_survival_k`].
pub fn capacity_k_segments(
    problem: &KSegmentProblem,
    n: usize,
    t_quad_order: usize,
) -> Result<EstimateWithError> {
    capacity_k_segments_with(problem, n, t_quad_order, &SolverOptions::default())
}

/// As [`capacity_k_segments`] with explicit accuracy settings.
pub fn capacity_k_segments_with(
    problem: &KSegmentProblem,
    n: usize,
    t_quad_order: usize,
    opts: &SolverOptions,
) -> Result<EstimateWithError> {
    let survival = joint_survival_k_with(problem, n, t_quad_order, opts)?;
    Ok(EstimateWithError::new(
        1.0 - survival.value,
        survival.abs_error,
        survival.method,
    ))
}

/// Upper bound on the hitting probability: the point mass at the origin plus
/// the expected number of up-crossings of level u along every segment.
pub fn rice_upper_bound_k(problem: &KSegmentProblem) -> f64 {
    let u = problem.u;
    let crossings: f64 = (0..problem.k())
        .map(|j| {
            problem.lengths[j]
                * problem
                    .model
                    .directional_deriv_variance(problem.direction_vec(j))
                    .sqrt()
        })
        .sum();
    (1.0 - norm_cdf(u)) + crossings * (-0.5 * u * u).exp() / (2.0 * PI)
}

/// The first-touch integral Sum_i int_0^{l_i} E_i(t) dt and its accumulated
/// error bound. Panels break where the integrand is not smooth: at segment
/// ends inside the range, and at every grid distance, because a grid point
/// entering the circle adds a constraint discontinuously.
fn circle_integral(
    problem: &KSegmentProblem,
    n: usize,
    t_quad_order: usize,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    let k = problem.k();
    let max_l = problem.lengths.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-12 * max_l.max(1.0);
    let grid: Vec<f64> = (0..n)
        .map(|m| max_l * m as f64 / (n - 1) as f64)
        .collect();
    let mut tasks: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..k {
        let li = problem.lengths[i];
        let mut breaks = vec![0.0, li];
        for &lj in &problem.lengths {
            if lj < li - tol {
                breaks.push(lj);
            }
        }
        for &h in &grid {
            if h > tol && h < li - tol {
                breaks.push(h);
            }
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() <= tol);
        for (t, w) in panel_nodes(&breaks, t_quad_order)? {
            tasks.push((i, t, w));
        }
    }
    let parts: Vec<(f64, f64)> = tasks
        .par_iter()
        .map(|&(i, t, w)| -> Result<(f64, f64)> {
            let state = KRegressionState::build(problem, i, t, n)?;
            let est = e_point_joint(problem.u, &state, opts)?;
            Ok((w * est.value, w * est.abs_error))
        })
        .collect::<Result<Vec<_>>>()?;
    // Sequential reduction in task order, independent of the worker count.
    Ok(parts
        .iter()
        .fold((0.0, 0.0), |(v, e), (dv, de)| (v + dv, e + de)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capacity2::{capacity_two_segments, cond_integrand};
    use crate::covariance::CorrelationModel;
    use crate::geometry::TwoSegmentProblem;
    use nalgebra::DMatrix;

    fn star(u: f64, directions: Vec<f64>, lengths: Vec<f64>) -> KSegmentProblem {
        KSegmentProblem::new(u, directions, lengths, CorrelationModel::gaussian()).unwrap()
    }

    /// Mirror-image pair matching TwoSegmentProblem's geometry: the first
    /// branch sits at angle pi/2 + phi, the second at pi/2 - phi.
    fn star_for_half_angle(u: f64, l1: f64, l2: f64, phi: f64) -> KSegmentProblem {
        star(u, vec![PI / 2.0 + phi, PI / 2.0 - phi], vec![l1, l2])
    }

    fn sheared_model() -> CorrelationModel {
        CorrelationModel::from_fn("sheared-gaussian", |x, y| {
            (-0.5 * (x * x + y * y + 0.8 * x * y)).exp()
        })
        .unwrap()
    }

    #[test]
    fn alpha_beta_zero_lag_is_identity() {
        let p = star(1.0, vec![0.0, 2.0], vec![1.0, 1.5]);
        for (i, t) in [(0usize, 0.3), (0, 1.0), (1, 0.7)] {
            let (a, b) = alpha_beta(&p, i, t, i, t).unwrap();
            assert!((a - 1.0).abs() < 1e-14 && b.abs() < 1e-10, "({a}, {b})");
        }
    }

    #[test]
    fn alpha_beta_orthogonal_frozen_values() {
        // Unit distances on orthogonal segments: squared lag 2, so alpha is
        // exp(-1); the gradient of the kernel is -lag exp(-1), and the pivot
        // direction picks out its first component.
        let p = star(1.0, vec![0.0, PI / 2.0], vec![1.0, 1.0]);
        let (a, b) = alpha_beta(&p, 0, 1.0, 1, 1.0).unwrap();
        assert!((a - (-1.0f64).exp()).abs() < 1e-14, "alpha {a}");
        assert!((b + (-1.0f64).exp()).abs() < 1e-12, "beta {b}");
    }

    #[test]
    fn alpha_beta_matches_finite_difference() {
        // beta is the derivative of E[X_{s v_i} X_{h v_j}] in s at s = t.
        let models = [CorrelationModel::gaussian(), sheared_model()];
        for model in models {
            let p =
                KSegmentProblem::new(0.5, vec![0.4, 1.9, 3.6], vec![1.0, 1.2, 0.8], model).unwrap();
            let eps = 1e-5;
            for (i, t, j, h) in [(0usize, 0.6, 1usize, 0.9), (1, 1.1, 2, 0.3), (2, 0.5, 0, 0.0)] {
                let (_, b) = alpha_beta(&p, i, t, j, h).unwrap();
                let up = alpha_beta(&p, i, t + eps, j, h).unwrap().0;
                let down = alpha_beta(&p, i, t - eps, j, h).unwrap().0;
                let fd = (up - down) / (2.0 * eps);
                assert!((b - fd).abs() < 1e-5, "({i},{t},{j},{h}): beta {b} vs fd {fd}");
            }
        }
    }

    #[test]
    fn state_invariants_and_degenerate_pivot_coordinate() {
        let p = star(1.0, vec![0.2, 1.5, 4.0], vec![1.0, 0.75, 0.5]);
        // t = 0.75 lies on the n = 5 grid over [0, 1], index 3.
        let state = KRegressionState::build(&p, 0, 0.75, 5).unwrap();
        let n = state.grid().len();
        for j in 0..3 {
            for m in 0..n {
                let var = state.z_covariance(m, j, m, j);
                assert!(var >= -1e-10, "negative residual variance {var} at ({m},{j})");
            }
        }
        assert!((state.alpha(3, 0) - 1.0).abs() < 1e-14);
        assert!(state.beta_standardized(3, 0).abs() < 1e-10);
        for j in 0..3 {
            for m in 0..n {
                assert!(
                    state.z_covariance(3, 0, m, j).abs() < 1e-12,
                    "touch-point residual must be degenerate against ({m},{j})"
                );
            }
        }
        // Activity pattern: h <= min(l_j, t) per segment.
        for (j, lj) in [1.0f64, 0.75, 0.5].iter().enumerate() {
            for (m, &h) in state.grid().iter().enumerate() {
                assert_eq!(
                    state.is_active(m, j),
                    h <= lj.min(0.75) + 1e-12,
                    "activity at ({m},{j})"
                );
            }
        }
        // Origin deduplication: segment counts 4 + 4 + 3 actives minus two
        // repeated origins.
        assert_eq!(state.active_dimension(), 9);
    }

    #[test]
    fn state_matches_schur_complement() {
        // Direct linear algebra on the joint covariance of the grid values
        // and the touch pair must reproduce the residual covariance, which
        // validates the standardized-beta convention on an anisotropic model.
        let p = KSegmentProblem::new(
            0.7,
            vec![0.4, 1.9],
            vec![0.9, 1.2],
            sheared_model(),
        )
        .unwrap();
        let (pivot, t, n) = (1usize, 0.8, 5usize);
        let state = KRegressionState::build(&p, pivot, t, n).unwrap();
        let dim = 2 * n;
        let sd = state.deriv_var().sqrt();

        let points: Vec<nalgebra::Vector2<f64>> = (0..dim)
            .map(|q| state.grid()[q % n] * p.direction_vec(q / n))
            .collect();
        let mut joint = DMatrix::zeros(dim + 2, dim + 2);
        for a in 0..dim {
            for b in 0..dim {
                joint[(a, b)] = p.model.r(points[a] - points[b]);
            }
            let (alpha, beta) = alpha_beta(&p, pivot, t, a / n, state.grid()[a % n]).unwrap();
            joint[(a, dim)] = alpha;
            joint[(dim, a)] = alpha;
            joint[(a, dim + 1)] = beta;
            joint[(dim + 1, a)] = beta;
        }
        joint[(dim, dim)] = 1.0;
        joint[(dim + 1, dim + 1)] = state.deriv_var();

        let grid_block = joint.view((0, 0), (dim, dim)).into_owned();
        let cross = joint.view((0, dim), (dim, 2)).into_owned();
        let cond = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            1.0,
            1.0 / state.deriv_var(),
        ]));
        let schur = &grid_block - &cross * cond * cross.transpose();
        for a in 0..dim {
            for b in 0..dim {
                let got = state.z_covariance(a % n, a / n, b % n, b / n);
                let pinned = state.z_covariance(a % n, a / n, a % n, a / n) == 0.0
                    || state.z_covariance(b % n, b / n, b % n, b / n) == 0.0;
                if pinned {
                    assert!(schur[(a, b)].abs() < 1e-8, "pinned ({a},{b}): {}", schur[(a, b)]);
                } else {
                    assert!(
                        (got - schur[(a, b)]).abs() < 1e-10,
                        "({a},{b}): {got} vs schur {}",
                        schur[(a, b)]
                    );
                }
            }
            let (_, beta) = alpha_beta(&p, pivot, t, a / n, state.grid()[a % n]).unwrap();
            assert!((state.beta_standardized(a % n, a / n) - beta / sd).abs() < 1e-14);
        }
    }

    #[test]
    fn w_matrix_cases() {
        let p = star(1.0, vec![0.0, PI / 2.0], vec![0.5, 1.0]);
        let state = KRegressionState::build(&p, 1, 0.8, 5).unwrap();
        // Grid over [0, 1] is {0, 0.25, 0.5, 0.75, 1}. Segment 0 ends at 0.5,
        // the circle at 0.8: the 0.75 row is infinite for the short segment
        // but finite for the long one.
        let w = w_matrix(&state, 0.3, 1.0);
        assert!(w.entry(3, 0).is_infinite());
        assert!(w.entry(3, 1).is_finite());
        assert!(w.entry(4, 0).is_infinite() && w.entry(4, 1).is_infinite());
        for j in 0..2 {
            for m in 0..5 {
                assert_eq!(
                    w.entry(m, j).is_finite(),
                    state.is_active(m, j),
                    "bound/activity mismatch at ({m},{j})"
                );
            }
        }
        // At y = 0, u = 0 every finite bound vanishes.
        let w0 = w_matrix(&state, 0.0, 0.0);
        for j in 0..2 {
            for m in 0..5 {
                if w0.entry(m, j).is_finite() {
                    assert_eq!(w0.entry(m, j), 0.0);
                }
            }
        }
        // At a touch point on the grid the bound is exactly zero, a satisfied
        // constraint consistent with conditioning the touch value to u.
        let on_grid = KRegressionState::build(&p, 1, 0.75, 5).unwrap();
        let wg = w_matrix(&on_grid, 0.7, 1.0);
        assert_eq!(wg.entry(3, 1), 0.0);
    }

    #[test]
    fn touch_factor_small_radius_limit_is_gated() {
        // As t -> 0+ only the origin constrains, and conditioned on the
        // touch value the origin sits at u - y t + O(t^2): the constraint
        // collapses to a half-line gate on the derivative, so the limit is
        // the folded mean of the positive part, not the full folded mean.
        let p = star(1.0, vec![0.0, PI / 2.0], vec![1.0, 1.0]);
        let t = 1e-3;
        let state = KRegressionState::build(&p, 0, t, 6).unwrap();
        let joint = e_point_joint(p.u, &state, &SolverOptions::default()).unwrap();
        let alpha = (-0.5 * t * t).exp();
        let gate = -(1.0 - alpha) / (t * alpha);
        let expected = 2.0 * norm_pdf(0.0) - norm_pdf(gate);
        assert!(
            (joint.value - expected).abs() < 1e-10,
            "joint value {} vs gated mean {expected}",
            joint.value
        );
        // The layered route sees the gate only through its derivative nodes,
        // none of which falls inside the O(t) offset, so it is accurate to
        // the gate offset effect rather than exact.
        let layered = e_i_of_t(&p, 0, t, 6, 16).unwrap();
        assert!(
            (layered.value - expected).abs() < 1e-6,
            "layered value {} vs gated mean {expected}",
            layered.value
        );
        // Well below the unconstrained folded mean sqrt(2/pi).
        assert!(joint.value < 0.45);

        // At u = 0 the gate sits exactly at zero and the half folded mean
        // comes out in closed form.
        let p0 = star(0.0, vec![0.0, PI / 2.0], vec![1.0, 1.0]);
        let est0 = e_i_of_t(&p0, 0, t, 6, 16).unwrap();
        assert!((est0.value - norm_pdf(0.0)).abs() < 1e-12, "{}", est0.value);
    }

    #[test]
    fn touch_factor_high_threshold_regimes() {
        // A constraint at distance d behind the touch point stays slack
        // while the standardized derivative is below about u d / 2, so the
        // unconstrained folded mean needs u >> 1/d. With a 2-point grid the
        // only constraint sits far behind and u = 8 already qualifies.
        let folded = (2.0 / PI).sqrt();
        let coarse = e_i_of_t(&star(8.0, vec![0.0], vec![1.4]), 0, 1.2, 2, 16).unwrap();
        assert!(
            (coarse.value - folded).abs() < 1e-4,
            "value {} vs folded mean {folded}",
            coarse.value
        );
        // On a fine grid the nearest constraint is one half-spacing away at
        // a mid-gap radius, so the threshold must grow accordingly.
        let fine = e_i_of_t(&star(200.0, vec![0.0], vec![1.4]), 0, 0.7, 12, 16).unwrap();
        assert!(
            (fine.value - folded).abs() < 1e-4,
            "value {} vs folded mean {folded}",
            fine.value
        );
        // Between the regimes the constraints bind and cut away most of the
        // negative derivative half-line.
        let binding = e_i_of_t(&star(8.0, vec![0.0], vec![1.4]), 0, 0.7, 12, 16).unwrap();
        assert!(
            binding.value > 0.5 * folded - 0.03 && binding.value < 0.75 * folded,
            "value {} should sit between half and three quarters of {folded}",
            binding.value
        );
    }

    #[test]
    fn touch_factor_joint_route_matches_layered_route() {
        let p = star(1.0, vec![0.4, 2.1], vec![1.0, 0.8]);
        let state = KRegressionState::build(&p, 0, 0.6, 9).unwrap();
        let joint = e_point_joint(p.u, &state, &SolverOptions::default()).unwrap();
        let layered = e_i_of_t(&p, 0, 0.6, 9, 16).unwrap();
        assert!(
            (joint.value - layered.value).abs() <= joint.abs_error + layered.abs_error + 1e-4,
            "joint {} (err {}) vs layered {} (err {})",
            joint.value,
            joint.abs_error,
            layered.value,
            layered.abs_error
        );
    }

    #[test]
    fn touch_factor_matches_sweep_integrand_on_shared_grid() {
        // For two segments the circle of radius l covers the whole bundle,
        // and the touch at the tip of the first branch is the sweep's
        // conditional factor at arc position 0 over the full swept interval.
        // With n points per segment against 2n - 1 arc points the two
        // discretizations are the same planar point set, so the values must
        // agree within integration error alone.
        let (u, l, phi, n) = (1.0, 0.7, PI / 4.0, 12usize);
        let kp = star_for_half_angle(u, l, l, phi);
        let circle = e_i_of_t(&kp, 0, l, n, 16).unwrap();
        let sweep = TwoSegmentProblem::new(u, l, l, phi, CorrelationModel::gaussian()).unwrap();
        let arc = cond_integrand(&sweep, 0.0, (0.0, 2.0 * l), 2 * n - 1, 16).unwrap();
        assert!(
            (circle.value - arc.value).abs() <= circle.abs_error + arc.abs_error + 1e-4,
            "circle {} (err {}) vs sweep {} (err {})",
            circle.value,
            circle.abs_error,
            arc.value,
            arc.abs_error
        );
    }

    #[test]
    fn survival_tiny_star_approaches_point_value() {
        let p = star(0.0, vec![0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0], vec![1e-4; 3]);
        let opts = SolverOptions {
            refine_grid: false,
            ..SolverOptions::default()
        };
        let est = joint_survival_k_with(&p, 4, 4, &opts).unwrap();
        assert!(
            (est.value - 0.5).abs() < 1e-3,
            "survival {} vs point value 0.5",
            est.value
        );
    }

    #[test]
    fn survival_permutation_invariance_is_exact() {
        let opts = SolverOptions {
            refine_grid: false,
            ..SolverOptions::default()
        };
        let a = joint_survival_k_with(
            &star(0.8, vec![1.0, 3.0, 5.0], vec![0.5, 0.7, 0.9]),
            5,
            4,
            &opts,
        )
        .unwrap();
        let b = joint_survival_k_with(
            &star(0.8, vec![5.0, 1.0, 3.0], vec![0.9, 0.5, 0.7]),
            5,
            4,
            &opts,
        )
        .unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.abs_error.to_bits(), b.abs_error.to_bits());
    }

    #[test]
    fn survival_rotation_invariance_for_isotropic_model() {
        let opts = SolverOptions {
            refine_grid: false,
            ..SolverOptions::default()
        };
        let a = joint_survival_k_with(&star(1.0, vec![0.3, 2.0], vec![0.8, 0.6]), 6, 4, &opts)
            .unwrap();
        let b = joint_survival_k_with(&star(1.0, vec![1.0, 2.7], vec![0.8, 0.6]), 6, 4, &opts)
            .unwrap();
        assert!(
            (a.value - b.value).abs() <= a.abs_error + b.abs_error + 1e-6,
            "rotated by 0.7: {} vs {}",
            a.value,
            b.value
        );
    }

    #[test]
    fn survival_monotone_and_sandwiched() {
        let opts = SolverOptions {
            refine_grid: false,
            ..SolverOptions::default()
        };
        let eval = |u: f64, l0: f64, l1: f64| {
            joint_survival_k_with(&star(u, vec![0.0, PI / 2.0], vec![l0, l1]), 6, 4, &opts)
                .unwrap()
        };
        // Nondecreasing in u.
        let by_u: Vec<f64> = [0.5, 1.0, 1.5].iter().map(|&u| eval(u, 0.6, 0.6).value).collect();
        assert!(by_u[0] < by_u[1] && by_u[1] < by_u[2], "{by_u:?}");
        // Nonincreasing in each length.
        let s00 = eval(1.0, 0.5, 0.5);
        let s10 = eval(1.0, 0.8, 0.5);
        let s11 = eval(1.0, 0.8, 0.8);
        assert!(s10.value < s00.value + 1e-9 && s11.value < s10.value + 1e-9);
        // Sandwich: point mass below, Rice crossing bound above.
        for (u, l0, l1) in [(1.0, 0.8, 0.5), (2.0, 0.6, 0.6)] {
            let p = star(u, vec![0.0, PI / 2.0], vec![l0, l1]);
            let t = 1.0 - joint_survival_k_with(&p, 6, 4, &opts).unwrap().value;
            assert!(t >= 1.0 - norm_cdf(u) - 1e-9, "capacity {t} below the point mass");
            assert!(t <= rice_upper_bound_k(&p) + 1e-9, "capacity {t} above the Rice bound");
        }
    }

    #[test]
    fn capacity_k2_matches_sampling_oracle() {
        // Reference: 1e5 field samples on a 0.01-step discretization of the
        // two-segment bundle gave hit frequency 0.3298 with binomial se
        // 0.0019 (the sweep engine's own oracle configuration).
        let p = star_for_half_angle(1.0, 1.0, 1.0, PI / 4.0);
        let est = capacity_k_segments(&p, 12, 8).unwrap();
        assert!(
            (est.value - 0.3298).abs() <= 3.0 * 0.0019 + est.abs_error,
            "value {} err {}",
            est.value,
            est.abs_error
        );
    }

    #[test]
    fn capacity_k2_matches_sweep_engine() {
        let (u, l1, l2, phi) = (1.2, 0.7, 0.7, PI / 3.0);
        let circle = capacity_k_segments(&star_for_half_angle(u, l1, l2, phi), 10, 8).unwrap();
        let sweep = capacity_two_segments(
            &TwoSegmentProblem::new(u, l1, l2, phi, CorrelationModel::gaussian()).unwrap(),
            12,
            10,
        )
        .unwrap();
        assert!(
            (circle.value - sweep.value).abs() <= circle.abs_error + sweep.abs_error + 2e-3,
            "circle {} (err {}) vs sweep {} (err {})",
            circle.value,
            circle.abs_error,
            sweep.value,
            sweep.abs_error
        );
    }

    #[test]
    fn capacity_k1_matches_degenerate_second_segment() {
        let (u, l, phi) = (1.0, 1.0, PI / 4.0);
        let single = capacity_k_segments(&star(u, vec![PI / 2.0 + phi], vec![l]), 12, 10).unwrap();
        let reduced = capacity_two_segments(
            &TwoSegmentProblem::new(u, l, 0.0, phi, CorrelationModel::gaussian()).unwrap(),
            12,
            12,
        )
        .unwrap();
        assert!(
            (single.value - reduced.value).abs()
                <= single.abs_error + reduced.abs_error + 1.5e-3,
            "k=1 {} (err {}) vs reduced sweep {} (err {})",
            single.value,
            single.abs_error,
            reduced.value,
            reduced.abs_error
        );
    }

    #[test]
    fn capacity_k3_matches_sampling_oracle() {
        // Reference: 1e5 field samples on a 0.01-step discretization of the
        // symmetric 3-star gave hit frequency 0.17956 with binomial se
        // 0.00121.
        let p = star(
            1.5,
            vec![0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0],
            vec![0.8, 0.8, 0.8],
        );
        let est = capacity_k_segments(&p, 10, 6).unwrap();
        assert!(
            (est.value - 0.17956).abs() <= 3.0 * 0.00121 + est.abs_error,
            "value {} err {}",
            est.value,
            est.abs_error
        );
    }

    #[test]
    fn input_validation() {
        let p = star(1.0, vec![0.0, PI / 2.0], vec![1.0, 1.0]);
        assert!(alpha_beta(&p, 2, 0.5, 0, 0.5).is_err());
        assert!(alpha_beta(&p, 0, 1.5, 0, 0.5).is_err());
        assert!(alpha_beta(&p, 0, 0.5, 0, 1.5).is_err());
        assert!(KRegressionState::build(&p, 0, 0.5, 1).is_err());
        assert!(KRegressionState::build(&p, 2, 0.5, 4).is_err());
        assert!(e_i_of_t(&p, 0, 0.0, 4, 8).is_err());
        assert!(joint_survival_k_with(&p, 2, 0, &SolverOptions::default()).is_err());
        // The rectangle dimension cap is enforced up front, counting the
        // refinement pass.
        let opts = SolverOptions {
            refine_grid: false,
            ..SolverOptions::default()
        };
        assert!(joint_survival_k_with(&p, 1001, 4, &opts).is_err());
        assert!(joint_survival_k_with(&p, 501, 4, &SolverOptions::default()).is_err());
    }
}
