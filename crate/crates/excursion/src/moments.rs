//! Second moment of the excursion boundary length via line-pair crossing
//! intensities, and the closed-form first-moment intensity.
//!
//! The boundary length of `A_u` in a window, measured by intersecting with
//! lines, turns the second moment of the length into a double integral over
//! line pairs of expected crossing-count products:
//!
//! ```text
//! mu2(B1 x B2) = 1/4 * integral integral E[C(g1 /\ B1) C(g2 /\ B2)] dg1 dg2
//! ```
//!
//! with `C(g /\ B)` the number of level crossings of the field restricted to
//! the chord, and `dg` the kinematic measure on lines. The inner expectation
//! is itself a two-point Rice integral along the two chords, with an
//! integrable singularity where the chord points meet at the lines'
//! intersection; a small diagonal neighborhood is excised and its
//! contribution reported as a bias bound rather than hidden.
//!
//! The outer line-pair integral is estimated by Monte Carlo over pairs of
//! lines drawn from the Crofton samplers of the two windows. Near-parallel
//! pairs carry zero kinematic measure and are skipped; replacements come
//! from the oversampled tail of the same stream, so the estimate stays
//! unbiased and seed-reproducible.
//!
//! The reduced second-moment density (the one-argument function of the
//! window displacement obtained by deconvolving the pair geometry) is not
//! inverted here; `mu2` is reported per window pair.

use crate::covariance::CorrelationModel;
use crate::error::{Error, Result};
use crate::gauss::{abs_product_moment, panel_nodes, EstimateWithError};
use crate::geometry::{Line, Window};
use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use std::f64::consts::PI;

/// Lines whose angles differ from 0 or pi by less than this (radians) are
/// treated as parallel and rejected: their intersection point is unstable
/// and the set of such pairs has kinematic measure zero.
pub const PARALLEL_TOLERANCE: f64 = 1e-3;

/// Chord point pairs closer than this are excised from the crossing-product
/// integral. The two-point Rice integrand grows like one over the point
/// distance there, which is integrable, so the excised mass is bounded and
/// reported as part of the quadrature error.
pub const EXCISION_RADIUS: f64 = 1e-3;

/// Longest quadrature panel along a chord. The integrand varies on the
/// correlation scale of the kernel, which is of order one for every model
/// this crate ships; the order-halving error estimate catches a kernel that
/// needs finer panels.
const MAX_PANEL_LENGTH: f64 = 1.0;

/// A transversal pair of lines with their intersection point and unit
/// directions, the coordinate frame of the two-point crossing integrals.
#[derive(Clone, Copy, Debug)]
pub struct LinePair {
    g1: Line,
    g2: Line,
    p: Vector2<f64>,
    v1: Vector2<f64>,
    v2: Vector2<f64>,
    weight: f64,
}

impl LinePair {
    /// Builds the pair with unit weight, rejecting near-parallel lines.
    pub fn new(g1: Line, g2: Line) -> Result<Self> {
        Self::weighted(g1, 1.0, g2, 1.0)
    }

    /// Builds the pair from two Crofton sampler draws, carrying the product
    /// of their sampling weights.
    pub fn weighted(g1: Line, w1: f64, g2: Line, w2: f64) -> Result<Self> {
        if !(w1 > 0.0 && w2 > 0.0) || !(w1 * w2).is_finite() {
            return Err(Error::invalid(format!(
                "line weights must be positive and finite, got {w1} and {w2}"
            )));
        }
        // Line angles live in [0, pi); the parallel set wraps around both ends.
        let diff = (g1.angle() - g2.angle()).abs();
        let gap = diff.min(PI - diff);
        if gap < PARALLEL_TOLERANCE {
            return Err(Error::invalid(format!(
                "lines are parallel within {PARALLEL_TOLERANCE} rad (angle gap {gap:.2e})"
            )));
        }
        // Intersection from x . n_i = offset_i; the determinant is
        // sin(angle gap), bounded away from zero by the rejection above.
        let (n1, n2) = (g1.normal(), g2.normal());
        let det = n1.x * n2.y - n1.y * n2.x;
        let p = Vector2::new(
            (g1.offset() * n2.y - g2.offset() * n1.y) / det,
            (n1.x * g2.offset() - n2.x * g1.offset()) / det,
        );
        Ok(LinePair {
            g1,
            g2,
            p,
            v1: g1.direction(),
            v2: g2.direction(),
            weight: w1 * w2,
        })
    }

    pub fn g1(&self) -> &Line {
        &self.g1
    }

    pub fn g2(&self) -> &Line {
        &self.g2
    }

    /// The intersection point of the two lines.
    pub fn intersection(&self) -> Vector2<f64> {
        self.p
    }

    /// Unit direction of the first line.
    pub fn v1(&self) -> Vector2<f64> {
        self.v1
    }

    /// Unit direction of the second line.
    pub fn v2(&self) -> Vector2<f64> {
        self.v2
    }

    /// Product of the Crofton sampling weights this pair was drawn with.
    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// The Monte Carlo estimate of `mu2(B1 x B2)` together with the work that
/// produced it.
#[derive(Clone, Debug)]
pub struct SecondMomentResult {
    /// Estimated second moment of the boundary length over the window pair;
    /// always nonnegative, with three standard errors plus the mean inner
    /// quadrature error as `abs_error`.
    pub mu2: EstimateWithError,
    /// Number of accepted line pairs averaged over.
    pub pair_count: usize,
    /// Total two-point integrand evaluations across all pairs.
    pub eval_count: usize,
}

/// Per-pair state for the two-point Rice integrand: the unit directions and
/// their derivative variances do not change along the chords.
struct PairKernel<'a> {
    model: &'a CorrelationModel,
    u: f64,
    v1: Vector2<f64>,
    v2: Vector2<f64>,
    lam1: f64,
    lam2: f64,
}

impl<'a> PairKernel<'a> {
    fn new(model: &'a CorrelationModel, u: f64, pair: &LinePair) -> Self {
        PairKernel {
            model,
            u,
            v1: pair.v1,
            v2: pair.v2,
            lam1: model.directional_deriv_variance(pair.v1),
            lam2: model.directional_deriv_variance(pair.v2),
        }
    }

    /// Integrand value and the inner absolute-moment quadrature error at
    /// chord coordinates (s, t), both relative to the pair's intersection.
    fn eval(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        let h = s * self.v1 - t * self.v2;
        if h.norm() <= EXCISION_RADIUS {
            return Err(Error::invalid(format!(
                "chord points at ({s}, {t}) are {:.2e} apart, inside the excised diagonal \
                 neighborhood of radius {EXCISION_RADIUS}; integrate around it instead",
                h.norm()
            )));
        }
        let rho = self.model.r(h);
        let om = 1.0 - rho * rho;
        if om < 1e-9 {
            return Err(Error::invalid(format!(
                "field values at chord points ({s}, {t}) are perfectly correlated \
                 (rho = {rho}); the conditioning covariance is singular"
            )));
        }

        // Joint second moments of (X at the two points, the two directional
        // derivatives) from the kernel partials: with the first point at lag
        // h from the second, Cov(d_v X_{x+h}, X_x) = v . grad r(h), fields
        // swap the sign, and Cov(d_v X_{x+h}, d_w X_x) = -v' Hess r(h) w.
        let e1 = (1u8, 0u8);
        let e2 = (0u8, 1u8);
        let zero = (0u8, 0u8);
        let a = self.v1.x * self.model.deriv_cov(h, e1, zero)?
            + self.v1.y * self.model.deriv_cov(h, e2, zero)?;
        let b = self.v2.x * self.model.deriv_cov(h, zero, e1)?
            + self.v2.y * self.model.deriv_cov(h, zero, e2)?;
        let c12 = self.v1.x * self.v2.x * self.model.deriv_cov(h, e1, e1)?
            + self.v1.x * self.v2.y * self.model.deriv_cov(h, e1, e2)?
            + self.v1.y * self.v2.x * self.model.deriv_cov(h, e2, e1)?
            + self.v1.y * self.v2.y * self.model.deriv_cov(h, e2, e2)?;

        // Condition the derivative pair on both field values being u. The
        // derivatives are uncorrelated with the field at their own point, so
        // the cross block has the single entries a = Cov(D1, X2) and
        // b = Cov(D2, X1), and the 2x2 conditioning is explicit.
        let m = self.u / (1.0 + rho);
        let mean = Vector2::new(a * m, b * m);
        let d1 = self.lam1 - a * a / om;
        let d2 = self.lam2 - b * b / om;
        let floor = -1e-7 * self.lam1.max(self.lam2);
        if d1 < floor || d2 < floor {
            return Err(Error::ModelValidation(format!(
                "conditional derivative variance came out negative ({d1}, {d2}) at \
                 chord coordinates ({s}, {t})"
            )));
        }
        // Residual cancellation noise near the excision boundary.
        let d1 = d1.max(0.0);
        let d2 = d2.max(0.0);
        let cross = c12 + a * b * rho / om;
        let cond = Matrix2::new(d1, cross, cross, d2);

        let apm = abs_product_moment(mean, cond)?;
        let density = (-self.u * self.u / (1.0 + rho)).exp() / (2.0 * PI * om.sqrt());
        Ok((apm.value * density, apm.abs_error * density))
    }
}

/// Two-point Rice integrand of the crossing-product integral: the expected
/// absolute product of the two directional derivatives given that the field
/// equals `u` at both chord points, times the joint density of the field
/// pair at (u, u). Coordinates are arc lengths along the two lines measured
/// from the intersection point.
///
/// Errors when the two points fall inside the excised diagonal
/// neighborhood of radius [`EXCISION_RADIUS`], where the conditioning
/// covariance degenerates.
pub fn pair_integrand(
    model: &CorrelationModel,
    u: f64,
    pair: &LinePair,
    s: f64,
    t: f64,
) -> Result<f64> {
    if !u.is_finite() {
        return Err(Error::invalid(format!("level must be finite, got {u}")));
    }
    PairKernel::new(model, u, pair).eval(s, t).map(|(v, _)| v)
}

/// Chord of `line` inside `window`, shifted so that zero is the pair's
/// intersection point.
fn centered_chord(window: &Window, line: &Line, p: Vector2<f64>) -> Option<(f64, f64)> {
    let (lo, hi) = window.chord(line)?;
    let tp = p.dot(&line.direction());
    Some((lo - tp, hi - tp))
}

/// Panel edges along one chord axis: the chord ends, a geometric ring of
/// edges growing out of the excised square when it cuts this rectangle, and
/// uniform subdivision so no panel exceeds the kernel's correlation scale.
fn axis_breaks(range: (f64, f64), w: f64, graded: bool) -> Vec<f64> {
    let (a, b) = range;
    let mut edges = vec![a, b];
    if graded {
        let reach = a.abs().max(b.abs());
        let mut r = w;
        while r < reach {
            for c in [-r, r] {
                if a < c && c < b {
                    edges.push(c);
                }
            }
            r *= 2.0;
        }
    }
    edges.sort_unstable_by(f64::total_cmp);
    edges.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    let mut out = Vec::with_capacity(edges.len());
    for win in edges.windows(2) {
        out.push(win[0]);
        let len = win[1] - win[0];
        let parts = (len / MAX_PANEL_LENGTH).ceil() as usize;
        for k in 1..parts {
            out.push(win[0] + len * k as f64 / parts as f64);
        }
    }
    out.push(*edges.last().expect("at least two edges"));
    out
}

/// Tensor-product composite Gauss-Legendre sum over the chord rectangle,
/// skipping nodes inside the excised square (its edges are panel breaks, so
/// panels never straddle it). Returns the integral, the accumulated inner
/// quadrature error, and the number of integrand evaluations.
fn tensor_integral(
    kernel: &PairKernel<'_>,
    s_breaks: &[f64],
    t_breaks: &[f64],
    s_order: usize,
    t_order: usize,
    excised_halfwidth: Option<f64>,
) -> Result<(f64, f64, usize)> {
    let s_nodes = panel_nodes(s_breaks, s_order)?;
    let t_nodes = panel_nodes(t_breaks, t_order)?;
    let mut value = 0.0;
    let mut inner = 0.0;
    let mut evals = 0usize;
    for &(s, ws) in &s_nodes {
        for &(t, wt) in &t_nodes {
            if let Some(w) = excised_halfwidth {
                if s.abs() < w && t.abs() < w {
                    continue;
                }
            }
            let (v, e) = kernel.eval(s, t)?;
            value += ws * wt * v;
            inner += ws * wt * e;
            evals += 1;
        }
    }
    Ok((value, inner, evals))
}

/// Expected product of the crossing counts on the two chords `g1 /\ B1` and
/// `g2 /\ B2`: the double integral of [`pair_integrand`] over the chord
/// rectangle, by composite Gauss-Legendre of the given orders per axis.
///
/// Around the lines' intersection the integrand has an integrable
/// singularity; a square of half-width `EXCISION_RADIUS / sqrt(1 - |v1.v2|)`
/// in chord coordinates (the smallest square containing the excised point
/// neighborhood) is cut out, surrounded by a geometrically graded panel
/// ring, and its possible mass enters `abs_error` as an explicit bias bound.
/// An empty chord gives an exact zero.
pub fn expected_crossing_product(
    model: &CorrelationModel,
    u: f64,
    pair: &LinePair,
    b1: &Window,
    b2: &Window,
    s_order: usize,
    t_order: usize,
) -> Result<EstimateWithError> {
    crossing_product_detailed(model, u, pair, b1, b2, s_order, t_order).map(|(e, _)| e)
}

pub(crate) fn crossing_product_detailed(
    model: &CorrelationModel,
    u: f64,
    pair: &LinePair,
    b1: &Window,
    b2: &Window,
    s_order: usize,
    t_order: usize,
) -> Result<(EstimateWithError, usize)> {
    if !u.is_finite() {
        return Err(Error::invalid(format!("level must be finite, got {u}")));
    }
    if s_order < 2 || t_order < 2 {
        return Err(Error::invalid(format!(
            "quadrature orders must be at least 2, got ({s_order}, {t_order})"
        )));
    }
    let (Some(r1), Some(r2)) = (
        centered_chord(b1, &pair.g1, pair.p),
        centered_chord(b2, &pair.g2, pair.p),
    ) else {
        return Ok((EstimateWithError::new(0.0, 0.0, "empty chord"), 0));
    };

    // Smallest square in (s, t) containing all point pairs within the
    // excision radius: |s v1 - t v2|^2 >= (1 - |v1.v2|)(s^2 + t^2).
    let c = pair.v1.dot(&pair.v2);
    let w = EXCISION_RADIUS / (1.0 - c.abs()).sqrt();
    let excised = r1.0 < w && r1.1 > -w && r2.0 < w && r2.1 > -w;

    let kernel = PairKernel::new(model, u, pair);
    let s_breaks = axis_breaks(r1, w, excised);
    let t_breaks = axis_breaks(r2, w, excised);
    let gate = excised.then_some(w);
    let (full, inner, n_full) =
        tensor_integral(&kernel, &s_breaks, &t_breaks, s_order, t_order, gate)?;
    let (coarse, _, n_coarse) = tensor_integral(
        &kernel,
        &s_breaks,
        &t_breaks,
        s_order / 2 + 1,
        t_order / 2 + 1,
        gate,
    )?;
    let mut abs_error = (full - coarse).abs() + inner;

    let mut method = "line-pair crossing quadrature";
    if excised {
        // Bias bound for the excised square: the integrand grows like
        // K / |s v1 - t v2| toward the center, so with M its maximum on the
        // square boundary, integrating the profile over the square gives at
        // most 2 sqrt(2) pi M w^2; 9 M w^2 rounds that up.
        let mut peak = 0.0f64;
        let mut sampled = false;
        for (s, t) in [
            (-w, -w),
            (-w, 0.0),
            (-w, w),
            (0.0, -w),
            (0.0, w),
            (w, -w),
            (w, 0.0),
            (w, w),
        ] {
            if s >= r1.0 && s <= r1.1 && t >= r2.0 && t <= r2.1 {
                let (v, _) = kernel.eval(s, t)?;
                peak = peak.max(v);
                sampled = true;
            }
        }
        if !sampled {
            return Err(Error::invalid(
                "the excised diagonal neighborhood covers the whole chord rectangle; \
                 windows this close to the intersection point are not supported"
                    .to_string(),
            ));
        }
        abs_error += 9.0 * peak * w * w;
        method = "line-pair crossing quadrature (diagonal excised)";
    }
    Ok((
        EstimateWithError::new(full.max(0.0), abs_error, method),
        n_full + n_coarse,
    ))
}

/// Monte Carlo estimate of the boundary-length second moment
/// `mu2(B1 x B2)` over independent Crofton line pairs: one quarter of the
/// kinematic double integral of the expected crossing product, estimated as
/// the hitting-measure product times the mean of
/// [`expected_crossing_product`] over `pairs` sampled pairs.
///
/// `abs_error` on the result is three standard errors of the pair average
/// plus the mean inner quadrature error. Near-parallel draws (kinematic
/// measure zero) are replaced from an oversampled tail of the same stream.
pub fn second_moment_measure(
    model: &CorrelationModel,
    u: f64,
    b1: &Window,
    b2: &Window,
    pairs: usize,
    seed: u64,
    s_order: usize,
    t_order: usize,
) -> Result<SecondMomentResult> {
    if pairs < 100 {
        return Err(Error::invalid(format!(
            "need at least 100 line pairs for a usable standard error, got {pairs}"
        )));
    }
    let draw = pairs + (pairs / 16).max(8);
    let lines1 = b1.sample_crofton_lines(draw, seed)?;
    let lines2 = b2.sample_crofton_lines(draw, seed.wrapping_add(1))?;
    let accepted: Vec<LinePair> = lines1
        .iter()
        .zip(&lines2)
        .filter_map(|(&(g1, w1), &(g2, w2))| LinePair::weighted(g1, w1, g2, w2).ok())
        .take(pairs)
        .collect();
    if accepted.len() < pairs {
        // Two convex windows cannot force parallelism, so landing here means
        // the near-parallel fraction was far beyond its kinematic measure.
        return Err(Error::Unsupported(format!(
            "only {} of {draw} sampled line pairs were transversal",
            accepted.len()
        )));
    }

    let per_pair: Result<Vec<(EstimateWithError, usize)>> = accepted
        .par_iter()
        .map(|pair| crossing_product_detailed(model, u, pair, b1, b2, s_order, t_order))
        .collect();
    let per_pair = per_pair?;

    // Deterministic reduction in pair order; q averages to the kinematic
    // double integral because each pair is uniform on the product of the
    // two hitting sets, whose measures multiply back in.
    let measure = b1.hitting_measure() * b2.hitting_measure();
    let n = pairs as f64;
    let (mut sum, mut sumsq, mut inner, mut evals) = (0.0, 0.0, 0.0, 0usize);
    for (est, ev) in &per_pair {
        let q = measure * est.value;
        sum += q;
        sumsq += q * q;
        inner += measure * est.abs_error;
        evals += ev;
    }
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    let abs_error = 0.25 * (3.0 * (var / n).sqrt() + inner / n);
    Ok(SecondMomentResult {
        mu2: EstimateWithError::new(0.25 * mean, abs_error, "crofton line-pair sampling"),
        pair_count: pairs,
        eval_count: evals,
    })
}

/// Mean boundary length of the excursion set per unit area, for gradient-
/// isotropic models: by stereology the length intensity is pi/2 times the
/// line-crossing intensity, giving `sqrt(lambda) exp(-u^2/2) / 2` with
/// `lambda` the derivative variance. Direction-dependent gradients have no
/// single crossing intensity and are refused.
pub fn boundary_length_intensity(model: &CorrelationModel, u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(Error::invalid(format!("level must be finite, got {u}")));
    }
    if !model.is_gradient_isotropic(1e-6) {
        return Err(Error::Unsupported(format!(
            "boundary length intensity needs a gradient-isotropic model; {} has \
             direction-dependent crossing intensity",
            model.descriptor()
        )));
    }
    let lambda = 0.5 * model.spectral_moment_matrix().trace();
    Ok(lambda.sqrt() * (-u * u / 2.0).exp() / 2.0)
}
