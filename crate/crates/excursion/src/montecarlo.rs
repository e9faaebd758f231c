//! Brute-force sampling oracles: exact joint Gaussian simulation on
//! discretized segments, chords and grids, with empirical capacity
//! functionals, crossing counts, crossing products and boundary lengths.
//!
//! Everything here validates the analytic engines from a direction that
//! shares none of their machinery. The field is sampled exactly from the
//! dense joint covariance of the discretized point set (one factorization,
//! reused across batches), each functional is read off every sample
//! directly, and `abs_error` carries three binomial or empirical standard
//! errors per the crate convention. All routines are deterministic in
//! (seed, step, N) and independent of the worker count: batch b draws from
//! ChaCha stream b of the seed and batches are reduced in index order.

use crate::covariance::CorrelationModel;
use crate::error::{Error, Result};
use crate::gauss::{standard_normal_matrix, CholeskyFactor, CovarianceMatrix, EstimateWithError};
use crate::geometry::{KSegmentProblem, Line, TwoSegmentProblem, Window};
use nalgebra::{DMatrix, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Hard cap on jointly sampled points: dense factorization stays at desk
/// scale (seconds) below this.
pub const POINT_BUDGET: usize = 4000;

/// Largest allowed discretization step for the sampling operations.
pub const MAX_STEP: f64 = 0.02;

/// Smallest sample count for which the binomial error bars mean anything.
pub const MIN_SAMPLES: usize = 10_000;

/// Samples per batch; one batch is one RNG stream and one matrix product.
const BATCH: usize = 1000;

/// Field values at strictly ordered points along a one-dimensional
/// parametrization (a segment or a chord). Thresholding the values at u is
/// the empirical excursion-set indicator on the path.
#[derive(Clone, Debug)]
pub struct SampledPath {
    params: Vec<f64>,
    values: Vec<f64>,
    step: f64,
}

impl SampledPath {
    pub fn new(params: Vec<f64>, values: Vec<f64>, step: f64) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::invalid("a sampled path needs at least one point".to_string()));
        }
        if params.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} parameters against {} values",
                params.len(),
                values.len()
            )));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("step must be positive and finite, got {step}")));
        }
        if params.iter().any(|p| !p.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("path parameters and values must be finite".to_string()));
        }
        if params.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("path parameters must be strictly increasing".to_string()));
        }
        Ok(SampledPath { params, values, step })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether the path enters the excursion set at level u.
    pub fn exceeds(&self, u: f64) -> bool {
        self.values.iter().any(|&v| v >= u)
    }
}

/// Number of sign changes of (value - u) along the path. A value exactly at
/// u keeps the previous sign, an event of probability zero for continuous
/// marginals; grazing contacts are likewise almost surely absent.
pub fn count_crossings_on_line(path: &SampledPath, u: f64) -> usize {
    count_sign_changes(path.values.iter().copied(), u)
}

fn count_sign_changes<I: IntoIterator<Item = f64>>(values: I, u: f64) -> usize {
    let mut count = 0;
    let mut prev = 0i8;
    for v in values {
        let s = if v > u {
            1
        } else if v < u {
            -1
        } else {
            prev
        };
        if s != 0 && prev != 0 && s != prev {
            count += 1;
        }
        if s != 0 {
            prev = s;
        }
    }
    count
}

/// A bundle of origin-anchored segments with a level and a correlation
/// model; implemented by both analytic problem types so the oracle accepts
/// either directly.
pub trait SegmentBundle {
    fn level(&self) -> f64;
    fn model(&self) -> &CorrelationModel;
    /// (unit direction, length) per segment.
    fn segments(&self) -> Vec<(Vector2<f64>, f64)>;
}

impl SegmentBundle for TwoSegmentProblem {
    fn level(&self) -> f64 {
        self.u
    }

    fn model(&self) -> &CorrelationModel {
        &self.model
    }

    fn segments(&self) -> Vec<(Vector2<f64>, f64)> {
        vec![(self.v1(), self.l1), (self.v2(), self.l2)]
    }
}

impl SegmentBundle for KSegmentProblem {
    fn level(&self) -> f64 {
        self.u
    }

    fn model(&self) -> &CorrelationModel {
        &self.model
    }

    fn segments(&self) -> Vec<(Vector2<f64>, f64)> {
        (0..self.k())
            .map(|j| (self.direction_vec(j), self.lengths[j]))
            .collect()
    }
}

/// Result of [`empirical_capacity_detailed`]: the estimate plus the
/// discretization-bias probe diagnostics the CLI reports.
#[derive(Clone, Debug)]
pub struct CapacityEstimate {
    pub estimate: EstimateWithError,
    /// Largest effective spacing of the accepted grid.
    pub final_step: f64,
    /// Hit-fraction increase from the last grid refinement, measured on
    /// shared draws; a direct reading of the remaining discretization bias
    /// scale. None when the point budget blocked the probe.
    pub probe_delta: Option<f64>,
    /// Accepted grid size including the origin.
    pub points: usize,
    /// True when refinement stopped because the probe moved less than one
    /// standard error, false when the point budget cut it short.
    pub step_halving_stable: bool,
}

/// Fraction of N exact field samples whose maximum over the discretized
/// segment bundle reaches the level.
///
/// The discrete maximum never exceeds the continuous supremum, so the
/// estimate is biased low. The bias is probed by doubling the grid and
/// re-evaluating both grids on the same draws (the coarse grid is a subset
/// of the fine one, so the fraction difference is the bias between levels,
/// free of sampling noise); refinement continues until the probe moves less
/// than one standard error or the point budget is reached. The returned
/// `abs_error` is three binomial standard errors of the accepted estimate.
pub fn empirical_capacity(
    problem: &impl SegmentBundle,
    step: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    Ok(empirical_capacity_detailed(problem, step, n_samples, seed)?.estimate)
}

/// As [`empirical_capacity`], returning the bias-probe diagnostics as well.
pub fn empirical_capacity_detailed(
    problem: &impl SegmentBundle,
    step: f64,
    n_samples: usize,
    seed: u64,
) -> Result<CapacityEstimate> {
    validate_sampling_params(step, n_samples)?;
    let u = problem.level();
    let segments = problem.segments();
    let mut counts: Vec<usize> = segments
        .iter()
        .map(|&(_, l)| (l / step).ceil() as usize)
        .collect();
    let total = |c: &[usize]| 1 + c.iter().sum::<usize>();
    if total(&counts) > POINT_BUDGET {
        return Err(Error::ResourceLimit(format!(
            "{} discretized points exceed the {POINT_BUDGET}-point budget",
            total(&counts)
        )));
    }

    let binom_se = |p: f64| (p * (1.0 - p) / n_samples as f64).sqrt();
    let mut level = 0u64;
    loop {
        let fine: Vec<usize> = counts.iter().map(|&n| 2 * n).collect();
        let can_refine = total(&fine) <= POINT_BUDGET && total(&fine) > total(&counts);
        if !can_refine {
            // Nothing to probe against: either the bundle is a single point
            // or the budget is already tight. Evaluate the current grid.
            let points = bundle_points(&segments, &counts);
            let factor = field_law(problem.model(), &points)?;
            let hits: usize = sample_batches(&factor, n_samples, seed, level << 32, |x| {
                count_hits(x, u)
            })
            .into_iter()
            .sum();
            let p = hits as f64 / n_samples as f64;
            let stable = total(&fine) == total(&counts);
            let method = if stable {
                "discretized-max sampling (pointlike bundle)"
            } else {
                "discretized-max sampling (point budget reached)"
            };
            return Ok(CapacityEstimate {
                estimate: EstimateWithError::new(p, 3.0 * binom_se(p), method),
                final_step: effective_step(&segments, &counts),
                probe_delta: None,
                points: total(&counts),
                step_halving_stable: stable,
            });
        }

        // Evaluate the refined grid and its embedded coarse subset on the
        // same draws.
        let points = bundle_points(&segments, &fine);
        let coarse_idx = coarse_indices(&counts);
        let factor = field_law(problem.model(), &points)?;
        let pair: Vec<(usize, usize)> =
            sample_batches(&factor, n_samples, seed, level << 32, |x| {
                count_nested_hits(x, u, &coarse_idx)
            });
        let (hits_fine, hits_coarse) = pair
            .into_iter()
            .fold((0usize, 0usize), |(f, c), (df, dc)| (f + df, c + dc));
        let p_fine = hits_fine as f64 / n_samples as f64;
        let delta = (hits_fine - hits_coarse) as f64 / n_samples as f64;
        let se = binom_se(p_fine);
        if delta < se {
            return Ok(CapacityEstimate {
                estimate: EstimateWithError::new(
                    p_fine,
                    3.0 * se,
                    "discretized-max sampling (bias probe passed)",
                ),
                final_step: effective_step(&segments, &fine),
                probe_delta: Some(delta),
                points: total(&fine),
                step_halving_stable: true,
            });
        }
        counts = fine;
        level += 1;
    }
}

fn validate_sampling_params(step: f64, n_samples: usize) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be positive and finite, got {step}")));
    }
    if step > MAX_STEP + 1e-12 {
        return Err(Error::invalid(format!("step {step} exceeds the maximum {MAX_STEP}")));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "sample count {n_samples} below the minimum {MIN_SAMPLES}"
        )));
    }
    Ok(())
}

/// Origin plus `counts[j]` equally spaced points along each segment, the
/// segment tip always included.
fn bundle_points(segments: &[(Vector2<f64>, f64)], counts: &[usize]) -> Vec<Vector2<f64>> {
    let mut pts = vec![Vector2::zeros()];
    for (&(v, l), &n) in segments.iter().zip(counts) {
        for i in 1..=n {
            pts.push((i as f64 * l / n as f64) * v);
        }
    }
    pts
}

/// Flat indices of the `counts` grid inside the doubled grid produced by
/// `bundle_points(segments, 2 * counts)`.
fn coarse_indices(counts: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize];
    let mut offset = 1;
    for &n in counts {
        for i in 1..=n {
            idx.push(offset + 2 * i - 1);
        }
        offset += 2 * n;
    }
    idx
}

fn effective_step(segments: &[(Vector2<f64>, f64)], counts: &[usize]) -> f64 {
    segments
        .iter()
        .zip(counts)
        .filter(|&(_, &n)| n > 0)
        .map(|(&(_, l), &n)| l / n as f64)
        .fold(0.0, f64::max)
}

fn count_hits(x: &DMatrix<f64>, u: f64) -> usize {
    columns(x).filter(|col| col.iter().any(|&v| v >= u)).count()
}

fn count_nested_hits(x: &DMatrix<f64>, u: f64, coarse_idx: &[usize]) -> (usize, usize) {
    let mut fine = 0;
    let mut coarse = 0;
    for col in columns(x) {
        if col.iter().any(|&v| v >= u) {
            fine += 1;
            if coarse_idx.iter().any(|&i| col[i] >= u) {
                coarse += 1;
            }
        }
    }
    (fine, coarse)
}

fn columns(x: &DMatrix<f64>) -> impl Iterator<Item = &[f64]> {
    let dim = x.nrows();
    x.as_slice().chunks_exact(dim)
}

/// Mean number of level-u crossings per unit length along a straight chord,
/// from N exact path samples. The Rice intensity of a unit-variance field
/// is sqrt(lambda) exp(-u^2/2)/pi per unit length.
pub fn empirical_crossing_intensity(
    model: &CorrelationModel,
    u: f64,
    length: f64,
    step: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    validate_sampling_params(step, n_samples)?;
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::invalid(format!("chord length must be positive, got {length}")));
    }
    let n = (length / step).ceil() as usize;
    let points: Vec<Vector2<f64>> = (0..=n)
        .map(|i| Vector2::new(i as f64 * length / n as f64, 0.0))
        .collect();
    let factor = field_law(model, &points)?;
    let moments = sample_batches(&factor, n_samples, seed, 0, |x| {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for col in columns(x) {
            let c = count_sign_changes(col.iter().copied(), u) as f64;
            sum += c;
            sumsq += c * c;
        }
        (sum, sumsq)
    });
    let (value, abs_error) = mean_with_3se(&moments, n_samples);
    Ok(EstimateWithError::new(
        value / length,
        abs_error / length,
        "sampled chord crossings",
    ))
}

/// Mean of C(g1 within B1) * C(g2 within B2) over N field samples, with both
/// chords discretized and sampled jointly under one covariance: crossing
/// counts on intersecting or nearby lines are dependent, and that dependence
/// is the whole point of the second-moment pipeline this validates.
#[allow(clippy::too_many_arguments)]
pub fn empirical_crossing_product(
    model: &CorrelationModel,
    u: f64,
    g1: &Line,
    b1: &Window,
    g2: &Line,
    b2: &Window,
    step: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    validate_sampling_params(step, n_samples)?;
    let (Some(chord1), Some(chord2)) = (b1.chord(g1), b2.chord(g2)) else {
        return Ok(EstimateWithError::new(0.0, 0.0, "empty chord"));
    };
    let pts1 = chord_points(g1, chord1, step);
    let pts2 = chord_points(g2, chord2, step);
    let split = pts1.len();
    let points: Vec<Vector2<f64>> = pts1.into_iter().chain(pts2).collect();
    let factor = field_law(model, &points)?;
    let moments = sample_batches(&factor, n_samples, seed, 0, |x| {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for col in columns(x) {
            let c1 = count_sign_changes(col[..split].iter().copied(), u);
            let c2 = count_sign_changes(col[split..].iter().copied(), u);
            let p = (c1 * c2) as f64;
            sum += p;
            sumsq += p * p;
        }
        (sum, sumsq)
    });
    let (value, abs_error) = mean_with_3se(&moments, n_samples);
    Ok(EstimateWithError::new(
        value,
        abs_error,
        "joint sampled crossing product",
    ))
}

fn chord_points(g: &Line, (t0, t1): (f64, f64), step: f64) -> Vec<Vector2<f64>> {
    let len = t1 - t0;
    let n = ((len / step).ceil() as usize).max(1);
    (0..=n)
        .map(|i| g.point_at(t0 + i as f64 * len / n as f64))
        .collect()
}

/// Pooled mean and three standard errors of the mean from per-batch
/// (sum, sum of squares) pairs, reduced in batch order.
fn mean_with_3se(batch_moments: &[(f64, f64)], n_samples: usize) -> (f64, f64) {
    let (sum, sumsq) = batch_moments
        .iter()
        .fold((0.0, 0.0), |(s, q), &(ds, dq)| (s + ds, q + dq));
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, 3.0 * (var / n).sqrt())
}

/// Validated covariance factor of the field restricted to `points`.
fn field_law(model: &CorrelationModel, points: &[Vector2<f64>]) -> Result<CholeskyFactor> {
    let dim = points.len();
    if dim == 0 {
        return Err(Error::invalid("empty point set".to_string()));
    }
    if dim > POINT_BUDGET {
        return Err(Error::ResourceLimit(format!(
            "{dim} sample points exceed the {POINT_BUDGET}-point budget"
        )));
    }
    CovarianceMatrix::from_fn(dim, |i, j| model.r(points[i] - points[j]))?.factor()
}

/// Runs `per_batch` over exact field samples in fixed-size batches and
/// returns the results in batch order. Batch b draws from stream
/// `stream_base + b` of the seed, so the output does not depend on how
/// batches are scheduled across workers.
fn sample_batches<T: Send>(
    factor: &CholeskyFactor,
    n_samples: usize,
    seed: u64,
    stream_base: u64,
    per_batch: impl Fn(&DMatrix<f64>) -> T + Sync,
) -> Vec<T> {
    let dim = factor.dim();
    let n_batches = n_samples.div_ceil(BATCH);
    (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let size = BATCH.min(n_samples - b * BATCH);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + b as u64);
            let z = standard_normal_matrix(dim, size, &mut rng);
            per_batch(&(factor.lower() * z))
        })
        .collect()
}

/// One exact field sample on a rectangular grid. Auxiliary plumbing for the
/// full-field oracle below; the public operations all work on 1-D point
/// sets.
struct FieldSample {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl FieldSample {
    fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// Marching-squares contour length at level u, counting a cell segment
    /// when its midpoint lies in `window`. Linear interpolation on cell
    /// edges; the ambiguous saddle cases are resolved by the cell-center
    /// average.
    fn boundary_length_in(&self, u: f64, window: &Window) -> f64 {
        let frac = |a: f64, b: f64| ((u - a) / (b - a)).clamp(0.0, 1.0);
        let mut total = 0.0;
        for iy in 0..self.ny - 1 {
            for ix in 0..self.nx - 1 {
                let c0 = self.value(ix, iy);
                let c1 = self.value(ix + 1, iy);
                let c2 = self.value(ix + 1, iy + 1);
                let c3 = self.value(ix, iy + 1);
                let mask = usize::from(c0 >= u)
                    | usize::from(c1 >= u) << 1
                    | usize::from(c2 >= u) << 2
                    | usize::from(c3 >= u) << 3;
                if mask == 0 || mask == 15 {
                    continue;
                }
                let x = self.x0 + ix as f64 * self.dx;
                let y = self.y0 + iy as f64 * self.dy;
                let e0 = Vector2::new(x + self.dx * frac(c0, c1), y);
                let e1 = Vector2::new(x + self.dx, y + self.dy * frac(c1, c2));
                let e2 = Vector2::new(x + self.dx * frac(c3, c2), y + self.dy);
                let e3 = Vector2::new(x, y + self.dy * frac(c0, c3));
                let segments: &[(Vector2<f64>, Vector2<f64>)] = match mask {
                    1 | 14 => &[(e3, e0)],
                    2 | 13 => &[(e0, e1)],
                    3 | 12 => &[(e3, e1)],
                    4 | 11 => &[(e1, e2)],
                    6 | 9 => &[(e0, e2)],
                    8 | 7 => &[(e2, e3)],
                    5 => {
                        if 0.25 * (c0 + c1 + c2 + c3) >= u {
                            &[(e0, e1), (e2, e3)]
                        } else {
                            &[(e3, e0), (e1, e2)]
                        }
                    }
                    10 => {
                        if 0.25 * (c0 + c1 + c2 + c3) >= u {
                            &[(e3, e0), (e1, e2)]
                        } else {
                            &[(e0, e1), (e2, e3)]
                        }
                    }
                    _ => unreachable!(),
                };
                for &(p, q) in segments {
                    if window.contains(0.5 * (p + q)) {
                        total += (p - q).norm();
                    }
                }
            }
        }
        total
    }
}

/// Shared grid-sampling loop of the full-field oracle: draws exact field
/// samples on the grid and folds `per_sample`'s value into (mean, 3 se).
fn grid_sample_mean(
    model: &CorrelationModel,
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    n_samples: usize,
    seed: u64,
    per_sample: impl Fn(&FieldSample) -> f64 + Sync,
) -> Result<(f64, f64)> {
    if n_samples < 100 {
        return Err(Error::invalid(format!(
            "the grid oracle needs at least 100 samples, got {n_samples}"
        )));
    }
    let points: Vec<Vector2<f64>> = (0..nx * ny)
        .map(|p| Vector2::new(x0 + (p % nx) as f64 * dx, y0 + (p / nx) as f64 * dy))
        .collect();
    let factor = field_law(model, &points)?;
    let moments = sample_batches(&factor, n_samples, seed, 0, |x| {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for col in columns(x) {
            let sample = FieldSample {
                x0,
                y0,
                dx,
                dy,
                nx,
                ny,
                values: col.to_vec(),
            };
            let v = per_sample(&sample);
            sum += v;
            sumsq += v * v;
        }
        (sum, sumsq)
    });
    Ok(mean_with_3se(&moments, n_samples))
}

/// Full-field oracle for the mean boundary length per unit area: exact grid
/// samples over an axis-aligned square of half-width `half`, marching-squares
/// length divided by the window area. Auxiliary validation routine at
/// desk-scale resolution, not a tuned field simulator; the grid must fit the
/// point budget.
pub fn empirical_length_intensity(
    model: &CorrelationModel,
    u: f64,
    half: f64,
    step: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    if !(half > 0.0 && step > 0.0) {
        return Err(Error::invalid("window half-width and step must be positive".to_string()));
    }
    let n = ((2.0 * half / step).ceil() as usize).max(2);
    let d = 2.0 * half / n as f64;
    let window = Window::rect(Vector2::new(-half, -half), Vector2::new(half, half))?;
    let area = window.area();
    let (mean, err3) = grid_sample_mean(
        model,
        -half,
        -half,
        d,
        d,
        n + 1,
        n + 1,
        n_samples,
        seed,
        |sample| sample.boundary_length_in(u, &window),
    )?;
    Ok(EstimateWithError::new(
        mean / area,
        err3 / area,
        "full-field marching squares",
    ))
}

/// Full-field oracle for E[length in B1 * length in B2]: one grid covering
/// both windows, marching-squares lengths per window per sample. Auxiliary
/// validation routine; the grid must fit the point budget, so only
/// desk-scale window pairs are reachable.
pub fn empirical_length_second_moment(
    model: &CorrelationModel,
    u: f64,
    b1: &Window,
    b2: &Window,
    step: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be positive and finite, got {step}")));
    }
    let (lo1, hi1) = b1.bounding_box();
    let (lo2, hi2) = b2.bounding_box();
    let lo = Vector2::new(lo1.x.min(lo2.x) - step, lo1.y.min(lo2.y) - step);
    let hi = Vector2::new(hi1.x.max(hi2.x) + step, hi1.y.max(hi2.y) + step);
    let nx = (((hi.x - lo.x) / step).ceil() as usize).max(2);
    let ny = (((hi.y - lo.y) / step).ceil() as usize).max(2);
    let dx = (hi.x - lo.x) / nx as f64;
    let dy = (hi.y - lo.y) / ny as f64;
    let (mean, err3) = grid_sample_mean(
        model,
        lo.x,
        lo.y,
        dx,
        dy,
        nx + 1,
        ny + 1,
        n_samples,
        seed,
        |sample| sample.boundary_length_in(u, b1) * sample.boundary_length_in(u, b2),
    )?;
    Ok(EstimateWithError::new(
        mean,
        err3,
        "full-field marching squares",
    ))
}
