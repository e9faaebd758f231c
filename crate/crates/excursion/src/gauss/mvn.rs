//! Multivariate normal CDF by separation of variables with a randomized
//! rank-1 lattice rule (the Genz construction), plus a joint lattice rule
//! for the |Z|-weighted moment of a CDF whose bounds move linearly in a
//! scalar standard normal Z.
//!
//! The variables are greedily reordered so the most binding constraints come
//! first, the covariance is Cholesky-factored with that ordering, and the
//! resulting unit-cube integrand is averaged over a sqrt-prime lattice under
//! eight random shifts; the spread of the shift means gives the error bound.

use super::matrix::CovarianceMatrix;
use super::{fast_norm_quantile, norm_cdf, norm_pdf, EstimateWithError};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default stream for the shift randomization; fixed so that unseeded calls
/// are reproducible run to run.
pub const DEFAULT_QMC_SEED: u64 = 0x51ab_c0ff_ee00_2718;
pub(crate) const MAX_DIM: usize = 2000;
const SHIFTS: usize = 8;
const START_POINTS: usize = 256;
const MAX_POINTS_PER_SHIFT: usize = 1 << 17;
const ERROR_FLOOR: f64 = 1e-8;
/// Standardized bounds at least this far in the upper tail cannot bind: each
/// keeps a factor >= 1 - 1e-17, so dropping them deflates the result by less
/// than dim * 1e-17, far below every tolerance in use.
const INACTIVE_BOUND: f64 = 8.5;
/// A standardized bound this far in the lower tail forces the probability
/// below the smallest positive double.
const HOPELESS_BOUND: f64 = -38.0;
/// Largest |Z| the Rayleigh coordinate can reach under the uniform clamp
/// sqrt(-2 ln 1e-300).
const Z_REACH: f64 = 37.2;

/// P(X <= upper) for X ~ N(0, cov), to absolute error about
/// max(rel_tol * value, 1e-8). Coordinates with upper = +inf are dropped;
/// degenerate coordinates (variance below the degeneracy cutoff) contribute
/// factor 1 when upper >= 0 and collapse the probability to 0 otherwise.
pub fn mvn_cdf(upper: &[f64], cov: &CovarianceMatrix, rel_tol: f64) -> Result<EstimateWithError> {
    mvn_cdf_seeded(upper, cov, rel_tol, DEFAULT_QMC_SEED)
}

/// As [`mvn_cdf`], with the shift-randomization stream chosen by the caller
/// so that whole pipelines can be replayed bit for bit.
pub fn mvn_cdf_seeded(
    upper: &[f64],
    cov: &CovarianceMatrix,
    rel_tol: f64,
    seed: u64,
) -> Result<EstimateWithError> {
    if upper.len() != cov.dim() {
        return Err(Error::invalid(format!(
            "upper bound length {} does not match covariance dimension {}",
            upper.len(),
            cov.dim()
        )));
    }
    if upper.iter().any(|u| u.is_nan()) {
        return Err(Error::invalid("upper bounds must not be NaN".to_string()));
    }
    if !(rel_tol >= 0.0) || !rel_tol.is_finite() {
        return Err(Error::invalid(format!(
            "relative tolerance must be finite and >= 0, got {rel_tol}"
        )));
    }
    let exact = |v: f64| EstimateWithError::new(v, 0.0, "exact");
    if upper.iter().any(|&u| u == f64::NEG_INFINITY) {
        return Ok(exact(0.0));
    }
    // Standardize the finite, nondegenerate coordinates and resolve the rest:
    // bounds past the inactive threshold hold surely, bounds past the
    // hopeless threshold fail surely.
    let mut idx = Vec::with_capacity(upper.len());
    let mut b = Vec::with_capacity(upper.len());
    let mut sd = Vec::with_capacity(upper.len());
    for (i, &u) in upper.iter().enumerate() {
        if u == f64::INFINITY {
            continue;
        }
        if cov.is_degenerate(i) {
            if u < 0.0 {
                return Ok(exact(0.0));
            }
            continue;
        }
        let s = cov.variance(i).sqrt();
        let bi = u / s;
        if bi <= HOPELESS_BOUND {
            return Ok(exact(0.0));
        }
        if bi >= INACTIVE_BOUND {
            continue;
        }
        idx.push(i);
        b.push(bi);
        sd.push(s);
    }
    let m = idx.len();
    if m == 0 {
        return Ok(EstimateWithError::new(1.0, 1e-15, "exact"));
    }
    if m == 1 {
        return Ok(EstimateWithError::new(norm_cdf(b[0]), 1e-15, "exact"));
    }
    if m > MAX_DIM {
        return Err(Error::ResourceLimit(format!(
            "MVN CDF dimension {m} exceeds the cap {MAX_DIM}"
        )));
    }

    // Scales only relabel the bounds, so work on the correlation matrix.
    let corr = DMatrix::from_fn(m, m, |r, c| cov.entry(idx[r], idx[c]) / (sd[r] * sd[c]));
    let (fact, b, _slope) = reordered_cholesky_with_jitter(&corr, &b, &vec![0.0; m])?;

    let mut y = vec![0.0; m];
    let integrand = move |x: &[f64]| cdf_integrand(x, &fact, &b, &mut y);
    Ok(adaptive_lattice(
        m - 1,
        seed,
        rel_tol,
        ERROR_FLOOR,
        1.0,
        1.0,
        "genz-qmc",
        integrand,
    ))
}

/// E[|Z| P(X <= base + slope Z)] for a scalar standard normal Z independent
/// of X ~ N(0, cov), to absolute error about max(rel_tol * value, abs_tol).
///
/// One lattice rule integrates Z jointly with the conditioned coordinates:
/// |z| phi(z) dz is the Rayleigh(1) measure up to the constant 1/sqrt(2 pi),
/// so the leading lattice coordinate drives a Rayleigh draw R = sqrt(-2 ln v)
/// and each point evaluates the Genz recursion at +R and -R with shared
/// remaining coordinates. That folds the weight in analytically instead of
/// layering an outer quadrature over Z on top of one CDF call per node.
///
/// Degenerate coordinates (variance below the cutoff) become half-line gates
/// on Z and are intersected analytically; if no nondegenerate coordinate
/// survives, the gated moment has a closed form and is returned exactly.
pub fn mvn_cdf_abs_moment(
    base: &[f64],
    slope: &[f64],
    cov: &CovarianceMatrix,
    rel_tol: f64,
    abs_tol: f64,
    seed: u64,
) -> Result<EstimateWithError> {
    if base.len() != cov.dim() || slope.len() != cov.dim() {
        return Err(Error::invalid(format!(
            "base length {} and slope length {} must match covariance dimension {}",
            base.len(),
            slope.len(),
            cov.dim()
        )));
    }
    if base.iter().any(|v| v.is_nan()) || slope.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "base bounds must not be NaN and slopes must be finite".to_string(),
        ));
    }
    if !(rel_tol >= 0.0) || !rel_tol.is_finite() || !(abs_tol >= 0.0) || !abs_tol.is_finite() {
        return Err(Error::invalid(format!(
            "tolerances must be finite and >= 0, got rel {rel_tol} abs {abs_tol}"
        )));
    }
    let exact = |v: f64| EstimateWithError::new(v, 1e-15, "exact");
    if base.iter().any(|&v| v == f64::NEG_INFINITY) {
        return Ok(exact(0.0));
    }

    // Degenerate coordinates gate Z to a half line; the rest standardize.
    // Constraints that cannot bind over the reachable |Z| are dropped, and
    // constraints that cannot hold zero the whole expectation.
    let mut gate_lo = f64::NEG_INFINITY;
    let mut gate_hi = f64::INFINITY;
    let mut idx = Vec::with_capacity(base.len());
    let mut bs = Vec::with_capacity(base.len());
    let mut ss = Vec::with_capacity(base.len());
    let mut sd = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        if base[i] == f64::INFINITY {
            continue;
        }
        if cov.is_degenerate(i) {
            if slope[i] == 0.0 {
                if base[i] < 0.0 {
                    return Ok(exact(0.0));
                }
                continue;
            }
            let cut = -base[i] / slope[i];
            if slope[i] > 0.0 {
                gate_lo = gate_lo.max(cut);
            } else {
                gate_hi = gate_hi.min(cut);
            }
            continue;
        }
        let s = cov.variance(i).sqrt();
        let b = base[i] / s;
        let sl = slope[i] / s;
        if b + sl.abs() * Z_REACH <= HOPELESS_BOUND {
            return Ok(exact(0.0));
        }
        if b - sl.abs() * Z_REACH >= INACTIVE_BOUND {
            continue;
        }
        idx.push(i);
        bs.push(b);
        ss.push(sl);
        sd.push(s);
    }
    if !(gate_lo < gate_hi) {
        return Ok(exact(0.0));
    }
    let m = idx.len();
    if m == 0 {
        return Ok(exact(abs_z_mass(gate_lo, gate_hi)));
    }
    if m > MAX_DIM {
        return Err(Error::ResourceLimit(format!(
            "joint lattice dimension {m} exceeds the cap {MAX_DIM}"
        )));
    }

    let corr = DMatrix::from_fn(m, m, |r, c| cov.entry(idx[r], idx[c]) / (sd[r] * sd[c]));
    let (fact, bs, ss) = reordered_cholesky_with_jitter(&corr, &bs, &ss)?;

    let scale = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut y = vec![0.0; m];
    let integrand = move |x: &[f64]| {
        let r = (-2.0 * x[0].max(1e-300).ln()).sqrt();
        let mut total = 0.0;
        for &z in &[r, -r] {
            if z < gate_lo || z > gate_hi {
                continue;
            }
            let mut w = 1.0;
            for i in 0..m {
                let row = fact.row(i);
                let mut num = bs[i] + ss[i] * z;
                for (l, yk) in row.iter().zip(&y[..i]) {
                    num -= l * yk;
                }
                let e = conditional_factor(num, fact.diag(i));
                if e <= 1e-300 {
                    w = 0.0;
                    break;
                }
                if i + 1 < m {
                    let p = (e * x[i + 1]).clamp(1e-300, 1.0 - 1e-16);
                    y[i] = fast_norm_quantile(p);
                }
                w *= e;
            }
            total += w;
        }
        total
    };
    Ok(adaptive_lattice(
        m,
        seed,
        rel_tol,
        abs_tol.max(1e-12),
        2.0,
        scale,
        "joint-lattice",
        integrand,
    ))
}

/// Integral of |z| phi(z) over [lo, hi]; phi' = -z phi gives the closed form.
fn abs_z_mass(lo: f64, hi: f64) -> f64 {
    if !(lo < hi) {
        return 0.0;
    }
    if hi <= 0.0 {
        norm_pdf(hi) - norm_pdf(lo)
    } else if lo >= 0.0 {
        norm_pdf(lo) - norm_pdf(hi)
    } else {
        2.0 * norm_pdf(0.0) - norm_pdf(lo) - norm_pdf(hi)
    }
}

/// Lower-triangular factor in row-major flat storage so the inner dot
/// products run over contiguous slices.
struct Factor {
    m: usize,
    data: Vec<f64>,
}

impl Factor {
    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..i * self.m + i]
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        self.data[i * self.m + i]
    }
}

#[inline]
fn conditional_factor(num: f64, lii: f64) -> f64 {
    if lii > 1e-150 {
        norm_cdf(num / lii)
    } else if num >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Greedy variable-reordering Cholesky. The slope vector rides along through
/// the permutation. Returns None when a conditional variance is negative
/// beyond rounding, so the caller can escalate jitter.
fn reordered_cholesky(
    corr: &DMatrix<f64>,
    upper: &[f64],
    slope: &[f64],
) -> Option<(Factor, Vec<f64>, Vec<f64>)> {
    let m = upper.len();
    let mut a = corr.clone();
    let mut b = upper.to_vec();
    let mut s = slope.to_vec();
    let mut ell = vec![0.0; m * m];
    // Truncated-normal means of the already-ordered coordinates, used only to
    // steer the ordering; the greedy score takes the bounds at Z = 0.
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut best = i;
        let mut best_p = f64::INFINITY;
        for j in i..m {
            let mut s2 = a[(j, j)];
            let mut num = b[j];
            for k in 0..i {
                s2 -= ell[j * m + k] * ell[j * m + k];
                num -= ell[j * m + k] * y[k];
            }
            let p = if s2 > 1e-300 {
                norm_cdf(num / s2.sqrt())
            } else if num >= 0.0 {
                1.0
            } else {
                0.0
            };
            if p < best_p {
                best_p = p;
                best = j;
            }
        }
        if best != i {
            a.swap_rows(i, best);
            a.swap_columns(i, best);
            b.swap(i, best);
            s.swap(i, best);
            for k in 0..i {
                ell.swap(i * m + k, best * m + k);
            }
        }
        let mut d = a[(i, i)];
        for k in 0..i {
            d -= ell[i * m + k] * ell[i * m + k];
        }
        if d < -1e-8 {
            return None;
        }
        let lii = d.max(0.0).sqrt();
        ell[i * m + i] = lii;
        let mut num = b[i];
        for k in 0..i {
            num -= ell[i * m + k] * y[k];
        }
        if lii > 1e-150 {
            for j in i + 1..m {
                let mut sj = a[(j, i)];
                for k in 0..i {
                    sj -= ell[j * m + k] * ell[i * m + k];
                }
                ell[j * m + i] = sj / lii;
            }
            let z = num / lii;
            y[i] = if z < -8.0 {
                // Mills-ratio asymptote of the truncated mean.
                z + 1.0 / z
            } else {
                let e = norm_cdf(z);
                if e > 0.0 {
                    -norm_pdf(z) / e
                } else {
                    0.0
                }
            };
        } else {
            // Deterministic given its predecessors: a PSD column with zero
            // diagonal is zero below the diagonal too, so this placeholder
            // never feeds later rows.
            y[i] = 0.0;
        }
    }
    Some((Factor { m, data: ell }, b, s))
}

fn reordered_cholesky_with_jitter(
    corr: &DMatrix<f64>,
    upper: &[f64],
    slope: &[f64],
) -> Result<(Factor, Vec<f64>, Vec<f64>)> {
    if let Some(out) = reordered_cholesky(corr, upper, slope) {
        return Ok(out);
    }
    let mut jitter = 1e-12;
    while jitter <= 1.000_001e-6 {
        let mut c = corr.clone();
        for i in 0..c.nrows() {
            c[(i, i)] += jitter;
        }
        if let Some(out) = reordered_cholesky(&c, upper, slope) {
            return Ok(out);
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization(
        "correlation matrix not PSD within the jitter budget".to_string(),
    ))
}

/// The separated integrand over the unit cube: sequential conditioning along
/// the Cholesky rows, each uniform coordinate mapped through the conditional
/// normal quantile.
fn cdf_integrand(x: &[f64], fact: &Factor, b: &[f64], y: &mut [f64]) -> f64 {
    let m = b.len();
    let mut w = 1.0;
    for i in 0..m {
        let row = fact.row(i);
        let mut num = b[i];
        for (l, yk) in row.iter().zip(&y[..i]) {
            num -= l * yk;
        }
        let e = conditional_factor(num, fact.diag(i));
        if i + 1 < m {
            if e <= 1e-300 {
                return 0.0;
            }
            let p = (e * x[i]).clamp(1e-300, 1.0 - 1e-16);
            y[i] = fast_norm_quantile(p);
        }
        w *= e;
    }
    w
}

/// Running state of the shifted sqrt-prime lattice: per-shift partial sums so
/// the point count can be doubled without recomputation.
struct ShiftedLattice {
    gens: Vec<f64>,
    shifts: Vec<Vec<f64>>,
    sums: [f64; SHIFTS],
    count: usize,
}

impl ShiftedLattice {
    fn new(dims: usize, seed: u64) -> Self {
        let gens = first_primes(dims)
            .into_iter()
            .map(|p| (p as f64).sqrt())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifts = (0..SHIFTS)
            .map(|_| (0..dims).map(|_| rng.gen::<f64>()).collect())
            .collect();
        ShiftedLattice {
            gens,
            shifts,
            sums: [0.0; SHIFTS],
            count: 0,
        }
    }

    fn extend_to<F: FnMut(&[f64]) -> f64>(&mut self, n: usize, f: &mut F) {
        let dims = self.gens.len();
        let mut x = vec![0.0; dims];
        for (s, shift) in self.shifts.iter().enumerate() {
            let mut acc = 0.0;
            for idx in self.count + 1..=n {
                for k in 0..dims {
                    let v = (idx as f64 * self.gens[k] + shift[k]).fract();
                    // Tent transform periodizes the integrand on the lattice.
                    x[k] = (2.0 * v - 1.0).abs();
                }
                acc += f(&x);
            }
            self.sums[s] += acc;
        }
        self.count = n;
    }

    fn estimate(&self, clamp_hi: f64) -> (f64, f64) {
        let means: Vec<f64> = self.sums.iter().map(|s| s / self.count as f64).collect();
        let mean = means.iter().sum::<f64>() / SHIFTS as f64;
        let var = means.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (SHIFTS as f64 * (SHIFTS - 1) as f64);
        (mean.clamp(0.0, clamp_hi), 3.0 * var.sqrt())
    }
}

/// Doubles the lattice until the shift spread meets the target
/// max(rel_tol * |value|, abs_floor) or the point budget runs out.
#[allow(clippy::too_many_arguments)]
fn adaptive_lattice<F: FnMut(&[f64]) -> f64>(
    dims: usize,
    seed: u64,
    rel_tol: f64,
    abs_floor: f64,
    clamp_hi: f64,
    scale: f64,
    method: &'static str,
    mut f: F,
) -> EstimateWithError {
    let mut lat = ShiftedLattice::new(dims, seed);
    let mut n = START_POINTS.max(8 * dims);
    loop {
        lat.extend_to(n, &mut f);
        let (mean, spread) = lat.estimate(clamp_hi);
        let (value, err) = (scale * mean, scale * spread);
        let target = (rel_tol * value.abs()).max(abs_floor);
        if err <= target || n >= MAX_POINTS_PER_SHIFT {
            return EstimateWithError::new(value, err, method);
        }
        n *= 2;
    }
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes: Vec<u64> = Vec::with_capacity(count);
    let mut n = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|&&p| p * p <= n).all(|&p| n % p != 0) {
            primes.push(n);
        }
        n += 1;
    }
    primes
}
