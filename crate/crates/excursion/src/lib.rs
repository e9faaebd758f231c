//! Excursion-set functionals of stationary Gaussian random fields on the plane.
//!
//! A centered, unit-variance, C^1 stationary Gaussian field `X` on R^2 and a level
//! `u` define the excursion set `A_u = {x : X(x) >= u}`. This crate computes, for
//! bundles of line segments `K` anchored at the origin:
//!
//! * the capacity functional `T(K) = P(A_u ∩ K ≠ ∅)`, by two independent exact
//!   reductions: a sweeping-line decomposition for two segments ([`capacity2`])
//!   and a growing-circle decomposition for k segments ([`capacityk`]);
//! * the second moment of the boundary length of `A_u` in a pair of windows, by
//!   a Crofton line-pair reduction to two-point crossing intensities ([`moments`]);
//! * brute-force Monte Carlo estimates of the same quantities from exact joint
//!   simulation of the field on discretized segments ([`montecarlo`]), used as
//!   the internal oracle for everything above.
//!
//! Both analytic engines reduce to Gaussian-regression conditional expectations
//! evaluated by quadrature over multivariate normal CDFs; the shared numerical
//! kernel lives in [`gauss`]. Correlation models and their derivatives are in
//! [`covariance`]; segment bundles, lines, windows and the Crofton sampler in
//! [`geometry`].
//!
//! All computations are deterministic: Monte Carlo draws come from counter-based
//! seeded streams reduced in index order, so results do not depend on thread
//! count.

pub mod capacity2;
pub mod capacityk;
pub mod covariance;
pub mod error;
pub mod gauss;
pub mod geometry;
pub mod moments;
pub mod montecarlo;

/// The linear algebra backbone, re-exported so callers can build the vector
/// and matrix arguments without pinning a matching nalgebra version.
pub use nalgebra;

/// Crate version, for embedding into result records.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use capacity2::{capacity_two_segments, capacity_two_segments_with, SolverOptions};
pub use capacityk::{capacity_k_segments, capacity_k_segments_with, joint_survival_k};
pub use montecarlo::empirical_capacity;
pub use covariance::CorrelationModel;
pub use error::{Error, Result};
pub use gauss::EstimateWithError;
pub use geometry::{KSegmentProblem, Line, TwoSegmentProblem, Window};
pub use moments::{
    boundary_length_intensity, expected_crossing_product, pair_integrand, second_moment_measure,
    LinePair, SecondMomentResult,
};
