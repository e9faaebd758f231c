//! Segment bundles, their arc-length parametrization, conditioning intervals
//! for the sweep decomposition, and the invariant line measure with samplers.
//!
//! Lines are parametrized as (angle, signed offset): the line with angle
//! `phi` and offset `p` is { t*(cos phi, sin phi) + p*(-sin phi, cos phi) }.
//! The kinematic measure is d(phi) d(p), which normalizes the set of lines
//! hitting the unit disc to total mass 2*pi.

use crate::covariance::CorrelationModel;
use crate::error::{Error, Result};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Two segments of lengths `l1`, `l2` sharing an endpoint at the origin,
/// symmetric about the second coordinate axis with half-angle `phi_tilde`.
#[derive(Clone, Debug)]
pub struct TwoSegmentProblem {
    pub u: f64,
    pub l1: f64,
    pub l2: f64,
    pub phi_tilde: f64,
    pub model: CorrelationModel,
}

impl TwoSegmentProblem {
    pub fn new(u: f64, l1: f64, l2: f64, phi_tilde: f64, model: CorrelationModel) -> Result<Self> {
        if !(l1 >= 0.0 && l2 >= 0.0 && l1.is_finite() && l2.is_finite()) {
            return Err(Error::invalid(format!(
                "segment lengths must be nonnegative and finite, got ({l1}, {l2})"
            )));
        }
        if !(phi_tilde > 0.0 && phi_tilde <= PI / 2.0) {
            return Err(Error::invalid(format!(
                "half-angle must lie in (0, pi/2], got {phi_tilde}"
            )));
        }
        if !u.is_finite() {
            return Err(Error::invalid(format!("threshold must be finite, got {u}")));
        }
        Ok(TwoSegmentProblem {
            u,
            l1,
            l2,
            phi_tilde,
            model,
        })
    }

    /// Direction of the first segment.
    pub fn v1(&self) -> Vector2<f64> {
        Vector2::new(-self.phi_tilde.sin(), self.phi_tilde.cos())
    }

    /// Direction of the second segment, the mirror image of `v1`.
    pub fn v2(&self) -> Vector2<f64> {
        Vector2::new(self.phi_tilde.sin(), self.phi_tilde.cos())
    }

    pub fn total_length(&self) -> f64 {
        self.l1 + self.l2
    }

    /// Arc-length parametrization of the bundle: walks the first segment from
    /// its tip down to the origin, then out along the second segment.
    pub fn rho_map(&self, theta: f64) -> Result<Vector2<f64>> {
        if !(0.0..=self.total_length() + 1e-12).contains(&theta) {
            return Err(Error::invalid(format!(
                "arc-length parameter {theta} outside [0, {}]",
                self.total_length()
            )));
        }
        if theta <= self.l1 {
            Ok((self.l1 - theta) * self.v1())
        } else {
            Ok((theta - self.l1) * self.v2())
        }
    }

    /// Unit direction pointing outward (away from the origin) along the
    /// branch containing arc-length position `theta`.
    pub fn branch_direction(&self, theta: f64) -> Vector2<f64> {
        if theta <= self.l1 {
            self.v1()
        } else {
            self.v2()
        }
    }

    /// The set of already-swept arc-length positions when the sweep line sits
    /// at position `theta`, as a closed interval.
    ///
    /// The sweep moves away from the origin. While both segments are alive the
    /// line meets the bundle in the symmetric pair (theta, 2*l1 - theta) and
    /// everything strictly between has been swept. Once the shorter segment is
    /// exhausted the line meets only the longer one, and the swept set is that
    /// segment's tail back through the whole shorter segment.
    pub fn conditioning_interval(&self, theta: f64) -> Result<(f64, f64)> {
        let (l1, l2) = (self.l1, self.l2);
        let tol = 1e-12 * (l1 + l2).max(1.0);
        if l1 <= l2 {
            if (0.0 - tol..=l1 + tol).contains(&theta) {
                // Paired sweep across both segments.
                Ok((theta.max(0.0), 2.0 * l1 - theta))
            } else if (2.0 * l1 - tol..=l1 + l2 + tol).contains(&theta) {
                // Lone sweep along the tail of the longer second segment.
                Ok((0.0, theta.min(l1 + l2)))
            } else {
                Err(Error::invalid(format!(
                    "sweep position {theta} outside the integration ranges for l1={l1} <= l2={l2}"
                )))
            }
        } else if (0.0 - tol..l1 - l2).contains(&theta) {
            // Lone sweep along the tail of the longer first segment: all of
            // the second segment and the first segment's inner part are swept.
            Ok((theta.max(0.0), l1 + l2))
        } else if (l1 - l2..=l1 + tol).contains(&theta) {
            Ok((theta, 2.0 * l1 - theta))
        } else {
            Err(Error::invalid(format!(
                "sweep position {theta} outside the integration ranges for l1={l1} > l2={l2}"
            )))
        }
    }
}

/// A star of `k >= 1` segments from the origin with arbitrary directions.
#[derive(Clone, Debug)]
pub struct KSegmentProblem {
    pub u: f64,
    /// Angles of the segment directions against the first axis, in radians.
    pub directions: Vec<f64>,
    pub lengths: Vec<f64>,
    pub model: CorrelationModel,
}

impl KSegmentProblem {
    pub fn new(
        u: f64,
        directions: Vec<f64>,
        lengths: Vec<f64>,
        model: CorrelationModel,
    ) -> Result<Self> {
        if directions.is_empty() || directions.len() != lengths.len() {
            return Err(Error::invalid(format!(
                "need matching nonempty direction/length lists, got {} and {}",
                directions.len(),
                lengths.len()
            )));
        }
        if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("all segment lengths must be positive".to_string()));
        }
        let mut normalized: Vec<f64> = directions
            .iter()
            .map(|a| a.rem_euclid(2.0 * PI))
            .collect();
        normalized.sort_by(f64::total_cmp);
        for w in normalized.windows(2) {
            if (w[1] - w[0]).abs() < 1e-9 {
                return Err(Error::invalid(
                    "segment directions must be pairwise distinct".to_string(),
                ));
            }
        }
        if normalized.len() > 1 {
            let wrap = normalized[0] + 2.0 * PI - normalized[normalized.len() - 1];
            if wrap.abs() < 1e-9 {
                return Err(Error::invalid(
                    "segment directions must be pairwise distinct".to_string(),
                ));
            }
        }
        Ok(KSegmentProblem {
            u,
            directions,
            lengths,
            model,
        })
    }

    pub fn k(&self) -> usize {
        self.directions.len()
    }

    /// Unit vector of the `j`-th segment direction.
    pub fn direction_vec(&self, j: usize) -> Vector2<f64> {
        Vector2::new(self.directions[j].cos(), self.directions[j].sin())
    }
}

/// An undirected line in the plane: angle in [0, pi) and signed offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    angle: f64,
    offset: f64,
}

impl Line {
    /// Builds a line, folding the angle into [0, pi). Adding pi to the angle
    /// describes the same line with the offset sign flipped, so the fold
    /// negates the offset once per removed half-turn.
    pub fn new(angle: f64, offset: f64) -> Self {
        let k = (angle / PI).floor();
        let mut a = angle - k * PI;
        if a >= PI {
            // Guard against a - k*pi rounding up to pi exactly.
            a = 0.0;
        }
        let p = if (k as i64).rem_euclid(2) == 1 {
            -offset
        } else {
            offset
        };
        Line {
            angle: a,
            offset: p,
        }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Unit direction along the line.
    pub fn direction(&self) -> Vector2<f64> {
        Vector2::new(self.angle.cos(), self.angle.sin())
    }

    /// Unit normal; the line is { x : x . normal = offset }.
    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.angle.sin(), self.angle.cos())
    }

    /// Point at arc-length coordinate `t` along the line.
    pub fn point_at(&self, t: f64) -> Vector2<f64> {
        t * self.direction() + self.offset * self.normal()
    }

    /// Signed distance from `x` to the line (positive on the normal side).
    pub fn signed_distance(&self, x: Vector2<f64>) -> f64 {
        x.dot(&self.normal()) - self.offset
    }
}

/// A convex observation window: every line meets it in at most one chord.
#[derive(Clone, Debug)]
pub struct Window {
    kind: WindowKind,
}

#[derive(Clone, Debug)]
enum WindowKind {
    Disc { center: Vector2<f64>, radius: f64 },
    Rect { min: Vector2<f64>, max: Vector2<f64> },
}

impl Window {
    pub fn disc(center: Vector2<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid(format!(
                "disc radius must be positive and finite, got {radius}"
            )));
        }
        Ok(Window {
            kind: WindowKind::Disc { center, radius },
        })
    }

    /// Axis-aligned rectangle spanned by two opposite corners.
    pub fn rect(corner_a: Vector2<f64>, corner_b: Vector2<f64>) -> Result<Self> {
        let min = Vector2::new(corner_a.x.min(corner_b.x), corner_a.y.min(corner_b.y));
        let max = Vector2::new(corner_a.x.max(corner_b.x), corner_a.y.max(corner_b.y));
        if !(max.x > min.x && max.y > min.y) {
            return Err(Error::invalid(
                "rectangle must have positive width and height".to_string(),
            ));
        }
        Ok(Window {
            kind: WindowKind::Rect { min, max },
        })
    }

    pub fn descriptor(&self) -> String {
        match &self.kind {
            WindowKind::Disc { center, radius } => {
                format!("disc(center=({}, {}), radius={radius})", center.x, center.y)
            }
            WindowKind::Rect { min, max } => format!(
                "rect(({}, {}), ({}, {}))",
                min.x, min.y, max.x, max.y
            ),
        }
    }

    pub fn area(&self) -> f64 {
        match &self.kind {
            WindowKind::Disc { radius, .. } => PI * radius * radius,
            WindowKind::Rect { min, max } => (max.x - min.x) * (max.y - min.y),
        }
    }

    pub fn contains(&self, x: Vector2<f64>) -> bool {
        match &self.kind {
            WindowKind::Disc { center, radius } => (x - center).norm() <= *radius,
            WindowKind::Rect { min, max } => {
                x.x >= min.x && x.x <= max.x && x.y >= min.y && x.y <= max.y
            }
        }
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bounding_box(&self) -> (Vector2<f64>, Vector2<f64>) {
        match &self.kind {
            WindowKind::Disc { center, radius } => (
                center - Vector2::new(*radius, *radius),
                center + Vector2::new(*radius, *radius),
            ),
            WindowKind::Rect { min, max } => (*min, *max),
        }
    }

    /// Offsets of lines at the given angle that hit the window.
    pub fn offset_interval(&self, angle: f64) -> (f64, f64) {
        let n = Vector2::new(-angle.sin(), angle.cos());
        match &self.kind {
            WindowKind::Disc { center, radius } => {
                let c = center.dot(&n);
                (c - radius, c + radius)
            }
            WindowKind::Rect { min, max } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for corner in [
                    *min,
                    *max,
                    Vector2::new(min.x, max.y),
                    Vector2::new(max.x, min.y),
                ] {
                    let p = corner.dot(&n);
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
                (lo, hi)
            }
        }
    }

    /// Total kinematic measure of the set of lines hitting the window. For a
    /// convex body this is its perimeter (Cauchy's formula); the unit disc
    /// normalizes to 2*pi.
    pub fn hitting_measure(&self) -> f64 {
        match &self.kind {
            WindowKind::Disc { radius, .. } => 2.0 * PI * radius,
            WindowKind::Rect { min, max } => 2.0 * ((max.x - min.x) + (max.y - min.y)),
        }
    }

    /// Arc-length interval of `line` inside the window, if the chord is
    /// nondegenerate.
    pub fn chord(&self, line: &Line) -> Option<(f64, f64)> {
        match &self.kind {
            WindowKind::Disc { center, radius } => {
                let d = line.signed_distance(*center);
                if d.abs() >= *radius {
                    return None;
                }
                let tc = center.dot(&line.direction());
                let half = (radius * radius - d * d).sqrt();
                Some((tc - half, tc + half))
            }
            WindowKind::Rect { min, max } => {
                // Clip t against each slab of the rectangle.
                let dir = line.direction();
                let origin = line.offset() * line.normal();
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for axis in 0..2 {
                    let (o, d, lo, hi) = (origin[axis], dir[axis], min[axis], max[axis]);
                    if d.abs() < 1e-15 {
                        if o < lo || o > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t1 - t0 > 1e-12 {
                    Some((t0, t1))
                } else {
                    None
                }
            }
        }
    }

    /// Draws `count` lines hitting the window, uniformly with respect to the
    /// kinematic measure restricted to the hitting set, each carrying weight
    /// hitting_measure / count so that weighted sums estimate measure
    /// integrals over the hitting set without bias.
    pub fn sample_crofton_lines(&self, count: usize, seed: u64) -> Result<Vec<(Line, f64)>> {
        if count == 0 {
            return Err(Error::invalid("line sample count must be positive".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = self.hitting_measure() / count as f64;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let angle = match &self.kind {
                // For a disc the offset extent is the same for every angle,
                // so the angle marginal is uniform.
                WindowKind::Disc { .. } => rng.gen_range(0.0..PI),
                WindowKind::Rect { min, max } => {
                    sample_rect_angle(max.x - min.x, max.y - min.y, &mut rng)
                }
            };
            let (lo, hi) = self.offset_interval(angle);
            let offset = rng.gen_range(lo..hi);
            out.push((Line::new(angle, offset), weight));
        }
        Ok(out)
    }
}

/// Angle marginal of the hitting measure for a `w` by `h` rectangle: density
/// proportional to w*|sin a| + h*|cos a| on [0, pi), sampled by inverting the
/// two mixture components in closed form.
fn sample_rect_angle(w: f64, h: f64, rng: &mut ChaCha8Rng) -> f64 {
    // Component masses: integral of w|sin| is 2w, of h|cos| is 2h.
    let pick: f64 = rng.gen_range(0.0..(w + h));
    let u: f64 = rng.gen_range(0.0..1.0);
    if pick < w {
        // Density |sin a|/2: CDF (1 - cos a)/2.
        (1.0 - 2.0 * u).acos()
    } else if u < 0.5 {
        // Density |cos a|/2: CDF sin(a)/2 on [0, pi/2].
        (2.0 * u).asin()
    } else {
        PI - (2.0 * (1.0 - u)).asin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn problem(l1: f64, l2: f64, phi_tilde: f64) -> TwoSegmentProblem {
        TwoSegmentProblem::new(1.0, l1, l2, phi_tilde, CorrelationModel::gaussian()).unwrap()
    }

    #[test]
    fn rho_map_reference_points() {
        let p = problem(1.0, 1.0, PI / 4.0);
        assert!(p.rho_map(1.0).unwrap().norm() < 1e-15);
        let tip1 = p.rho_map(0.0).unwrap();
        let s = (2.0f64).sqrt() / 2.0;
        assert!((tip1 - Vector2::new(-s, s)).norm() < 1e-15);

        let q = problem(1.0, 2.0, PI / 2.0);
        let tip2 = q.rho_map(3.0).unwrap();
        assert!((tip2 - Vector2::new(2.0, 0.0)).norm() < 1e-15);
        assert!(q.rho_map(3.5).is_err());
    }

    #[test]
    fn rho_map_is_branchwise_isometry() {
        let p = problem(1.3, 0.8, 0.7);
        let (a, b) = (0.2, 1.1);
        let d = (p.rho_map(a).unwrap() - p.rho_map(b).unwrap()).norm();
        assert!((d - (b - a)).abs() < 1e-12);
    }

    #[test]
    fn conditioning_interval_cases() {
        let p = problem(1.0, 2.0, PI / 4.0);
        assert_eq!(p.conditioning_interval(0.5).unwrap(), (0.5, 1.5));
        assert_eq!(p.conditioning_interval(2.5).unwrap(), (0.0, 2.5));
        assert!(p.conditioning_interval(1.5).is_err());

        let q = problem(2.0, 1.0, PI / 4.0);
        // Lone sweep on the longer first segment conditions on everything
        // from the sweep position through the whole second segment.
        assert_eq!(q.conditioning_interval(0.5).unwrap(), (0.5, 3.0));
        assert_eq!(q.conditioning_interval(1.5).unwrap(), (1.5, 2.5));
        assert!(q.conditioning_interval(3.5).is_err());

        // The two branches agree where they meet.
        let boundary = q.conditioning_interval(1.0).unwrap();
        assert!((boundary.0 - 1.0).abs() < 1e-12 && (boundary.1 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn segment_directions_are_mirror_images() {
        let p = problem(1.0, 1.0, 0.6);
        let (v1, v2) = (p.v1(), p.v2());
        assert!((v1.norm() - 1.0).abs() < 1e-15);
        assert!((v2.norm() - 1.0).abs() < 1e-15);
        assert!((v1.x + v2.x).abs() < 1e-15 && (v1.y - v2.y).abs() < 1e-15);
    }

    #[test]
    fn k_segment_validation() {
        let m = CorrelationModel::gaussian();
        assert!(KSegmentProblem::new(0.0, vec![0.0, PI / 2.0], vec![1.0, 2.0], m.clone()).is_ok());
        // Same direction twice (2*pi apart).
        assert!(
            KSegmentProblem::new(0.0, vec![0.1, 0.1 + 2.0 * PI], vec![1.0, 1.0], m.clone())
                .is_err()
        );
        assert!(KSegmentProblem::new(0.0, vec![0.0], vec![0.0], m.clone()).is_err());
        assert!(KSegmentProblem::new(0.0, vec![], vec![], m).is_err());
    }

    #[test]
    fn line_normalization_preserves_geometry() {
        // Folding the angle into [0, pi) must keep the point set: points of
        // the raw parametrization stay on the normalized line.
        for (angle, offset) in [(0.3 + PI, 0.7), (0.3 + 2.0 * PI, 0.7), (-1.2, -0.4)] {
            let line = Line::new(angle, offset);
            assert!(line.angle() >= 0.0 && line.angle() < PI);
            let raw_dir = Vector2::new(angle.cos(), angle.sin());
            let raw_normal = Vector2::new(-angle.sin(), angle.cos());
            for t in [-2.0, 0.0, 1.3] {
                let point = t * raw_dir + offset * raw_normal;
                assert!(
                    line.signed_distance(point).abs() < 1e-12,
                    "angle {angle}, t {t}: point off the normalized line"
                );
            }
        }
        assert!((Line::new(0.3 + PI, 0.7).offset() + 0.7).abs() < 1e-12);
        assert!((Line::new(0.3 + 2.0 * PI, 0.7).offset() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn disc_chord_endpoints_lie_on_boundary() {
        let w = Window::disc(Vector2::new(0.5, -0.25), 2.0).unwrap();
        let line = Line::new(1.1, 0.3);
        let (t0, t1) = w.chord(&line).unwrap();
        for t in [t0, t1] {
            let x = line.point_at(t);
            assert!(((x - Vector2::new(0.5, -0.25)).norm() - 2.0).abs() < 1e-10);
        }
        // A line far away misses.
        assert!(w.chord(&Line::new(0.0, 10.0)).is_none());
    }

    #[test]
    fn rect_chord_matches_containment() {
        let w = Window::rect(Vector2::new(-1.0, -0.5), Vector2::new(2.0, 1.5)).unwrap();
        let line = Line::new(0.4, 0.2);
        let (t0, t1) = w.chord(&line).unwrap();
        let mid = line.point_at(0.5 * (t0 + t1));
        assert!(w.contains(mid));
        let outside = line.point_at(t1 + 0.1);
        assert!(!w.contains(outside));
    }

    #[test]
    fn hitting_measures() {
        let unit_disc = Window::disc(Vector2::zeros(), 1.0).unwrap();
        assert!((unit_disc.hitting_measure() - 2.0 * PI).abs() < 1e-15);
        let disc3 = Window::disc(Vector2::new(4.0, 1.0), 3.0).unwrap();
        assert!((disc3.hitting_measure() - 6.0 * PI).abs() < 1e-15);
        let square = Window::rect(Vector2::zeros(), Vector2::new(1.0, 1.0)).unwrap();
        assert!((square.hitting_measure() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn sampled_lines_hit_the_window_and_weights_sum_to_measure() {
        for w in [
            Window::disc(Vector2::new(0.3, 0.1), 1.7).unwrap(),
            Window::rect(Vector2::new(-1.0, 0.0), Vector2::new(1.5, 2.0)).unwrap(),
        ] {
            let lines = w.sample_crofton_lines(2000, 7).unwrap();
            let total: f64 = lines.iter().map(|(_, wt)| wt).sum();
            assert!((total - w.hitting_measure()).abs() < 1e-9 * w.hitting_measure());
            let hits = lines.iter().filter(|(l, _)| w.chord(l).is_some()).count();
            assert!(hits >= 1995, "only {hits} of 2000 sampled lines hit");
        }
    }

    #[test]
    fn crofton_recovers_segment_length() {
        // Cauchy-Crofton: the measure of lines crossing a segment of length L
        // is 2L, so the weighted hit count must estimate that.
        let seg_a = Vector2::new(-0.5, -0.3);
        let seg_b = Vector2::new(0.4, 0.5);
        let len = (seg_b - seg_a).norm();
        for (window, seed) in [
            (Window::disc(Vector2::zeros(), 2.0).unwrap(), 11u64),
            (
                Window::rect(Vector2::new(-2.0, -2.0), Vector2::new(2.0, 2.0)).unwrap(),
                12u64,
            ),
        ] {
            let n = 200_000;
            let lines = window.sample_crofton_lines(n, seed).unwrap();
            let mut estimate = 0.0;
            let mut hits = 0usize;
            for (line, weight) in &lines {
                if line.signed_distance(seg_a) * line.signed_distance(seg_b) <= 0.0 {
                    estimate += weight;
                    hits += 1;
                }
            }
            let f = hits as f64 / n as f64;
            let se = window.hitting_measure() * (f * (1.0 - f) / n as f64).sqrt();
            assert!(
                (estimate - 2.0 * len).abs() <= 3.0 * se,
                "{}: estimate {estimate} vs {} (se {se})",
                window.descriptor(),
                2.0 * len
            );
        }
    }

    proptest! {
        #[test]
        fn branch_isometry(
            l1 in 0.2f64..3.0,
            l2 in 0.2f64..3.0,
            phi in 0.05f64..std::f64::consts::FRAC_PI_2,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let p = problem(l1, l2, phi);
            // Two points on the first branch, then two on the second.
            let (t0, t1) = (a * l1, b * l1);
            let d1 = (p.rho_map(t0).unwrap() - p.rho_map(t1).unwrap()).norm();
            prop_assert!((d1 - (t0 - t1).abs()).abs() < 1e-10);
            let (s0, s1) = (l1 + a * l2, l1 + b * l2);
            let d2 = (p.rho_map(s0).unwrap() - p.rho_map(s1).unwrap()).norm();
            prop_assert!((d2 - (s0 - s1).abs()).abs() < 1e-10);
        }

        #[test]
        fn conditioning_interval_bounds(
            l1 in 0.2f64..3.0,
            l2 in 0.2f64..3.0,
            frac in 0.0f64..1.0,
        ) {
            let p = problem(l1, l2, 0.9);
            // Paired-sweep range: theta in [max(0, l1-l2), l1].
            let lo = (l1 - l2).max(0.0);
            let theta = lo + frac * (l1 - lo);
            let (a, b) = p.conditioning_interval(theta).unwrap();
            prop_assert!(a <= theta + 1e-12 && theta <= b + 1e-12);
            prop_assert!(a >= -1e-12 && b <= l1 + l2 + 1e-12);
        }
    }
}
