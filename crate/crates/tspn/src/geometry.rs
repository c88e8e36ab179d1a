//! Euclidean primitives in R^d: points, lines, distances, the flattening
//! map used by the cube construction, and tour cost.
//!
//! All coordinates are f64. Comparisons use a 1e-9 tolerance unless a caller
//! asks for something tighter; nothing here relies on exact predicates.

use crate::error::{Error, Result};

/// Tolerance for geometric comparisons throughout the crate.
pub const GEOM_EPS: f64 = 1e-9;

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Componentwise a - b.
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Componentwise a + b.
pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Componentwise s * a.
pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// a + s * b, the workhorse of line parameterizations.
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Cross product in R^3.
pub fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// A point in R^d, d >= 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub coords: Vec<f64>,
}

impl Point {
    /// Validating constructor: finite coordinates, dimension at least 2.
    pub fn new(coords: Vec<f64>) -> Result<Point> {
        if coords.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "point dimension must be >= 2, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(
                "point has a non-finite coordinate".into(),
            ));
        }
        Ok(Point { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn dist(&self, other: &Point) -> f64 {
        norm(&sub(&self.coords, &other.coords))
    }
}

/// A line in R^d stored as base point plus unit direction.
///
/// The direction is canonicalized to be lexicographically positive (first
/// nonzero component > 0) so that equal lines compare equal after
/// reconstruction from the same geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub base: Point,
    pub dir: Vec<f64>,
}

impl Line {
    /// Builds a line, normalizing and canonicalizing the direction.
    pub fn new(base: Point, dir: Vec<f64>) -> Result<Line> {
        check_dim(base.dim(), dir.len())?;
        let n = norm(&dir);
        if !(n.is_finite()) || n < 1e-12 {
            return Err(Error::InvalidParameter(
                "line direction is zero or non-finite".into(),
            ));
        }
        let mut dir: Vec<f64> = dir.iter().map(|c| c / n).collect();
        if let Some(first) = dir.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                for c in dir.iter_mut() {
                    *c = -*c;
                }
            }
        }
        Ok(Line { base, dir })
    }

    /// The line through two distinct points.
    pub fn through(p: &Point, q: &Point) -> Result<Line> {
        check_dim(p.dim(), q.dim())?;
        Line::new(p.clone(), sub(&q.coords, &p.coords))
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// base + t * dir.
    pub fn at(&self, t: f64) -> Point {
        Point {
            coords: axpy(&self.base.coords, t, &self.dir),
        }
    }

    /// Parameter of the orthogonal projection of p onto the line.
    pub fn project(&self, p: &Point) -> f64 {
        dot(&sub(&p.coords, &self.base.coords), &self.dir)
    }
}

/// Distance from a point to a line, via projection onto the direction.
pub fn dist_point_line(p: &Point, l: &Line) -> Result<f64> {
    check_dim(l.dim(), p.dim())?;
    let w = sub(&p.coords, &l.base.coords);
    let t = dot(&w, &l.dir);
    let residual = axpy(&w, -t, &l.dir);
    Ok(norm(&residual))
}

/// Parameters (s, t) of the closest approach between two lines.
///
/// Solves the 2x2 normal equations of min ||(b + s u) - (b' + t u')||^2.
/// Parallel lines (|<u,u'>| > 1 - 1e-12) get s = 0 and the projection of
/// base onto the other line.
pub fn closest_params(l: &Line, m: &Line) -> Result<(f64, f64)> {
    check_dim(l.dim(), m.dim())?;
    let c = dot(&l.dir, &m.dir);
    let w = sub(&m.base.coords, &l.base.coords);
    let denom = 1.0 - c * c;
    if denom.abs() < 1e-12 || c.abs() > 1.0 - 1e-12 {
        return Ok((0.0, -dot(&w, &m.dir)));
    }
    // s - c t = <w, u>;  c s - t = -<w, u'>
    let wu = dot(&w, &l.dir);
    let wv = dot(&w, &m.dir);
    let s = (wu - c * wv) / denom;
    let t = (c * wu - wv) / denom;
    Ok((s, t))
}

/// Minimum distance between two lines; 0 when they intersect, the offset
/// when they are parallel.
pub fn dist_line_line(l: &Line, m: &Line) -> Result<f64> {
    let (s, t) = closest_params(l, m)?;
    Ok(l.at(s).dist(&m.at(t)))
}

/// The flattening map x -> (I - 0.3 J) x in R^3, J the all-ones matrix.
pub fn flatten(p: &Point) -> Result<Point> {
    check_dim(3, p.dim())?;
    let s: f64 = p.coords.iter().sum();
    Ok(Point {
        coords: p.coords.iter().map(|c| c - 0.3 * s).collect(),
    })
}

/// Angle between two unit normals, arccos of the clamped dot product.
pub fn plane_angle(n1: &[f64], n2: &[f64]) -> f64 {
    dot(n1, n2).clamp(-1.0, 1.0).acos()
}

/// Distance from p to the segment [a, b].
pub fn dist_point_segment(p: &Point, a: &Point, b: &Point) -> f64 {
    let ab = sub(&b.coords, &a.coords);
    let len2 = dot(&ab, &ab);
    if len2 < 1e-30 {
        return p.dist(a);
    }
    let t = (dot(&sub(&p.coords, &a.coords), &ab) / len2).clamp(0.0, 1.0);
    norm(&sub(&p.coords, &axpy(&a.coords, t, &ab)))
}

/// Minimum distance between the segment [a, b] and an infinite line.
///
/// The point-to-line distance along the segment is the norm of an affine
/// function of the segment parameter, so the minimizer has a closed form.
pub fn dist_segment_line(a: &Point, b: &Point, l: &Line) -> Result<f64> {
    check_dim(l.dim(), a.dim())?;
    check_dim(l.dim(), b.dim())?;
    let strip = |p: &Point| {
        let w = sub(&p.coords, &l.base.coords);
        let t = dot(&w, &l.dir);
        axpy(&w, -t, &l.dir)
    };
    let qa = strip(a);
    let qb = strip(b);
    let u = sub(&qb, &qa);
    let len2 = dot(&u, &u);
    let t = if len2 < 1e-30 {
        0.0
    } else {
        (-dot(&qa, &u) / len2).clamp(0.0, 1.0)
    };
    Ok(norm(&axpy(&qa, t, &u)))
}

/// Whether the segment [a, b] intersects the closed ball around `center`.
///
/// Exact quadratic root test with a 1e-12 guard on the discriminant.
pub fn segment_intersects_ball(a: &Point, b: &Point, center: &Point, radius: f64) -> bool {
    let d = sub(&b.coords, &a.coords);
    let f = sub(&a.coords, &center.coords);
    let qa = dot(&d, &d);
    let qb = 2.0 * dot(&f, &d);
    let qc = dot(&f, &f) - radius * radius;
    if qc <= 1e-12 {
        return true; // segment starts inside (or on) the ball
    }
    if qa < 1e-30 {
        return false; // degenerate segment outside the ball
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < -1e-12 {
        return false;
    }
    let sq = disc.max(0.0).sqrt();
    let t1 = (-qb - sq) / (2.0 * qa);
    let t2 = (-qb + sq) / (2.0 * qa);
    t1 <= 1.0 && t2 >= 0.0
}

/// A closed tour: cyclic waypoint list plus optional per-waypoint labels
/// (the neighborhood or portal a waypoint serves).
#[derive(Clone, Debug, PartialEq)]
pub struct Tour {
    pub waypoints: Vec<Point>,
    pub meta: Vec<Option<usize>>,
}

impl Tour {
    /// Builds a tour; at least one waypoint, all of the same dimension.
    pub fn new(waypoints: Vec<Point>) -> Result<Tour> {
        if waypoints.is_empty() {
            return Err(Error::EmptyTour);
        }
        let d = waypoints[0].dim();
        for w in &waypoints {
            check_dim(d, w.dim())?;
        }
        let meta = vec![None; waypoints.len()];
        Ok(Tour { waypoints, meta })
    }

    /// Same, with labels attached.
    pub fn with_meta(waypoints: Vec<Point>, meta: Vec<Option<usize>>) -> Result<Tour> {
        let mut t = Tour::new(waypoints)?;
        if meta.len() != t.waypoints.len() {
            return Err(Error::InvalidParameter(
                "tour meta length differs from waypoint count".into(),
            ));
        }
        t.meta = meta;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.waypoints[0].dim()
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees >= 1 waypoint
    }

    /// Sum of cyclic consecutive distances; a single waypoint costs 0.
    pub fn cost(&self) -> f64 {
        let n = self.waypoints.len();
        if n < 2 {
            return 0.0;
        }
        (0..n)
            .map(|i| self.waypoints[i].dist(&self.waypoints[(i + 1) % n]))
            .sum()
    }
}

/// Free-function form of `Tour::cost`.
pub fn tour_cost(t: &Tour) -> f64 {
    t.cost()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(coords: &[f64]) -> Point {
        Point::new(coords.to_vec()).unwrap()
    }

    fn x_axis() -> Line {
        Line::new(p(&[0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]).unwrap()
    }

    /// Independent 2-variable minimizer: grid search recentered and refined
    /// around the incumbent. The objective is convex, so this converges.
    fn min_dist_by_grid(l: &Line, m: &Line) -> f64 {
        let f = |s: f64, t: f64| l.at(s).dist(&m.at(t));
        let (mut cs, mut ct) = (0.0, 0.0);
        let mut best = f(cs, ct);
        let mut span = 40.0;
        for _ in 0..30 {
            let (mut ns, mut nt, mut nb) = (cs, ct, best);
            for i in -8..=8i32 {
                for j in -8..=8i32 {
                    let s = cs + f64::from(i) * span / 8.0;
                    let t = ct + f64::from(j) * span / 8.0;
                    let v = f(s, t);
                    if v < nb {
                        (ns, nt, nb) = (s, t, v);
                    }
                }
            }
            (cs, ct, best) = (ns, nt, nb);
            span /= 4.0;
        }
        best
    }

    #[test]
    fn point_line_perpendicular_offset() {
        let d = dist_point_line(&p(&[0.0, 0.0, 1.0]), &x_axis()).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_on_line_has_zero_distance() {
        let d = dist_point_line(&p(&[3.7, 0.0, 0.0]), &x_axis()).unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn point_line_oblique_matches_calculus() {
        // min over t of ||(1,1,1) - (t,0,0)|| is sqrt(2) at t = 1
        let d = dist_point_line(&p(&[1.0, 1.0, 1.0]), &x_axis()).unwrap();
        assert!((d - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn point_line_dimension_mismatch() {
        let err = dist_point_line(&p(&[0.0, 1.0]), &x_axis()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn line_line_skew_unit_offset() {
        let m = Line::new(p(&[0.0, 0.0, 1.0]), vec![0.0, 1.0, 0.0]).unwrap();
        let d = dist_line_line(&x_axis(), &m).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_line_identical_is_zero() {
        let d = dist_line_line(&x_axis(), &x_axis()).unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn line_line_matches_grid_oracle() {
        let m = Line::new(p(&[0.0, 1.0, 2.0]), vec![0.0, 0.0, 1.0]).unwrap();
        let d = dist_line_line(&x_axis(), &m).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!((d - min_dist_by_grid(&x_axis(), &m)).abs() < 1e-6);
    }

    #[test]
    fn parallel_lines_report_offset() {
        let m = Line::new(p(&[5.0, 3.0, 4.0]), vec![1.0, 0.0, 0.0]).unwrap();
        let d = dist_line_line(&x_axis(), &m).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn flatten_matches_known_images() {
        let q = flatten(&p(&[0.0, 0.0, 1.0])).unwrap();
        assert!(q.dist(&p(&[-0.3, -0.3, 0.7])) < 1e-12);
        let o = flatten(&p(&[0.0, 0.0, 0.0])).unwrap();
        assert!(norm(&o.coords) < 1e-12);
        let d = flatten(&p(&[1.0, 1.0, 1.0])).unwrap();
        assert!(d.dist(&p(&[0.1, 0.1, 0.1])) < 1e-12);
    }

    #[test]
    fn plane_angle_known_values() {
        let s = 0.34f64.sqrt();
        let n1 = [0.3 / s, 0.4 / s, 0.3 / s];
        let n2 = [0.3 / s, 0.3 / s, 0.4 / s];
        let ang = plane_angle(&n1, &n2);
        assert!((ang - (0.33f64 / 0.34).acos()).abs() < 1e-12);
        assert!(ang < 0.25);
        // acos is ill-conditioned at 1, so allow a few ulps of angle
        assert!(plane_angle(&n1, &n1) < 1e-7);
        assert!((plane_angle(&[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn tour_cost_square_and_point() {
        let square = Tour::new(vec![
            p(&[0.0, 0.0]),
            p(&[1.0, 0.0]),
            p(&[1.0, 1.0]),
            p(&[0.0, 1.0]),
        ])
        .unwrap();
        assert!((square.cost() - 4.0).abs() < 1e-12);
        let single = Tour::new(vec![p(&[2.0, 3.0])]).unwrap();
        assert_eq!(single.cost(), 0.0);
        assert!(matches!(Tour::new(vec![]), Err(Error::EmptyTour)));
    }

    #[test]
    fn segment_ball_hits_and_misses() {
        let a = p(&[0.0, 0.0]);
        let b = p(&[2.0, 0.0]);
        assert!(segment_intersects_ball(&a, &b, &p(&[1.0, 0.05]), 0.1));
        assert!(!segment_intersects_ball(&a, &b, &p(&[1.0, 0.2]), 0.1));
        assert!(!segment_intersects_ball(&a, &b, &p(&[3.0, 0.0]), 0.5));
        assert!(segment_intersects_ball(&a, &b, &p(&[2.4, 0.0]), 0.5));
    }

    #[test]
    fn segment_line_distance_clamps_to_endpoints() {
        // segment parallel to x-axis at height 2, line is the x-axis
        let d = dist_segment_line(&p(&[0.0, 2.0, 0.0]), &p(&[1.0, 2.0, 0.0]), &x_axis()).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        // segment pointing away; closest at its start
        let d = dist_segment_line(&p(&[0.0, 1.0, 0.0]), &p(&[0.0, 2.0, 0.0]), &x_axis()).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn line_distance_symmetric_nonnegative_bounded(
            b1 in proptest::collection::vec(-10.0f64..10.0, 3),
            d1 in proptest::collection::vec(-1.0f64..1.0, 3),
            b2 in proptest::collection::vec(-10.0f64..10.0, 3),
            d2 in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            prop_assume!(norm(&d1) > 1e-3 && norm(&d2) > 1e-3);
            let l = Line::new(Point::new(b1.clone()).unwrap(), d1).unwrap();
            let m = Line::new(Point::new(b2.clone()).unwrap(), d2).unwrap();
            let d = dist_line_line(&l, &m).unwrap();
            let dr = dist_line_line(&m, &l).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - dr).abs() < 1e-9);
            prop_assert!(d <= l.base.dist(&m.base) + 1e-9);
        }

        #[test]
        fn skew_cross_product_formula_agrees(
            b1 in proptest::collection::vec(-5.0f64..5.0, 3),
            d1 in proptest::collection::vec(-1.0f64..1.0, 3),
            b2 in proptest::collection::vec(-5.0f64..5.0, 3),
            d2 in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            prop_assume!(norm(&d1) > 1e-3 && norm(&d2) > 1e-3);
            let l = Line::new(Point::new(b1.clone()).unwrap(), d1).unwrap();
            let m = Line::new(Point::new(b2.clone()).unwrap(), d2).unwrap();
            let n = cross3(&l.dir, &m.dir);
            prop_assume!(norm(&n) > 1e-6); // skip near-parallel pairs
            let formula = dot(&sub(&m.base.coords, &l.base.coords), &n).abs() / norm(&n);
            let solved = dist_line_line(&l, &m).unwrap();
            prop_assert!((formula - solved).abs() < 1e-9);
        }

        #[test]
        fn flatten_contracts_between_tenth_and_identity(
            a in proptest::collection::vec(-10.0f64..10.0, 3),
            b in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let pa = Point::new(a.clone()).unwrap();
            let pb = Point::new(b.clone()).unwrap();
            let before = pa.dist(&pb);
            prop_assume!(before > 1e-6);
            let after = flatten(&pa).unwrap().dist(&flatten(&pb).unwrap());
            prop_assert!(after >= before / 10.0 - 1e-9);
            prop_assert!(after <= before + 1e-9);
        }

        #[test]
        fn tour_cost_invariant_under_rotation_and_reversal(
            pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 2), 1..8),
            rot in 0usize..8,
        ) {
            let pts: Vec<Point> = pts.into_iter().map(|c| Point::new(c).unwrap()).collect();
            let n = pts.len();
            let base = Tour::new(pts.clone()).unwrap().cost();
            let k = rot % n;
            let rotated: Vec<Point> = (0..n).map(|i| pts[(i + k) % n].clone()).collect();
            let reversed: Vec<Point> = pts.iter().rev().cloned().collect();
            prop_assert!((Tour::new(rotated).unwrap().cost() - base).abs() < 1e-9);
            prop_assert!((Tour::new(reversed).unwrap().cost() - base).abs() < 1e-9);
        }
    }
}
