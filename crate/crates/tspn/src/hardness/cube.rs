//! Flattened-cube hardness construction in R^3: graph vertices become
//! points on three pairwise-skew cube edges, graph edges become lines, and
//! a delta-spaced closed chain of gadget anchor points forces any cheap
//! tour to reveal a vertex cover.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{dist_line_line, flatten, plane_angle, Line, Point, Tour};
use crate::hardness::{CheckResult, TripartiteGraph, VertexId};
use crate::instance::LineInstance;

/// Bisector-plane frame attached to one flattened cube edge.
#[derive(Clone, Debug)]
pub struct EdgeFrame {
    /// Flattened endpoints of the edge segment.
    pub seg: (Point, Point),
    /// Unit direction along the flattened edge.
    pub dir: [f64; 3],
    /// Flattened outward unit normals of the two incident cube faces.
    pub face_normals: ([f64; 3], [f64; 3]),
    /// Unit normal of the bisector plane (the plane spans `dir` and `offset`).
    pub plane_normal: [f64; 3],
    /// In-plane unit offset direction, pointing away from the flattened cube.
    pub offset: [f64; 3],
    /// Angle between the two flattened face planes.
    pub face_angle: f64,
}

/// The full R^3 construction derived from a tripartite graph.
#[derive(Clone, Debug)]
pub struct CubeConstruction {
    pub graph: TripartiteGraph,
    pub delta: f64,
    pub delta_star: f64,
    pub sigma: f64,
    /// Unflattened vertex placements, parallel to `graph.vertices()` order.
    pub points_unflat: Vec<(VertexId, Point)>,
    /// Flattened vertex placements, same order.
    pub points_flat: Vec<(VertexId, Point)>,
    /// Unflattened lines, parallel to `graph.edges`.
    pub lines_unflat: Vec<Line>,
    /// Flattened lines, parallel to `graph.edges`.
    pub lines_flat: Vec<Line>,
    /// Per-class edge frames (index 0 is class 1).
    pub frames: [EdgeFrame; 3],
    /// Anchor chain: closed polyline order, consecutive points exactly
    /// delta apart, total length 10.
    pub q_points: Vec<Point>,
    /// Index ranges of the per-class point sets within `q_points`.
    pub q_class_spans: [std::ops::Range<usize>; 3],
    /// q_pair_start[class][vertex-1] = index i such that q_points[i] and
    /// q_points[i+1] straddle that vertex's anchor.
    pub q_pair_start: [Vec<usize>; 3],
    /// Corner points of the ideal polyline the chain follows.
    pub gamma: Vec<Point>,
    /// Gadget grid side (points per side; grid_side^2 lines per anchor).
    pub m_grid: usize,
    /// Gadget grid spacing.
    pub gadget_scale: f64,
    /// Exclusion radius around the (0,0,0)-(1,1,1) axis.
    pub cylinder_radius: f64,
}

fn arr(p: &Point) -> [f64; 3] {
    [p.coords[0], p.coords[1], p.coords[2]]
}

fn pt(a: [f64; 3]) -> Point {
    Point::new(a.to_vec()).unwrap()
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn unit3(a: [f64; 3]) -> [f64; 3] {
    scale3(a, 1.0 / norm3(a))
}

/// Rotation (x,y,z) -> (z,x,y): maps class a data to class a+1.
fn rot3(a: [f64; 3]) -> [f64; 3] {
    [a[2], a[0], a[1]]
}

fn rot3n(a: [f64; 3], times: usize) -> [f64; 3] {
    let mut r = a;
    for _ in 0..times {
        r = rot3(r);
    }
    r
}

/// Allocation-free point-to-line distance in R^3.
fn dist3_point_line(p: [f64; 3], base: [f64; 3], dir: [f64; 3]) -> f64 {
    let w = sub3(p, base);
    let t = dot3(w, dir);
    (dot3(w, w) - t * t).max(0.0).sqrt()
}

/// Distance from a point to the line through the origin with direction
/// (1,1,1)/sqrt(3).
fn dist_to_diagonal(p: [f64; 3]) -> f64 {
    let s = (p[0] + p[1] + p[2]) / 3.0;
    norm3([p[0] - s, p[1] - s, p[2] - s])
}

/// Unflattened placement of a graph vertex on its class's cube edge.
pub fn place_vertex(v: VertexId, n: usize) -> Point {
    let t = (n + v.index) as f64 / (3.0 * n as f64);
    let base = match v.class {
        1 => [t, 0.0, 1.0],
        2 => [1.0, t, 0.0],
        _ => [0.0, 1.0, t],
    };
    pt(base)
}

fn flatten3(a: [f64; 3]) -> [f64; 3] {
    let s = 0.3 * (a[0] + a[1] + a[2]);
    [a[0] - s, a[1] - s, a[2] - s]
}

/// Inverse-transpose action of the flattening on plane normals.
fn flatten_normal(a: [f64; 3]) -> [f64; 3] {
    let s = 3.0 * (a[0] + a[1] + a[2]);
    unit3([a[0] + s, a[1] + s, a[2] + s])
}

/// Builds the frame of class-1's edge (cube edge (0,0,1)-(1,0,1)) and
/// rotates it for the other classes.
fn edge_frame(class_idx: usize) -> EdgeFrame {
    let e0 = rot3n([0.0, 0.0, 1.0], class_idx);
    let e1 = rot3n([1.0, 0.0, 1.0], class_idx);
    let f0 = flatten3(e0);
    let f1 = flatten3(e1);
    let dir = unit3(sub3(f1, f0));
    // outward normals of the two faces meeting at the edge (y = 0 and z = 1
    // for class 1)
    let raw1 = rot3n([0.0, -1.0, 0.0], class_idx);
    let raw2 = rot3n([0.0, 0.0, 1.0], class_idx);
    let n1 = flatten_normal(raw1);
    let n2 = flatten_normal(raw2);
    // the outward normals are nearly antipodal, so the cube material fills
    // the narrow wedge around -(n1+n2); the plane spanning `dir` and n1-n2
    // is perpendicular to that wedge axis and misses the material
    let mut offset = unit3(sub3(n1, n2));
    if offset[0] + offset[1] + offset[2] < 0.0 {
        offset = scale3(offset, -1.0);
    }
    let plane_normal = unit3(add3(n1, n2));
    let raw_angle = plane_angle(&n1.to_vec(), &n2.to_vec());
    let face_angle = raw_angle.min(std::f64::consts::PI - raw_angle);
    EdgeFrame {
        seg: (pt(f0), pt(f1)),
        dir,
        face_normals: (n1, n2),
        plane_normal,
        offset,
        face_angle,
    }
}

/// Fills `out` with the hops-1 interior points of a leg from `from` to
/// `to`, every chord exactly delta. Chords wiggle along `wiggle` (unit,
/// perpendicular to the leg) so that an arbitrary hop count fits;
/// `straight_ends` hops at each end stay exactly on the leg line.
fn discretize_leg(
    out: &mut Vec<Point>,
    from: [f64; 3],
    to: [f64; 3],
    hops: usize,
    delta: f64,
    wiggle: [f64; 3],
    straight_ends: usize,
) {
    let span = sub3(to, from);
    let len = norm3(span);
    let axis = scale3(span, 1.0 / len);
    debug_assert!(dot3(axis, wiggle).abs() < 1e-9);
    let m = hops - 2 * straight_ends;
    let s_int = len - 2.0 * straight_ends as f64 * delta;
    assert!(m >= 6, "leg too short for its hop budget");
    // (advance, wiggle offset after the hop); every chord length is delta
    let mut schedule: Vec<(f64, f64)> = Vec::with_capacity(hops);
    for _ in 0..straight_ends {
        schedule.push((delta, 0.0));
    }
    if m % 2 == 0 {
        let adv = s_int / m as f64;
        assert!(adv >= 0.5 * delta && adv <= 0.999 * delta, "advance {adv} vs delta {delta}");
        let h = (delta * delta - adv * adv).sqrt();
        for i in 0..m {
            schedule.push((adv, if i % 2 == 0 { h } else { 0.0 }));
        }
    } else {
        // odd hop count: one level hop of advance delta at wiggle height,
        // the rest a uniform sawtooth
        let adv = (s_int - delta) / (m - 1) as f64;
        assert!(adv >= 0.5 * delta && adv <= 0.999 * delta, "advance {adv} vs delta {delta}");
        let h = (delta * delta - adv * adv).sqrt();
        schedule.push((adv, h));
        schedule.push((delta, h));
        schedule.push((adv, 0.0));
        for i in 0..m - 3 {
            schedule.push((adv, if i % 2 == 0 { h } else { 0.0 }));
        }
    }
    for _ in 0..straight_ends {
        schedule.push((delta, 0.0));
    }
    debug_assert_eq!(schedule.len(), hops);
    let mut pos = 0.0;
    for (adv, w) in schedule.iter().take(hops - 1) {
        pos += adv;
        out.push(pt(add3(add3(from, scale3(axis, pos)), scale3(wiggle, *w))));
    }
}

/// Hops between consecutive vertex-pair stations on one class's offset
/// line; constant because vertex spacing scales with 1/n exactly as delta
/// does.
fn gap_hops(sigma: f64) -> usize {
    // gap length / delta = 4000*sigma/3 - 1, independent of n
    let ratio = 4000.0 * sigma / 3.0 - 1.0;
    let mut k = ratio.ceil() as usize;
    if k % 2 == 1 {
        k += 1;
    }
    k
}

/// Generates the full construction for a tripartite graph.
pub fn gen_cube(graph: &TripartiteGraph, m_grid: usize) -> Result<CubeConstruction> {
    if m_grid < 4 {
        return Err(Error::InvalidParameter(format!(
            "gadget grid side must be at least 4, got {m_grid}"
        )));
    }
    let n = graph.n;
    let nf = n as f64;
    let delta = 1.0 / (4000.0 * nf);
    let delta_star = 99.75f64.sqrt() * delta;
    let sigma = 0.67f64.sqrt();

    let points_unflat: Vec<(VertexId, Point)> = graph
        .vertices()
        .map(|v| (v, place_vertex(v, n)))
        .collect();
    let points_flat: Vec<(VertexId, Point)> = points_unflat
        .iter()
        .map(|(v, p)| (*v, flatten(p).unwrap()))
        .collect();
    let flat_of = |v: VertexId| -> [f64; 3] {
        arr(&points_flat[(v.class as usize - 1) * n + (v.index - 1)].1)
    };

    let mut lines_unflat = Vec::with_capacity(graph.edges.len());
    let mut lines_flat = Vec::with_capacity(graph.edges.len());
    for (u, v) in &graph.edges {
        let pu = &points_unflat[(u.class as usize - 1) * n + (u.index - 1)].1;
        let pv = &points_unflat[(v.class as usize - 1) * n + (v.index - 1)].1;
        lines_unflat.push(Line::through(pu, pv)?);
        lines_flat.push(Line::through(&pt(flat_of(*u)), &pt(flat_of(*v)))?);
    }

    let frames = [edge_frame(0), edge_frame(1), edge_frame(2)];

    // hop ledger: total chain hops must be exactly 10/delta = 40000n
    let total_hops = 40_000 * n;
    let k_gap = gap_hops(sigma);
    let span_hops = n + (n - 1) * k_gap; // per class
    let join_budget = total_hops - 3 * span_hops;
    let j_lo = join_budget / 3;
    let join_hops = [join_budget - 2 * j_lo, j_lo, j_lo];

    // per-class span: pair points q,q' straddling each vertex anchor at
    // distance exactly 10*delta from it, gap chains between them
    let mut spans: Vec<Vec<Point>> = Vec::with_capacity(3);
    let mut pair_offsets: Vec<Vec<usize>> = Vec::with_capacity(3);
    for a in 0..3 {
        let fr = &frames[a];
        let mut span = Vec::with_capacity(span_hops + 1);
        let mut pairs = Vec::with_capacity(n);
        for i in 1..=n {
            let anchor = flat_of(VertexId::new(a as u8 + 1, i));
            let c = add3(anchor, scale3(fr.offset, delta_star));
            let q = add3(c, scale3(fr.dir, -0.5 * delta));
            let qp = add3(c, scale3(fr.dir, 0.5 * delta));
            if i > 1 {
                let prev = arr(span.last().unwrap());
                discretize_leg(&mut span, prev, q, k_gap, delta, fr.offset, 0);
            }
            pairs.push(span.len());
            span.push(pt(q));
            span.push(pt(qp));
        }
        spans.push(span);
        pair_offsets.push(pairs);
    }

    // joins: extend each offset line past the edge, cut across to the next
    // class's extension, and run in to its first pair point
    let overshoot = 0.85;
    let mut q_points: Vec<Point> = Vec::with_capacity(total_hops);
    let mut q_class_spans: [std::ops::Range<usize>; 3] = Default::default();
    let mut q_pair_start: [Vec<usize>; 3] = Default::default();
    let mut gamma = Vec::new();
    for a in 0..3 {
        let start = q_points.len();
        q_pair_start[a] = pair_offsets[a].iter().map(|off| start + off).collect();
        q_points.extend(spans[a].iter().cloned());
        q_class_spans[a] = start..q_points.len();

        let next = (a + 1) % 3;
        let from = arr(spans[a].last().unwrap());
        let to = arr(spans[next].first().unwrap());
        let c1 = add3(
            flatten3(rot3n([1.0 + overshoot, 0.0, 1.0], a)),
            scale3(frames[a].offset, delta_star),
        );
        let c2 = add3(
            flatten3(rot3n([1.0, -overshoot, 0.0], a)),
            scale3(frames[next].offset, delta_star),
        );
        gamma.extend([
            spans[a].first().unwrap().clone(),
            spans[a].last().unwrap().clone(),
            pt(c1),
            pt(c2),
        ]);

        let legs = [(from, c1), (c1, c2), (c2, to)];
        let lens: Vec<f64> = legs.iter().map(|(x, y)| norm3(sub3(*y, *x))).collect();
        let total_len: f64 = lens.iter().sum();
        let budget = join_hops[a];
        let k0 = ((budget as f64) * lens[0] / total_len).round() as usize;
        let k1 = ((budget as f64) * lens[1] / total_len).round() as usize;
        let ks = [k0, k1, budget - k0 - k1];
        for (li, ((x, y), k)) in legs.iter().zip(ks).enumerate() {
            // wiggle radially away from the diagonal axis, squared against
            // the leg direction
            let mid = scale3(add3(*x, *y), 0.5);
            let s = (mid[0] + mid[1] + mid[2]) / 3.0;
            let radial = [mid[0] - s, mid[1] - s, mid[2] - s];
            let axis = unit3(sub3(*y, *x));
            let rej = sub3(radial, scale3(axis, dot3(radial, axis)));
            let wiggle = unit3(rej);
            if li > 0 {
                q_points.push(pt(*x));
            }
            discretize_leg(&mut q_points, *x, *y, k, delta, wiggle, 2);
        }
    }
    debug_assert_eq!(q_points.len(), total_hops);

    Ok(CubeConstruction {
        graph: graph.clone(),
        delta,
        delta_star,
        sigma,
        points_unflat,
        points_flat,
        lines_unflat,
        lines_flat,
        frames,
        q_points,
        q_class_spans,
        q_pair_start,
        gamma,
        m_grid,
        gadget_scale: delta / (100.0 * (m_grid - 1) as f64),
        cylinder_radius: sigma / 2.0,
    })
}

impl CubeConstruction {
    /// Flattened anchor of a graph vertex.
    pub fn flat_point(&self, v: VertexId) -> &Point {
        &self.points_flat[(v.class as usize - 1) * self.graph.n + (v.index - 1)].1
    }

    /// The gadget lines attached at chain point `idx`, generated on demand.
    pub fn gadget_lines(&self, idx: usize) -> Vec<Line> {
        point_gadget(&self.q_points[idx], self.m_grid, self.gadget_scale).unwrap()
    }

    /// Exports the construction as a line instance: the graph-edge lines,
    /// plus each anchor's gadget lines when requested.
    pub fn line_instance(&self, include_gadgets: bool) -> Result<LineInstance> {
        let mut lines = self.lines_flat.clone();
        if include_gadgets {
            for i in 0..self.q_points.len() {
                lines.extend(self.gadget_lines(i));
            }
        }
        LineInstance::new(3, lines)
    }
}

/// Lines through `q` hitting a square grid of `grid_side` x `grid_side`
/// points with spacing `scale`, in the plane at height one grid-span above
/// `q`. The grid fits inside the ball around `q` of radius twice the span.
pub fn point_gadget(q: &Point, grid_side: usize, scale: f64) -> Result<Vec<Line>> {
    if grid_side < 2 {
        return Err(Error::InvalidParameter(format!(
            "gadget grid side must be at least 2, got {grid_side}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter("gadget scale must be positive".into()));
    }
    if q.dim() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: q.dim(),
        });
    }
    let span = (grid_side - 1) as f64 * scale;
    let q3 = arr(q);
    let mut lines = Vec::with_capacity(grid_side * grid_side);
    for i in 0..grid_side {
        for j in 0..grid_side {
            let g = [
                q3[0] - span / 2.0 + i as f64 * scale,
                q3[1] - span / 2.0 + j as f64 * scale,
                q3[2] + span,
            ];
            lines.push(Line::through(q, &pt(g))?);
        }
    }
    Ok(lines)
}

/// Ball radius that contains a gadget's whole grid.
pub fn gadget_ball_radius(grid_side: usize, scale: f64) -> f64 {
    2.0 * (grid_side - 1) as f64 * scale
}

/// Tour that follows the anchor chain and detours to each cover vertex:
/// cost is exactly 10 + 19*delta*|cover|.
pub fn completeness_tour_cube(c: &CubeConstruction, cover: &[VertexId]) -> Result<Tour> {
    if let Some((u, v)) = c.graph.uncovered_edge(cover) {
        return Err(Error::NotVertexCover(format!("edge {u} {v} is uncovered")));
    }
    let mut cover: Vec<VertexId> = cover.to_vec();
    cover.sort_unstable();
    cover.dedup();
    for v in &cover {
        if !(1..=3).contains(&v.class) || !(1..=c.graph.n).contains(&v.index) {
            return Err(Error::InvalidParameter(format!("unknown vertex {v}")));
        }
    }
    // detour_after[i] = waypoint inserted after chain point i
    let mut detour_after: Vec<Option<Point>> = vec![None; c.q_points.len()];
    for v in &cover {
        let i = c.q_pair_start[v.class as usize - 1][v.index - 1];
        detour_after[i] = Some(c.flat_point(*v).clone());
    }
    let mut waypoints = Vec::with_capacity(c.q_points.len() + cover.len());
    for (i, q) in c.q_points.iter().enumerate() {
        waypoints.push(q.clone());
        if let Some(w) = detour_after[i].take() {
            waypoints.push(w);
        }
    }
    Tour::new(waypoints)
}

/// Report of the numeric checks over a generated construction.
#[derive(Clone, Debug)]
pub struct CubeReport {
    pub checks: Vec<CheckResult>,
}

impl CubeReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

impl std::fmt::Display for CubeReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Runs all distance/angle checks on a construction.
pub fn verify_cube(c: &CubeConstruction) -> CubeReport {
    let n = c.graph.n as f64;
    let mut checks = Vec::new();

    // (a)/(b): non-incident line pairs keep their distance bound, before
    // and after flattening
    for (name, lines, bound) in [
        ("unflattened_skew_distance", &c.lines_unflat, 1.0 / (20.0 * n)),
        ("flattened_skew_distance", &c.lines_flat, 1.0 / (200.0 * n)),
    ] {
        let mut worst = f64::INFINITY;
        let mut detail = String::from("no non-incident pairs");
        for i in 0..lines.len() {
            for j in i + 1..lines.len() {
                let (ui, vi) = c.graph.edges[i];
                let (uj, vj) = c.graph.edges[j];
                if ui == uj || ui == vj || vi == uj || vi == vj {
                    continue;
                }
                let d = dist_line_line(&lines[i], &lines[j]).unwrap();
                if d - bound < worst {
                    worst = d - bound;
                    detail = format!("worst pair ({ui} {vi}) vs ({uj} {vj})");
                }
            }
        }
        checks.push(CheckResult {
            name,
            pass: worst >= -1e-12,
            worst_margin: worst,
            detail,
        });
    }

    // (c): minimum spacing of the flattened vertex points
    {
        let bound = c.sigma / (3.0 * n);
        let mut min = f64::INFINITY;
        let mut detail = String::new();
        for i in 0..c.points_flat.len() {
            for j in i + 1..c.points_flat.len() {
                let d = c.points_flat[i].1.dist(&c.points_flat[j].1);
                if d < min {
                    min = d;
                    detail = format!(
                        "closest pair {} {}",
                        c.points_flat[i].0, c.points_flat[j].0
                    );
                }
            }
        }
        // with one vertex per class there are no same-class pairs, so the
        // minimum sits above the bound instead of on it
        let pass = if c.graph.n == 1 {
            min >= bound - 1e-9
        } else {
            (min - bound).abs() <= 1e-9
        };
        checks.push(CheckResult {
            name: "flattened_point_spacing",
            pass,
            worst_margin: min - bound,
            detail,
        });
    }

    // (d): flattened face planes meet at a small angle
    {
        let mut worst = f64::INFINITY;
        let mut detail = String::new();
        for (a, fr) in c.frames.iter().enumerate() {
            if 0.25 - fr.face_angle < worst {
                worst = 0.25 - fr.face_angle;
            }
            if a == 0 {
                detail = format!("class-1 angle {:.6}", fr.face_angle);
            }
        }
        checks.push(CheckResult {
            name: "bisector_plane_angle",
            pass: worst > 0.0,
            worst_margin: worst,
            detail,
        });
    }

    // (e): every chain point keeps its clearance from every graph line
    {
        let bound = 9.9 * c.delta;
        let flat: Vec<([f64; 3], [f64; 3])> = c
            .lines_flat
            .iter()
            .map(|l| (arr(&l.base), [l.dir[0], l.dir[1], l.dir[2]]))
            .collect();
        let (worst, qi, li) = c
            .q_points
            .par_iter()
            .enumerate()
            .map(|(qi, q)| {
                let p = arr(q);
                let mut best = (f64::INFINITY, qi, 0usize);
                for (li, (base, dir)) in flat.iter().enumerate() {
                    let d = dist3_point_line(p, *base, *dir);
                    if d < best.0 {
                        best = (d, qi, li);
                    }
                }
                best
            })
            .reduce(
                || (f64::INFINITY, 0, 0),
                |a, b| if a.0 <= b.0 { a } else { b },
            );
        let detail = if c.lines_flat.is_empty() {
            String::from("no lines")
        } else {
            let (u, v) = c.graph.edges[li];
            format!("worst chain point {qi} vs line ({u} {v})")
        };
        checks.push(CheckResult {
            name: "chain_line_clearance",
            pass: worst > bound,
            worst_margin: worst - bound,
            detail,
        });
    }

    // (f): the chain stays outside the diagonal cylinder
    {
        let (worst, qi) = c
            .q_points
            .par_iter()
            .enumerate()
            .map(|(qi, q)| (dist_to_diagonal(arr(q)), qi))
            .reduce(
                || (f64::INFINITY, 0),
                |a, b| if a.0 <= b.0 { a } else { b },
            );
        checks.push(CheckResult {
            name: "chain_cylinder_clearance",
            pass: worst > c.cylinder_radius,
            worst_margin: worst - c.cylinder_radius,
            detail: format!("closest chain point {qi}"),
        });
    }

    CubeReport { checks }
}
