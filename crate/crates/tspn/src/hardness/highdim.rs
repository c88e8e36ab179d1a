//! High-dimensional vertex-cover reduction: blow a graph up by a
//! lexicographic product, embed the product's vertices as a near-unit
//! simplex, connect adjacent copies by lines, and read a vertex cover back
//! off any cheap tour through ball-visit statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{segment_intersects_ball, Line, Point, Tour};
use crate::hardness::SimpleGraph;
use crate::instance::LineInstance;

const EMBED_RETRIES: u64 = 200;

/// The embedded product instance derived from a source graph.
#[derive(Clone, Debug)]
pub struct HighDimConstruction {
    /// Source graph G.
    pub graph: SimpleGraph,
    /// Copies per vertex.
    pub alpha: usize,
    /// Product graph G' on alpha * n vertices; copy i of source vertex v
    /// has index v * alpha + i.
    pub blown: SimpleGraph,
    pub eps: f64,
    /// Allowed pairwise-distance distortion: distances lie in [1, 1+delta].
    pub delta: f64,
    /// Radius of the extraction balls around each embedded point.
    pub ball_radius: f64,
    /// Fraction of copies whose balls must be visited to elect a vertex.
    pub lambda: f64,
    /// Embedding dimension.
    pub dim: usize,
    /// One embedded point per product vertex.
    pub points: Vec<Point>,
    /// One line per product edge, parallel to `blown.edges`.
    pub lines: Vec<Line>,
}

impl HighDimConstruction {
    /// Index of copy `i` of source vertex `v` in the product graph.
    pub fn copy_index(&self, v: usize, i: usize) -> usize {
        v * self.alpha + i
    }

    /// Exports the line set as an instance.
    pub fn line_instance(&self) -> Result<LineInstance> {
        LineInstance::new(self.dim, self.lines.clone())
    }
}

/// Embeds `count` points with pairwise distances in [1, 1+delta]: an exact
/// unit simplex when the dimension allows, otherwise a rescaled Gaussian
/// projection retried until the distortion bound holds.
fn embed_points(count: usize, dim: usize, delta: f64, seed: u64) -> Result<Vec<Point>> {
    let basis_point = |i: usize| {
        let mut c = vec![0.0; dim];
        c[i] = 1.0 / 2f64.sqrt();
        Point::new(c).unwrap()
    };
    if count <= 1 {
        return Ok((0..count).map(basis_point).collect());
    }
    if dim >= count {
        // e_i / sqrt(2): all pairwise distances exactly 1
        return Ok((0..count).map(basis_point).collect());
    }
    let mut worst = f64::INFINITY;
    for attempt in 0..EMBED_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let scale = 1.0 / (2.0 * dim as f64).sqrt();
        let raw: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        let mut min = f64::INFINITY;
        let mut max: f64 = 0.0;
        for i in 0..count {
            for j in i + 1..count {
                let d: f64 = raw[i]
                    .iter()
                    .zip(&raw[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
                max = max.max(d);
            }
        }
        if min <= 0.0 {
            continue;
        }
        // rescale so the minimum pairwise distance is exactly 1
        let stretch = max / min;
        worst = worst.min(stretch - 1.0);
        if stretch <= 1.0 + delta {
            let pts = raw
                .into_iter()
                .map(|c| Point::new(c.into_iter().map(|x| x / min).collect()).unwrap())
                .collect();
            return Ok(pts);
        }
    }
    Err(Error::EmbeddingFailed(format!(
        "no embedding of {count} points into {dim} dims within distortion {delta} \
         after {EMBED_RETRIES} seeds; best achieved {worst:.6}"
    )))
}

/// Builds the product instance: alpha copies per vertex, complete bipartite
/// connections between copy sets of adjacent vertices, embedded points,
/// and one line per product edge.
pub fn gen_highdim(
    g: &SimpleGraph,
    eps: f64,
    alpha: usize,
    seed: u64,
) -> Result<HighDimConstruction> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::InvalidParameter(format!(
            "eps must lie in (0, 0.1], got {eps}"
        )));
    }
    if alpha == 0 {
        return Err(Error::InvalidParameter("alpha must be at least 1".into()));
    }
    let delta = eps * eps;
    let n_prime = g.n * alpha;
    let mut edges = Vec::with_capacity(g.edges.len() * alpha * alpha);
    for &(u, v) in &g.edges {
        for i in 0..alpha {
            for j in 0..alpha {
                edges.push((u * alpha + i, v * alpha + j));
            }
        }
    }
    let blown = SimpleGraph::new(n_prime, edges)?;
    let formula = (8.0 / (delta * delta) * (n_prime as f64).ln()).ceil() as usize;
    let dim = formula.min(n_prime).max(2);
    let points = embed_points(n_prime, dim, delta, seed)?;
    let lines = blown
        .edges
        .iter()
        .map(|&(u, v)| Line::through(&points[u], &points[v]))
        .collect::<Result<Vec<_>>>()?;
    Ok(HighDimConstruction {
        graph: g.clone(),
        alpha,
        blown,
        eps,
        delta,
        ball_radius: delta,
        lambda: 1.0 - eps * eps,
        dim,
        points,
        lines,
    })
}

/// Tour through every copy of every cover vertex: alpha*k points, each hop
/// at most 1+delta, so the cost is at most alpha*k*(1+delta).
pub fn completeness_tour_highdim(c: &HighDimConstruction, cover: &[usize]) -> Result<Tour> {
    if let Some((u, v)) = c.graph.uncovered_edge(cover) {
        return Err(Error::NotVertexCover(format!("edge ({u}, {v}) is uncovered")));
    }
    let mut cover: Vec<usize> = cover.to_vec();
    cover.sort_unstable();
    cover.dedup();
    if cover.iter().any(|&v| v >= c.graph.n) {
        return Err(Error::InvalidParameter("cover vertex out of range".into()));
    }
    if cover.is_empty() {
        // edgeless graph: a single-point zero-cost tour suffices
        return Tour::new(vec![c.points[0].clone()]);
    }
    let mut waypoints = Vec::with_capacity(cover.len() * c.alpha);
    for &v in &cover {
        for i in 0..c.alpha {
            waypoints.push(c.points[c.copy_index(v, i)].clone());
        }
    }
    let mut tour = Tour::new(waypoints)?;
    tour.meta = cover
        .iter()
        .flat_map(|&v| (0..c.alpha).map(move |i| Some(v * c.alpha + i)))
        .collect();
    Ok(tour)
}

/// Result of reading a vertex cover off a tour.
#[derive(Clone, Debug)]
pub struct VcExtraction {
    /// Elected source vertices: those with at least lambda*alpha visited
    /// copy balls.
    pub cover: Vec<usize>,
    /// Visited-ball count per source vertex.
    pub nonempty_counts: Vec<usize>,
    /// Product lines with neither endpoint ball visited.
    pub uncovered_lines: usize,
}

/// Marks each copy ball visited when some tour segment enters it, elects
/// vertices with at least lambda*alpha visited copies, and counts product
/// lines not covered by any visited endpoint ball.
pub fn extract_vc_highdim(c: &HighDimConstruction, t: &Tour) -> VcExtraction {
    let m = t.waypoints.len();
    let nonempty: Vec<bool> = c
        .points
        .iter()
        .map(|p| {
            if m == 1 {
                return t.waypoints[0].dist(p) <= c.ball_radius + 1e-12;
            }
            (0..m).any(|i| {
                let a = &t.waypoints[i];
                let b = &t.waypoints[(i + 1) % m];
                segment_intersects_ball(a, b, p, c.ball_radius)
            })
        })
        .collect();
    let mut nonempty_counts = vec![0usize; c.graph.n];
    for v in 0..c.graph.n {
        for i in 0..c.alpha {
            if nonempty[c.copy_index(v, i)] {
                nonempty_counts[v] += 1;
            }
        }
    }
    let threshold = c.lambda * c.alpha as f64 - 1e-9;
    let cover = (0..c.graph.n)
        .filter(|&v| nonempty_counts[v] as f64 >= threshold)
        .collect();
    let uncovered_lines = c
        .blown
        .edges
        .iter()
        .filter(|&&(u, v)| !nonempty[u] && !nonempty[v])
        .count();
    VcExtraction {
        cover,
        nonempty_counts,
        uncovered_lines,
    }
}

/// Distance from each tour waypoint to its nearest line, maximized over
/// lines: zero means the tour touches every line.
pub fn max_line_miss(c: &HighDimConstruction, t: &Tour) -> f64 {
    let m = t.waypoints.len();
    c.lines
        .iter()
        .map(|l| {
            (0..m)
                .map(|i| {
                    let a = &t.waypoints[i];
                    let b = &t.waypoints[(i + 1) % m];
                    crate::geometry::dist_segment_line(a, b, l).unwrap()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Worst margin of the off-ball clearance property: points sampled on each
/// line outside both endpoint balls keep distance at least ball_radius/2
/// from every other line. Returns (worst distance found, the bound).
pub fn off_ball_clearance(c: &HighDimConstruction, samples_per_line: usize) -> (f64, f64) {
    let bound = c.ball_radius / 2.0;
    let mut worst = f64::INFINITY;
    for (ei, &(u, v)) in c.blown.edges.iter().enumerate() {
        let l = &c.lines[ei];
        let pu = &c.points[u];
        let pv = &c.points[v];
        let t0 = l.project(pu);
        let t1 = l.project(pv);
        let lo = t0.min(t1) - 1.0;
        let hi = t0.max(t1) + 1.0;
        for s in 0..samples_per_line {
            let t = lo + (hi - lo) * s as f64 / (samples_per_line - 1) as f64;
            let p = l.at(t);
            if p.dist(pu) <= c.ball_radius || p.dist(pv) <= c.ball_radius {
                continue;
            }
            for (ej, other) in c.lines.iter().enumerate() {
                if ej == ei {
                    continue;
                }
                let d = crate::geometry::dist_point_line(&p, other).unwrap();
                worst = worst.min(d);
            }
        }
    }
    (worst, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist_point_segment;
    use crate::geometry::dist_point_line;

    fn k2() -> SimpleGraph {
        SimpleGraph::new(2, vec![(0, 1)]).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(gen_highdim(&k2(), 0.0, 2, 1).is_err());
        assert!(gen_highdim(&k2(), 0.2, 2, 1).is_err());
        assert!(gen_highdim(&k2(), 0.05, 0, 1).is_err());
    }

    #[test]
    fn single_edge_alpha_two_gives_complete_bipartite() {
        let c = gen_highdim(&k2(), 0.1, 2, 7).unwrap();
        assert_eq!(c.points.len(), 4);
        assert_eq!(c.lines.len(), 4);
        assert_eq!(c.blown.edges, vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
    }

    #[test]
    fn single_edge_alpha_one() {
        let c = gen_highdim(&k2(), 0.1, 1, 7).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.lines.len(), 1);
        let d = c.points[0].dist(&c.points[1]);
        assert!(d >= 1.0 - 1e-12 && d <= 1.0 + c.delta + 1e-12);
    }

    #[test]
    fn product_edge_count_scales_with_alpha_squared() {
        let g = SimpleGraph::petersen();
        for alpha in [1usize, 2, 3] {
            let c = gen_highdim(&g, 0.1, alpha, 3).unwrap();
            assert_eq!(c.blown.edges.len(), alpha * alpha * g.edges.len());
            assert_eq!(c.points.len(), alpha * g.n);
        }
    }

    #[test]
    fn all_pairwise_distances_within_distortion() {
        for (eps, alpha) in [(0.05, 2usize), (0.1, 4)] {
            let c = gen_highdim(&SimpleGraph::petersen(), eps, alpha, 11).unwrap();
            for i in 0..c.points.len() {
                for j in i + 1..c.points.len() {
                    let d = c.points[i].dist(&c.points[j]);
                    assert!(
                        d >= 1.0 - 1e-12 && d <= 1.0 + c.delta + 1e-12,
                        "pair ({i}, {j}) at {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_branch_rescales_min_to_one() {
        let pts = embed_points(6, 4, 2.0, 5).unwrap();
        let again = embed_points(6, 4, 2.0, 5).unwrap();
        let mut min = f64::INFINITY;
        let mut max: f64 = 0.0;
        for i in 0..pts.len() {
            assert_eq!(pts[i].coords, again[i].coords);
            for j in i + 1..pts.len() {
                let d = pts[i].dist(&pts[j]);
                min = min.min(d);
                max = max.max(d);
            }
        }
        assert!((min - 1.0).abs() < 1e-9);
        assert!(max <= 3.0);
    }

    #[test]
    fn gaussian_branch_reports_failure_with_achieved_distortion() {
        let err = embed_points(40, 2, 0.01, 5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("best achieved"), "{msg}");
    }

    #[test]
    fn completeness_tour_cost_and_feasibility() {
        // K2, cover {0}, alpha = 2
        let c = gen_highdim(&k2(), 0.1, 2, 7).unwrap();
        let t = completeness_tour_highdim(&c, &[0]).unwrap();
        assert_eq!(t.waypoints.len(), 2);
        assert!(t.cost() <= 2.0 * (1.0 + c.delta) + 1e-12);
        assert!(max_line_miss(&c, &t) < 1e-12);

        // Petersen, cover of size 6, alpha = 2
        let g = SimpleGraph::petersen();
        let cover = vec![0, 2, 4, 6, 7, 8];
        assert!(g.uncovered_edge(&cover).is_none());
        let c = gen_highdim(&g, 0.1, 2, 7).unwrap();
        let t = completeness_tour_highdim(&c, &cover).unwrap();
        assert_eq!(t.waypoints.len(), 12);
        assert!(t.cost() <= 12.0 * (1.0 + c.delta) + 1e-12);
        assert!(max_line_miss(&c, &t) < 1e-12);
    }

    #[test]
    fn completeness_tour_edgeless_graph() {
        let g = SimpleGraph::new(3, vec![]).unwrap();
        let c = gen_highdim(&g, 0.1, 2, 7).unwrap();
        let t = completeness_tour_highdim(&c, &[]).unwrap();
        assert_eq!(t.waypoints.len(), 1);
        assert_eq!(t.cost(), 0.0);
    }

    #[test]
    fn completeness_tour_rejects_non_cover() {
        let c = gen_highdim(&SimpleGraph::petersen(), 0.1, 2, 7).unwrap();
        let err = completeness_tour_highdim(&c, &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("uncovered"));
    }

    #[test]
    fn extraction_recovers_the_planted_cover() {
        let g = SimpleGraph::petersen();
        let cover = vec![0, 2, 4, 6, 7, 8];
        let c = gen_highdim(&g, 0.1, 2, 7).unwrap();
        let t = completeness_tour_highdim(&c, &cover).unwrap();
        let ex = extract_vc_highdim(&c, &t);
        assert_eq!(ex.cover, cover);
        assert_eq!(ex.uncovered_lines, 0);
        assert!(g.uncovered_edge(&ex.cover).is_none());
        for &v in &cover {
            assert_eq!(ex.nonempty_counts[v], c.alpha);
        }
    }

    #[test]
    fn extraction_far_tour_finds_nothing() {
        let c = gen_highdim(&k2(), 0.1, 2, 7).unwrap();
        let far: Vec<Point> = (0..2)
            .map(|i| {
                let mut coords = vec![100.0; c.dim];
                coords[0] += i as f64;
                Point::new(coords).unwrap()
            })
            .collect();
        let t = Tour::new(far).unwrap();
        let ex = extract_vc_highdim(&c, &t);
        assert!(ex.cover.is_empty());
        assert_eq!(ex.uncovered_lines, c.lines.len());
    }

    #[test]
    fn segment_enters_offset_ball() {
        let a = Point::new(vec![0.0, 0.0]).unwrap();
        let b = Point::new(vec![2.0, 0.0]).unwrap();
        let delta = 0.01;
        let center = Point::new(vec![1.0, delta / 2.0]).unwrap();
        assert!(segment_intersects_ball(&a, &b, &center, delta));
        let outside = Point::new(vec![1.0, 2.0 * delta]).unwrap();
        assert!(!segment_intersects_ball(&a, &b, &outside, delta));
    }

    #[test]
    fn off_ball_points_keep_half_radius_clearance() {
        let c = gen_highdim(&SimpleGraph::petersen(), 0.1, 1, 7).unwrap();
        let (worst, bound) = off_ball_clearance(&c, 41);
        assert!(worst >= bound, "clearance {worst} below {bound}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_highdim(&SimpleGraph::petersen(), 0.05, 2, 42).unwrap();
        let b = gen_highdim(&SimpleGraph::petersen(), 0.05, 2, 42).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.coords, y.coords);
        }
    }

    #[test]
    fn line_instance_roundtrip() {
        let c = gen_highdim(&k2(), 0.1, 2, 7).unwrap();
        let inst = c.line_instance().unwrap();
        assert_eq!(inst.lines.len(), 4);
        assert_eq!(inst.dim, c.dim);
        for (l, p) in [(0usize, 0usize), (3, 1)] {
            assert!(dist_point_line(&c.points[p], &inst.lines[l]).unwrap() < 1e-9);
        }
    }

    #[test]
    fn dist_point_segment_agrees_on_endpoints() {
        let a = Point::new(vec![0.0, 0.0]).unwrap();
        let b = Point::new(vec![1.0, 0.0]).unwrap();
        let p = Point::new(vec![2.0, 0.0]).unwrap();
        assert!((dist_point_segment(&p, &a, &b) - 1.0).abs() < 1e-12);
    }
}
