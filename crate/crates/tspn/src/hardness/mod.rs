//! Hardness-instance generators: a flattened-cube construction in R^3 and a
//! high-dimensional vertex-cover reduction, both with numeric verifiers.

pub mod cube;
pub mod highdim;

use crate::error::{Error, Result};

/// Vertex of a tripartite graph: class 1..=3, index 1..=n.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VertexId {
    pub class: u8,
    pub index: usize,
}

impl VertexId {
    pub fn new(class: u8, index: usize) -> VertexId {
        VertexId { class, index }
    }
}

impl std::fmt::Display for VertexId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v^{}_{}", self.class, self.index)
    }
}

/// Tripartite graph with three classes padded to equal size n; edges only
/// run between classes.
#[derive(Clone, Debug)]
pub struct TripartiteGraph {
    pub n: usize,
    pub edges: Vec<(VertexId, VertexId)>,
}

impl TripartiteGraph {
    /// Validates classes, index ranges, and the no-intra-class rule; edges
    /// are stored with the lower class first and deduplicated.
    pub fn new(n: usize, edges: Vec<(VertexId, VertexId)>) -> Result<TripartiteGraph> {
        if n == 0 {
            return Err(Error::InvalidParameter("class size must be positive".into()));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            for w in [u, v] {
                if !(1..=3).contains(&w.class) {
                    return Err(Error::InvalidParameter(format!("bad class in {w}")));
                }
                if !(1..=n).contains(&w.index) {
                    return Err(Error::InvalidParameter(format!(
                        "vertex index out of range in {w} (n = {n})"
                    )));
                }
            }
            if u.class == v.class {
                return Err(Error::InvalidParameter(format!(
                    "intra-class edge {u} {v}"
                )));
            }
            canon.push(if u.class <= v.class { (u, v) } else { (v, u) });
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(TripartiteGraph { n, edges: canon })
    }

    /// Complete tripartite graph: every cross-class pair is an edge.
    pub fn complete(n: usize) -> TripartiteGraph {
        let mut edges = Vec::new();
        for (a, b) in [(1u8, 2u8), (1, 3), (2, 3)] {
            for i in 1..=n {
                for j in 1..=n {
                    edges.push((VertexId::new(a, i), VertexId::new(b, j)));
                }
            }
        }
        TripartiteGraph { n, edges }
    }

    /// Builds from an edge list, padding every class to the largest index
    /// seen so the classes have equal size.
    pub fn from_edges(edges: Vec<(VertexId, VertexId)>) -> Result<TripartiteGraph> {
        let n = edges
            .iter()
            .flat_map(|(u, v)| [u.index, v.index])
            .max()
            .unwrap_or(1);
        TripartiteGraph::new(n, edges)
    }

    /// All 3n vertices, class-major.
    pub fn vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        (1u8..=3).flat_map(move |c| (1..=self.n).map(move |i| VertexId::new(c, i)))
    }

    /// Returns the first edge not covered by the set, if any.
    pub fn uncovered_edge(&self, cover: &[VertexId]) -> Option<(VertexId, VertexId)> {
        self.edges
            .iter()
            .find(|(u, v)| !cover.contains(u) && !cover.contains(v))
            .copied()
    }
}

/// Undirected simple graph on vertices 0..n, used as the vertex-cover
/// source for the high-dimensional reduction.
#[derive(Clone, Debug)]
pub struct SimpleGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SimpleGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<SimpleGraph> {
        if n == 0 {
            return Err(Error::InvalidParameter("graph needs a vertex".into()));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidParameter(format!(
                    "edge ({u}, {v}) out of range for n = {n}"
                )));
            }
            if u == v {
                return Err(Error::InvalidParameter(format!("self-loop at {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(SimpleGraph { n, edges: canon })
    }

    /// Complete graph K_n.
    pub fn complete(n: usize) -> SimpleGraph {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                edges.push((u, v));
            }
        }
        SimpleGraph { n, edges }
    }

    /// The Petersen graph (10 vertices, 15 edges, cover number 6).
    pub fn petersen() -> SimpleGraph {
        let mut edges = Vec::new();
        for i in 0..5 {
            edges.push((i, (i + 1) % 5));
            edges.push((i, i + 5));
            edges.push((i + 5, 5 + (i + 2) % 5));
        }
        SimpleGraph::new(10, edges).unwrap()
    }

    /// Returns the first edge not covered by the set, if any.
    pub fn uncovered_edge(&self, cover: &[usize]) -> Option<(usize, usize)> {
        self.edges
            .iter()
            .find(|(u, v)| !cover.contains(u) && !cover.contains(v))
            .copied()
    }
}

/// Outcome of one numeric check: its margin is positive when the checked
/// inequality holds strictly.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub worst_margin: f64,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} (margin {:.3e}) {}",
            self.name,
            if self.pass { "pass" } else { "FAIL" },
            self.worst_margin,
            self.detail
        )
    }
}
