//! The solution graph of the multipath DP: subproblem nodes (cell, boundary
//! state, visit bit) alternate with combination nodes (one admissible way to
//! split a state among the cell's children). Any root-to-leaves subtree that
//! takes one combination per subproblem and all children per combination is a
//! solution tree; its leaves carry path geometry that stitches into a tour.
//!
//! Edge costs are in original instance units. Only edges entering leaf
//! subproblems cost anything: the leaf's optimal multipath realization.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::error::{Error, Result};
use crate::geometry::{Point, Tour};
use crate::quadtree::{
    enumerate_combinations, facet_positions, leaf_paths, per_axis_portals, CellState, DpConfig,
    PerturbedInstance, ShiftedQuadtree, Slot, StateKey,
};

/// Geometry and coverage attached to a leaf subproblem.
#[derive(Clone, Debug)]
pub struct LeafGeom {
    /// Realization cost in original units.
    pub cost: f64,
    /// Polylines in fine coordinates, one per boundary pair (or one single
    /// vertex for a parked loop).
    pub paths: Vec<Vec<[i64; 3]>>,
    /// Groups covered when the visit bit is set.
    pub covered: Vec<usize>,
    /// Merged point id living in this leaf, if any.
    pub merged: Option<usize>,
    /// Fine coordinates of the visited point (visit bit set only).
    pub point_fine: Option<[i64; 3]>,
}

#[derive(Clone, Debug)]
pub enum NodeKind {
    Subproblem {
        cell: usize,
        key: StateKey,
        leaf: Option<LeafGeom>,
    },
    Combination {
        parent: usize,
        /// Child subproblem node ids, aligned with the cell's children.
        kids: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
    /// Quadtree level of the owning cell (combinations use the parent's).
    pub level: u32,
    /// Outgoing edge ids.
    pub out: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// The shared DAG of subproblems and combinations for one shifted quadtree.
#[derive(Clone, Debug)]
pub struct DpGraph {
    pub dim: usize,
    /// Fine units per grid unit (portal count per axis + 1).
    pub fs: i64,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub root: usize,
    pub n_groups: usize,
    /// Original coordinates of the grid origin.
    pub corner: Vec<f64>,
    /// Original length of one grid unit.
    pub unit: f64,
    /// Dissection shift in grid units.
    pub shift: [i64; 3],
    /// Original instance point ids behind each merged point.
    pub back: Vec<Vec<usize>>,
    node_of: HashMap<(usize, StateKey), usize>,
}

impl DpGraph {
    /// Maps a fine-coordinate vertex back to original space.
    pub fn fine_to_point(&self, f: &[i64; 3]) -> Point {
        Point {
            coords: (0..self.dim)
                .map(|j| {
                    self.corner[j]
                        + (f[j] as f64 / self.fs as f64 - self.shift[j] as f64) * self.unit
                })
                .collect(),
        }
    }

    /// Node ids of visit-true leaves covering each group; a group no leaf
    /// covers makes the whole relaxation infeasible.
    pub fn groups(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (id, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Subproblem { leaf: Some(geom), .. } = &node.kind {
                for &g in &geom.covered {
                    out[g].push(id);
                }
            }
        }
        for (g, s) in out.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Infeasible(format!(
                    "group {g} is not covered by any leaf of the solution graph"
                )));
            }
        }
        Ok(out)
    }

    pub fn node_id(&self, cell: usize, key: &StateKey) -> Option<usize> {
        self.node_of.get(&(cell, key.clone())).copied()
    }

    /// Assembles a bare graph from explicit nodes and edges (synthetic DAGs
    /// for relaxation and rounding tests). Out-lists are rebuilt from the
    /// edges; there is no geometry, so tour reconstruction is unavailable.
    pub fn from_parts(
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        root: usize,
        n_groups: usize,
    ) -> Result<DpGraph> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if root >= nodes.len() {
            return bad(format!("root {root} out of range"));
        }
        if !matches!(nodes[root].kind, NodeKind::Subproblem { .. }) {
            return bad("root must be a subproblem node".into());
        }
        let mut nodes = nodes;
        for n in &mut nodes {
            n.out.clear();
        }
        for (i, e) in edges.iter().enumerate() {
            if e.from >= nodes.len() || e.to >= nodes.len() {
                return bad(format!("edge {i} endpoint out of range"));
            }
            if !e.cost.is_finite() {
                return bad(format!("edge {i} has a non-finite cost"));
            }
            match (&nodes[e.from].kind, &nodes[e.to].kind) {
                (NodeKind::Subproblem { leaf: Some(_), .. }, _) => {
                    return bad(format!("edge {i} leaves a leaf subproblem"));
                }
                (NodeKind::Subproblem { .. }, NodeKind::Combination { .. }) => {
                    if nodes[e.to].level != nodes[e.from].level {
                        return bad(format!(
                            "edge {i}: a combination must sit on its subproblem's level"
                        ));
                    }
                }
                (NodeKind::Combination { .. }, NodeKind::Subproblem { .. }) => {
                    if nodes[e.to].level <= nodes[e.from].level {
                        return bad(format!(
                            "edge {i}: a combination's child must sit on a deeper level"
                        ));
                    }
                }
                _ => return bad(format!("edge {i} does not alternate node kinds")),
            }
            nodes[e.from].out.push(i);
        }
        // Trees must be trees: within one combination, the node sets
        // reachable from distinct children may not overlap.
        let mut reach: Vec<Option<HashSet<usize>>> = vec![None; nodes.len()];
        fn reach_of(
            v: usize,
            nodes: &[Node],
            edges: &[Edge],
            reach: &mut Vec<Option<HashSet<usize>>>,
        ) -> HashSet<usize> {
            if let Some(r) = &reach[v] {
                return r.clone();
            }
            let mut r = HashSet::new();
            r.insert(v);
            for &e in &nodes[v].out {
                r.extend(reach_of(edges[e].to, nodes, edges, reach));
            }
            reach[v] = Some(r.clone());
            r
        }
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.kind, NodeKind::Combination { .. }) {
                continue;
            }
            let mut union = HashSet::new();
            let mut total = 0usize;
            for &e in &n.out {
                let r = reach_of(edges[e].to, &nodes, &edges, &mut reach);
                total += r.len();
                union.extend(r);
            }
            if union.len() != total {
                return bad(format!(
                    "combination {i} has children with overlapping subgraphs"
                ));
            }
        }
        Ok(DpGraph {
            dim: 0,
            fs: 1,
            nodes,
            edges,
            root,
            n_groups,
            corner: Vec::new(),
            unit: 1.0,
            shift: [0; 3],
            back: Vec::new(),
            node_of: HashMap::new(),
        })
    }

    /// Human-readable dump for debugging.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.kind {
                NodeKind::Subproblem { cell, key, leaf } => {
                    let tag = match &key.state {
                        CellState::Idle => "idle".to_string(),
                        CellState::Loop => "loop".to_string(),
                        CellState::Paths(p) => format!("paths[{}]", p.len()),
                    };
                    let _ = writeln!(
                        s,
                        "{i}: sub cell={cell} level={} {tag} visit={} leaf={}",
                        n.level,
                        key.visit,
                        leaf.is_some()
                    );
                }
                NodeKind::Combination { parent, kids } => {
                    let _ = writeln!(s, "{i}: combo parent={parent} kids={kids:?}");
                }
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            let _ = writeln!(s, "e{i}: {} -> {} cost={}", e.from, e.to, e.cost);
        }
        s
    }
}

struct Builder<'a> {
    pi: &'a PerturbedInstance,
    tree: &'a ShiftedQuadtree,
    cfg: &'a DpConfig,
    force: bool,
    fs: i64,
    g: DpGraph,
    rejected: HashSet<(usize, StateKey)>,
    queue: VecDeque<usize>,
}

impl<'a> Builder<'a> {
    /// Finds or creates the subproblem node; None marks an infeasible leaf.
    fn sub_node(&mut self, cell: usize, key: StateKey) -> Result<Option<usize>> {
        if let Some(&id) = self.g.node_of.get(&(cell, key.clone())) {
            return Ok(Some(id));
        }
        if self.rejected.contains(&(cell, key.clone())) {
            return Ok(None);
        }
        let c = &self.tree.cells[cell];
        let leaf = if c.is_leaf() {
            let merged = c.points.first().copied();
            let point_fine = merged.map(|m| {
                let sp = self.tree.shifted_points[m];
                [sp[0] * self.fs, sp[1] * self.fs, sp[2] * self.fs]
            });
            match leaf_paths(c, self.tree.dim, self.fs, &key, point_fine) {
                Ok((fine_cost, paths)) => Some(LeafGeom {
                    cost: fine_cost * self.g.unit / self.fs as f64,
                    paths,
                    covered: if key.visit {
                        self.pi.memberships[merged.unwrap()].clone()
                    } else {
                        Vec::new()
                    },
                    merged,
                    point_fine: if key.visit { point_fine } else { None },
                }),
                Err(Error::InvalidParameter(msg)) => return Err(Error::InvalidParameter(msg)),
                Err(_) => {
                    self.rejected.insert((cell, key));
                    return Ok(None);
                }
            }
        } else {
            None
        };
        let id = self.g.nodes.len();
        if id >= self.cfg.node_budget {
            return Err(Error::BudgetExceeded {
                budget: self.cfg.node_budget,
                what: "solution graph nodes",
            });
        }
        let is_leaf = leaf.is_some() || c.is_leaf();
        self.g.nodes.push(Node {
            kind: NodeKind::Subproblem { cell, key: key.clone(), leaf },
            level: c.level,
            out: Vec::new(),
        });
        self.g.node_of.insert((cell, key), id);
        if !is_leaf {
            self.queue.push_back(id);
        }
        Ok(Some(id))
    }

    /// Expands one internal subproblem into its combination nodes.
    fn expand(&mut self, id: usize) -> Result<()> {
        let (cell, key) = match &self.g.nodes[id].kind {
            NodeKind::Subproblem { cell, key, .. } => (*cell, key.clone()),
            _ => unreachable!("only subproblems are queued"),
        };
        let level = self.g.nodes[id].level;
        let combos = enumerate_combinations(self.tree, cell, &key.state, self.cfg, self.force)?;
        let children = self.tree.cells[cell].children.clone();
        for combo in combos {
            // Visit-bit options per child.
            let options: Vec<Vec<bool>> = combo
                .iter()
                .zip(&children)
                .map(|(st, &kc)| {
                    let c = &self.tree.cells[kc];
                    let leaf_with_point = c.is_leaf() && !c.points.is_empty();
                    match st {
                        CellState::Idle => vec![false],
                        CellState::Loop => vec![c.is_leaf()],
                        CellState::Paths(_) => {
                            if leaf_with_point {
                                if self.force {
                                    vec![true]
                                } else {
                                    vec![true, false]
                                }
                            } else {
                                vec![false]
                            }
                        }
                    }
                })
                .collect();
            let mut pick = vec![0usize; options.len()];
            'variants: loop {
                let mut kid_ids = Vec::with_capacity(children.len());
                let mut ok = true;
                for (t, &kc) in children.iter().enumerate() {
                    let kkey = StateKey {
                        state: combo[t].clone(),
                        visit: options[t][pick[t]],
                    };
                    match self.sub_node(kc, kkey)? {
                        Some(kid) => kid_ids.push(kid),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    let combo_id = self.g.nodes.len();
                    if combo_id >= self.cfg.node_budget {
                        return Err(Error::BudgetExceeded {
                            budget: self.cfg.node_budget,
                            what: "solution graph nodes",
                        });
                    }
                    self.g.nodes.push(Node {
                        kind: NodeKind::Combination { parent: id, kids: kid_ids.clone() },
                        level,
                        out: Vec::new(),
                    });
                    let e_in = self.g.edges.len();
                    self.g.edges.push(Edge { from: id, to: combo_id, cost: 0.0 });
                    self.g.nodes[id].out.push(e_in);
                    for &kid in &kid_ids {
                        let cost = match &self.g.nodes[kid].kind {
                            NodeKind::Subproblem { leaf: Some(geom), .. } => geom.cost,
                            _ => 0.0,
                        };
                        let e = self.g.edges.len();
                        self.g.edges.push(Edge { from: combo_id, to: kid, cost });
                        self.g.nodes[combo_id].out.push(e);
                    }
                }
                // Advance the mixed-radix visit-bit counter.
                for t in (0..pick.len()).rev() {
                    pick[t] += 1;
                    if pick[t] < options[t].len() {
                        continue 'variants;
                    }
                    pick[t] = 0;
                }
                break;
            }
        }
        Ok(())
    }
}

/// Builds the full solution graph. With `force` set every merged point must
/// be visited (point TSP); without it visits are optional and tracked per
/// group for the covering relaxation.
pub fn build_dag(
    pi: &PerturbedInstance,
    tree: &ShiftedQuadtree,
    cfg: &DpConfig,
    force: bool,
) -> Result<DpGraph> {
    let k = per_axis_portals(cfg.m, tree.dim)?;
    let fs = (k + 1) as i64;
    let root_key = StateKey {
        state: CellState::Loop,
        visit: tree.cells[0].is_leaf(),
    };
    let g = DpGraph {
        dim: tree.dim,
        fs,
        nodes: Vec::new(),
        edges: Vec::new(),
        root: 0,
        n_groups: pi.groups.len(),
        corner: pi.corner.clone(),
        unit: pi.g / 8.0,
        shift: tree.shift,
        back: pi.back.clone(),
        node_of: HashMap::new(),
    };
    let mut b = Builder {
        pi,
        tree,
        cfg,
        force,
        fs,
        g,
        rejected: HashSet::new(),
        queue: VecDeque::new(),
    };
    let root = b
        .sub_node(0, root_key)?
        .ok_or_else(|| Error::Infeasible("the root state admits no realization".into()))?;
    b.g.root = root;
    while let Some(id) = b.queue.pop_front() {
        b.expand(id)?;
    }
    Ok(b.g)
}

/// One solution tree: indices into the graph's node and edge lists.
#[derive(Clone, Debug)]
pub struct SolutionTree {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
}

impl SolutionTree {
    pub fn cost(&self, dag: &DpGraph) -> f64 {
        self.edges.iter().map(|&e| dag.edges[e].cost).sum()
    }

    /// Merged point ids visited by this tree, sorted.
    pub fn visited_merged(&self, dag: &DpGraph) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|&n| match &dag.nodes[n].kind {
                NodeKind::Subproblem { leaf: Some(geom), .. } if geom.point_fine.is_some() => {
                    geom.merged
                }
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v
    }
}

/// Values every node by the min/sum recurrence and extracts the cheapest
/// solution tree, deterministically (first minimal edge in creation order).
pub fn min_cost_tree(dag: &DpGraph) -> Result<SolutionTree> {
    let mut value = vec![f64::INFINITY; dag.nodes.len()];
    let max_level = dag.nodes.iter().map(|n| n.level).max().unwrap_or(0);
    // Combinations at level L need subproblems at L+1; subproblems need their
    // own combinations. Sweep levels top-down in dependency order.
    let mut by_level: Vec<(Vec<usize>, Vec<usize>)> =
        vec![(Vec::new(), Vec::new()); max_level as usize + 1];
    for (i, n) in dag.nodes.iter().enumerate() {
        match n.kind {
            NodeKind::Combination { .. } => by_level[n.level as usize].0.push(i),
            NodeKind::Subproblem { .. } => by_level[n.level as usize].1.push(i),
        }
    }
    for l in (0..=max_level as usize).rev() {
        for &i in &by_level[l].0 {
            let mut s = 0.0;
            for &e in &dag.nodes[i].out {
                s += dag.edges[e].cost + value[dag.edges[e].to];
            }
            value[i] = s;
        }
        for &i in &by_level[l].1 {
            if let NodeKind::Subproblem { leaf: Some(_), .. } = dag.nodes[i].kind {
                value[i] = 0.0;
                continue;
            }
            let mut best = f64::INFINITY;
            for &e in &dag.nodes[i].out {
                let v = dag.edges[e].cost + value[dag.edges[e].to];
                if v < best {
                    best = v;
                }
            }
            value[i] = best;
        }
    }
    if !value[dag.root].is_finite() {
        return Err(Error::Infeasible(
            "no tour satisfies the crossing caps; raise the portal count or crossing limits"
                .into(),
        ));
    }
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut stack = vec![dag.root];
    while let Some(i) = stack.pop() {
        nodes.push(i);
        match &dag.nodes[i].kind {
            NodeKind::Subproblem { leaf: Some(_), .. } => {}
            NodeKind::Subproblem { .. } => {
                let mut best: Option<(f64, usize)> = None;
                for &e in &dag.nodes[i].out {
                    let v = dag.edges[e].cost + value[dag.edges[e].to];
                    if best.map_or(true, |(bv, _)| v < bv) {
                        best = Some((v, e));
                    }
                }
                let (_, e) = best.expect("finite internal node has an out edge");
                edges.push(e);
                stack.push(dag.edges[e].to);
            }
            NodeKind::Combination { .. } => {
                for &e in &dag.nodes[i].out {
                    edges.push(e);
                    stack.push(dag.edges[e].to);
                }
            }
        }
    }
    Ok(SolutionTree { nodes, edges })
}

/// Structural check: a solution tree must contain the root with in-degree 0,
/// give every other node in-degree 1, take exactly one combination per
/// internal subproblem, all children per combination, and nothing below
/// leaves.
pub fn validate_solution_tree(dag: &DpGraph, t: &SolutionTree) -> bool {
    let nset: HashSet<usize> = t.nodes.iter().copied().collect();
    if nset.len() != t.nodes.len() || !nset.contains(&dag.root) {
        return false;
    }
    let eset: HashSet<usize> = t.edges.iter().copied().collect();
    if eset.len() != t.edges.len() {
        return false;
    }
    let mut indeg: HashMap<usize, usize> = HashMap::new();
    let mut outdeg: HashMap<usize, usize> = HashMap::new();
    for &e in &t.edges {
        let edge = &dag.edges[e];
        if !nset.contains(&edge.from) || !nset.contains(&edge.to) {
            return false;
        }
        *indeg.entry(edge.to).or_insert(0) += 1;
        *outdeg.entry(edge.from).or_insert(0) += 1;
    }
    for &n in &t.nodes {
        let ind = indeg.get(&n).copied().unwrap_or(0);
        if n == dag.root {
            if ind != 0 {
                return false;
            }
        } else if ind != 1 {
            return false;
        }
        let out = outdeg.get(&n).copied().unwrap_or(0);
        match &dag.nodes[n].kind {
            NodeKind::Subproblem { leaf: Some(_), .. } => {
                if out != 0 {
                    return false;
                }
            }
            NodeKind::Subproblem { .. } => {
                if out != 1 {
                    return false;
                }
            }
            NodeKind::Combination { .. } => {
                if out != dag.nodes[n].out.len() {
                    return false;
                }
            }
        }
    }
    // Reachability from the root over chosen edges.
    let mut seen = HashSet::new();
    seen.insert(dag.root);
    let mut stack = vec![dag.root];
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for &e in &t.edges {
        adj.entry(dag.edges[e].from).or_default().push(dag.edges[e].to);
    }
    while let Some(v) = stack.pop() {
        for &w in adj.get(&v).into_iter().flatten() {
            if seen.insert(w) {
                stack.push(w);
            }
        }
    }
    seen.len() == t.nodes.len()
}

/// Stitches a solution tree's leaf polylines into one closed tour, gluing
/// child fragments cell by cell so the result realizes the tree's own walk
/// structure. Returns the tour (original coordinates) and the original
/// instance point ids it visits, in tour order.
pub fn tree_to_tour(t: &SolutionTree, dag: &DpGraph) -> Result<(Tour, Vec<usize>)> {
    let mut chosen: HashMap<usize, usize> = HashMap::new();
    for &e in &t.edges {
        let edge = &dag.edges[e];
        if matches!(dag.nodes[edge.to].kind, NodeKind::Combination { .. }) {
            chosen.insert(edge.from, edge.to);
        }
    }
    let mut verts = match realize(dag, &chosen, dag.root)? {
        RealOut::Closed(v) => v,
        _ => {
            return Err(Error::Infeasible(
                "the root subproblem did not realize into a closed walk".into(),
            ))
        }
    };
    verts.dedup();
    if verts.len() > 1 && verts.first() == verts.last() {
        verts.pop();
    }
    let mut visit_points: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    for &n in &t.nodes {
        if let NodeKind::Subproblem { leaf: Some(geom), .. } = &dag.nodes[n].kind {
            if let (Some(pf), Some(m)) = (geom.point_fine, geom.merged) {
                visit_points.insert(pf, m);
            }
        }
    }
    let mut waypoints = Vec::new();
    let mut meta = Vec::new();
    let mut visited: Vec<usize> = Vec::new();
    let mut seen_pts: HashSet<usize> = HashSet::new();
    for f in &verts {
        waypoints.push(dag.fine_to_point(f));
        match visit_points.get(f) {
            Some(&m) => {
                meta.push(Some(dag.back[m][0]));
                if seen_pts.insert(m) {
                    visited.extend(dag.back[m].iter().copied());
                }
            }
            None => meta.push(None),
        }
    }
    let tour = Tour::with_meta(waypoints, meta)?;
    debug_assert!({
        let tc = tour.cost();
        let sc = t.cost(dag);
        (tc - sc).abs() <= 1e-9 * tc.abs().max(1.0)
    });
    Ok((tour, visited))
}

/// Realized geometry of one chosen subproblem.
enum RealOut {
    /// Idle: nothing to stitch.
    None,
    /// Loop: one closed polyline (first vertex not repeated at the end,
    /// except when produced by a circuit over child fragments).
    Closed(Vec<[i64; 3]>),
    /// Paths: one polyline per state pair, aligned with and oriented like it.
    Open(Vec<Vec<[i64; 3]>>),
}

/// One child fragment, oriented from `a` to `b`.
struct Frag {
    a: [i64; 3],
    b: [i64; 3],
    pl: Vec<[i64; 3]>,
}

fn realize(dag: &DpGraph, chosen: &HashMap<usize, usize>, id: usize) -> Result<RealOut> {
    let (key, leaf) = match &dag.nodes[id].kind {
        NodeKind::Subproblem { key, leaf, .. } => (key, leaf),
        NodeKind::Combination { .. } => unreachable!("realization walks subproblems"),
    };
    if let Some(geom) = leaf {
        return Ok(match &key.state {
            CellState::Idle => RealOut::None,
            CellState::Loop => RealOut::Closed(geom.paths[0].clone()),
            CellState::Paths(_) => RealOut::Open(geom.paths.clone()),
        });
    }
    if key.state == CellState::Idle {
        return Ok(RealOut::None);
    }
    let combo = *chosen.get(&id).ok_or_else(|| {
        Error::Infeasible("solution tree lacks a combination for an internal subproblem".into())
    })?;
    let kids = match &dag.nodes[combo].kind {
        NodeKind::Combination { kids, .. } => kids.clone(),
        _ => unreachable!("chosen edges target combinations"),
    };
    let mut delegate: Option<Vec<[i64; 3]>> = None;
    let mut frags: Vec<Frag> = Vec::new();
    for &kid in &kids {
        let kkey = match &dag.nodes[kid].kind {
            NodeKind::Subproblem { key, .. } => key.clone(),
            _ => unreachable!(),
        };
        match realize(dag, chosen, kid)? {
            RealOut::None => {}
            RealOut::Closed(v) => {
                debug_assert!(delegate.is_none(), "one delegated loop per combination");
                delegate = Some(v);
            }
            RealOut::Open(pls) => {
                let pairs = match &kkey.state {
                    CellState::Paths(p) => p,
                    _ => unreachable!("open realizations come from path states"),
                };
                for (pr, pl) in pairs.iter().zip(pls) {
                    frags.push(Frag { a: pr.0.pos, b: pr.1.pos, pl });
                }
            }
        }
    }
    match &key.state {
        CellState::Loop => {
            if let Some(v) = delegate {
                debug_assert!(frags.is_empty());
                return Ok(RealOut::Closed(v));
            }
            if frags.is_empty() {
                return Err(Error::Infeasible(
                    "a loop subproblem realized no fragments".into(),
                ));
            }
            let (start, order) = euler_circuit(&frags)?;
            Ok(RealOut::Closed(stitch(&frags, start, &order)))
        }
        CellState::Paths(pairs) => {
            debug_assert!(delegate.is_none());
            let walks = decompose_walks(&frags, pairs)?;
            let mut out = Vec::with_capacity(pairs.len());
            for (i, w) in walks.iter().enumerate() {
                let mut v = stitch(&frags, pairs[i].0.pos, w);
                if v.len() == 1 {
                    v.push(pairs[i].1.pos);
                }
                out.push(v);
            }
            Ok(RealOut::Open(out))
        }
        CellState::Idle => unreachable!(),
    }
}

/// Concatenates oriented fragments starting at `start`, sharing endpoints.
fn stitch(frags: &[Frag], start: [i64; 3], order: &[(usize, bool)]) -> Vec<[i64; 3]> {
    let mut verts = vec![start];
    for &(fid, fwd) in order {
        let pl = &frags[fid].pl;
        let n = pl.len();
        debug_assert_eq!(if fwd { pl[0] } else { pl[n - 1] }, *verts.last().unwrap());
        if fwd {
            verts.extend(pl[1..].iter().copied());
        } else {
            verts.extend(pl[..n - 1].iter().rev().copied());
        }
    }
    verts
}

/// Euler circuit over child fragments glued at shared endpoint positions;
/// returns the start position and the fragment order with orientations.
fn euler_circuit(frags: &[Frag]) -> Result<([i64; 3], Vec<(usize, bool)>)> {
    fn intern(
        p: [i64; 3],
        vid: &mut BTreeMap<[i64; 3], usize>,
        verts: &mut Vec<[i64; 3]>,
    ) -> usize {
        if let Some(&i) = vid.get(&p) {
            i
        } else {
            let i = verts.len();
            verts.push(p);
            vid.insert(p, i);
            i
        }
    }
    let mut vid: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    let mut verts: Vec<[i64; 3]> = Vec::new();
    let mut ends = Vec::with_capacity(frags.len());
    for f in frags {
        let ia = intern(f.a, &mut vid, &mut verts);
        let ib = intern(f.b, &mut vid, &mut verts);
        ends.push((ia, ib));
    }
    let mut adj: Vec<Vec<(usize, usize, bool)>> = vec![Vec::new(); verts.len()];
    let mut deg = vec![0usize; verts.len()];
    for (fid, &(ia, ib)) in ends.iter().enumerate() {
        adj[ia].push((ib, fid, true));
        if ia != ib {
            adj[ib].push((ia, fid, false));
        }
        deg[ia] += 1;
        deg[ib] += 1;
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    if deg.iter().any(|&x| x % 2 != 0) {
        return Err(Error::Infeasible(
            "child fragments have odd degree at a shared portal".into(),
        ));
    }
    let start = (0..verts.len()).min_by_key(|&i| verts[i]).unwrap();
    let mut used = vec![false; frags.len()];
    let mut next = vec![0usize; verts.len()];
    let mut stack: Vec<(usize, Option<(usize, bool)>)> = vec![(start, None)];
    let mut order = Vec::new();
    while let Some(&(v, _)) = stack.last() {
        let mut advanced = false;
        while next[v] < adj[v].len() {
            let (w, fid, fwd) = adj[v][next[v]];
            next[v] += 1;
            if !used[fid] {
                used[fid] = true;
                stack.push((w, Some((fid, fwd))));
                advanced = true;
                break;
            }
        }
        if !advanced {
            let (_, e) = stack.pop().unwrap();
            if let Some(x) = e {
                order.push(x);
            }
        }
    }
    if used.iter().any(|&u| !u) {
        return Err(Error::Infeasible(
            "child fragments are disconnected inside a cell".into(),
        ));
    }
    order.reverse();
    Ok((verts[start], order))
}

/// Partitions child fragments into one walk per parent boundary pair, each
/// walk running from the pair's first slot to its second, consuming every
/// fragment exactly once. Small exact-cover backtracking.
fn decompose_walks(
    frags: &[Frag],
    pairs: &[(Slot, Slot)],
) -> Result<Vec<Vec<(usize, bool)>>> {
    fn go(
        frags: &[Frag],
        pairs: &[(Slot, Slot)],
        pi: usize,
        cur: [i64; 3],
        used: &mut Vec<bool>,
        walks: &mut Vec<Vec<(usize, bool)>>,
    ) -> bool {
        if cur == pairs[pi].1.pos {
            if pi + 1 == pairs.len() {
                if used.iter().all(|&u| u) {
                    return true;
                }
            } else {
                walks.push(Vec::new());
                if go(frags, pairs, pi + 1, pairs[pi + 1].0.pos, used, walks) {
                    return true;
                }
                walks.pop();
            }
        }
        for fid in 0..frags.len() {
            if used[fid] {
                continue;
            }
            for fwd in [true, false] {
                if !fwd && frags[fid].a == frags[fid].b {
                    continue;
                }
                let (s, t) = if fwd {
                    (frags[fid].a, frags[fid].b)
                } else {
                    (frags[fid].b, frags[fid].a)
                };
                if s != cur {
                    continue;
                }
                used[fid] = true;
                walks[pi].push((fid, fwd));
                if go(frags, pairs, pi, t, used, walks) {
                    return true;
                }
                walks[pi].pop();
                used[fid] = false;
            }
        }
        false
    }
    let mut used = vec![false; frags.len()];
    let mut walks: Vec<Vec<(usize, bool)>> = vec![Vec::new()];
    if go(frags, pairs, 0, pairs[0].0.pos, &mut used, &mut walks) {
        Ok(walks)
    } else {
        Err(Error::Infeasible(
            "child fragments do not decompose into the parent's boundary pairs".into(),
        ))
    }
}

/// One tour fragment inside a cell during reconstruction.
#[derive(Clone, Debug)]
enum Piece {
    /// A closed walk fully inside the cell.
    Closed(Vec<[i64; 3]>),
    /// An open walk entering and leaving through cell facets.
    Open {
        verts: Vec<[i64; 3]>,
        f_in: u8,
        f_out: u8,
    },
}

/// Recovers a solution tree from a tour produced by this DP family. Exact
/// integer arithmetic classifies every segment; tours that cross walls off
/// the portal lattice or otherwise leave the family are rejected as NotLight.
pub fn tour_to_tree(tour: &Tour, dag: &DpGraph, tree: &ShiftedQuadtree) -> Result<SolutionTree> {
    if tour.waypoints.is_empty() {
        return Err(Error::EmptyTour);
    }
    let fs = dag.fs;
    let mut verts: Vec<[i64; 3]> = Vec::new();
    for w in &tour.waypoints {
        if w.coords.len() != dag.dim {
            return Err(Error::DimensionMismatch {
                expected: dag.dim,
                got: w.coords.len(),
            });
        }
        let mut f = [0i64; 3];
        for j in 0..dag.dim {
            let v = (w.coords[j] - dag.corner[j]) / dag.unit * fs as f64;
            let r = v.round();
            if (v - r).abs() > 1e-6 {
                return Err(Error::NotLight(format!(
                    "waypoint coordinate {} is off the portal grid",
                    w.coords[j]
                )));
            }
            f[j] = r as i64 + dag.shift[j] * fs;
        }
        verts.push(f);
    }
    verts.dedup();
    if verts.len() > 1 && verts.first() == verts.last() {
        verts.pop();
    }
    let ctx = Recon { dag, tree, fs };
    let (node, nodes, edges) = ctx.descend(0, vec![Piece::Closed(verts)])?;
    debug_assert_eq!(node, dag.root);
    let t = SolutionTree { nodes, edges };
    debug_assert!(validate_solution_tree(dag, &t));
    Ok(t)
}

struct Recon<'a> {
    dag: &'a DpGraph,
    tree: &'a ShiftedQuadtree,
    fs: i64,
}

impl<'a> Recon<'a> {
    /// Fine coordinates of the point in a leaf cell, if any.
    fn leaf_point(&self, cell: usize) -> Option<[i64; 3]> {
        self.tree.cells[cell].points.first().map(|&m| {
            let sp = self.tree.shifted_points[m];
            [sp[0] * self.fs, sp[1] * self.fs, sp[2] * self.fs]
        })
    }

    /// Derives the state key a piece multiset imposes on a cell.
    fn key_of(&self, cell: usize, pieces: &[Piece]) -> Result<StateKey> {
        let is_leaf = self.tree.cells[cell].is_leaf();
        let pf = if is_leaf { self.leaf_point(cell) } else { None };
        if pieces.is_empty() {
            return Ok(StateKey { state: CellState::Idle, visit: false });
        }
        if pieces.len() == 1 {
            if let Piece::Closed(vs) = &pieces[0] {
                if is_leaf {
                    let p = pf.ok_or_else(|| {
                        Error::NotLight("closed loop inside an empty leaf".into())
                    })?;
                    if vs.iter().any(|v| *v != p) {
                        return Err(Error::NotLight(
                            "closed loop inside a leaf strays from its point".into(),
                        ));
                    }
                    return Ok(StateKey { state: CellState::Loop, visit: true });
                }
                return Ok(StateKey { state: CellState::Loop, visit: false });
            }
        }
        let mut pairs = Vec::new();
        let mut visit = false;
        for p in pieces {
            match p {
                Piece::Closed(_) => {
                    return Err(Error::NotLight(
                        "a closed fragment coexists with open fragments in one cell".into(),
                    ))
                }
                Piece::Open { verts, f_in, f_out } => {
                    pairs.push((
                        Slot { facet: *f_in, pos: verts[0] },
                        Slot { facet: *f_out, pos: *verts.last().unwrap() },
                    ));
                    if let Some(pt) = pf {
                        if verts.contains(&pt) {
                            visit = true;
                        }
                    }
                }
            }
        }
        Ok(StateKey { state: crate::quadtree::paths_state(pairs), visit })
    }

    fn descend(
        &self,
        cell: usize,
        pieces: Vec<Piece>,
    ) -> Result<(usize, Vec<usize>, Vec<usize>)> {
        let key = self.key_of(cell, &pieces)?;
        let id = self.dag.node_id(cell, &key).ok_or_else(|| {
            Error::NotLight(format!(
                "cell {cell} state {key:?} is outside the solution graph"
            ))
        })?;
        if self.tree.cells[cell].is_leaf() {
            return Ok((id, vec![id], Vec::new()));
        }
        let alternatives = self.split(cell, &pieces)?;
        let mut last_err =
            Error::NotLight(format!("cell {cell}: no child assignment matches the graph"));
        'alts: for kid_pieces in alternatives {
            // Child keys determine the combination node to match.
            let children = &self.tree.cells[cell].children;
            let mut kid_ids = Vec::with_capacity(children.len());
            for (t, &kc) in children.iter().enumerate() {
                let kkey = match self.key_of(kc, &kid_pieces[t]) {
                    Ok(k) => k,
                    Err(e) => {
                        last_err = e;
                        continue 'alts;
                    }
                };
                match self.dag.node_id(kc, &kkey) {
                    Some(kid) => kid_ids.push(kid),
                    None => {
                        last_err = Error::NotLight(format!(
                            "child cell {kc} state {kkey:?} is outside the solution graph"
                        ));
                        continue 'alts;
                    }
                }
            }
            let mut combo_edge = None;
            for &e in &self.dag.nodes[id].out {
                let to = self.dag.edges[e].to;
                if let NodeKind::Combination { kids, .. } = &self.dag.nodes[to].kind {
                    if kids == &kid_ids {
                        combo_edge = Some((e, to));
                        break;
                    }
                }
            }
            let (e_combo, combo) = match combo_edge {
                Some(x) => x,
                None => {
                    last_err = Error::NotLight(format!(
                        "cell {cell}: child states do not form a combination in the graph"
                    ));
                    continue 'alts;
                }
            };
            let mut nodes = vec![id, combo];
            let mut edges = vec![e_combo];
            edges.extend(self.dag.nodes[combo].out.iter().copied());
            let mut ok = true;
            for (t, &kc) in children.iter().enumerate() {
                match self.descend(kc, kid_pieces[t].clone()) {
                    Ok((_, kn, ke)) => {
                        nodes.extend(kn);
                        edges.extend(ke);
                    }
                    Err(e) => {
                        last_err = e;
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                return Ok((id, nodes, edges));
            }
        }
        Err(last_err)
    }


    /// Splits the cell's pieces among its children. Returns one per-kid piece
    /// assignment per resolution of wall-riding ambiguities (usually one).
    fn split(&self, cell: usize, pieces: &[Piece]) -> Result<Vec<Vec<Vec<Piece>>>> {
        let c = &self.tree.cells[cell];
        let d = self.tree.dim;
        let nk = 1usize << d;
        let h = c.side / 2;
        let fs = self.fs;
        let mid: Vec<i64> = (0..d).map(|j| (c.lo[j] + h) * fs).collect();

        // Refine every piece: insert exact crossing vertices on strictly
        // straddling segments, then list candidate children per segment.
        let mut sps: Vec<SegPiece> = Vec::new();
        for p in pieces {
            let (raw, closed, f_in, f_out) = match p {
                Piece::Closed(v) => (v.clone(), true, 0u8, 0u8),
                Piece::Open { verts, f_in, f_out } => (verts.clone(), false, *f_in, *f_out),
            };
            let n_raw = raw.len();
            let seg_count = if closed {
                if n_raw == 1 {
                    0
                } else {
                    n_raw
                }
            } else {
                n_raw - 1
            };
            let mut verts: Vec<[i64; 3]> = Vec::new();
            if seg_count == 0 {
                verts.push(raw[0]);
            }
            for s in 0..seg_count {
                let u = raw[s];
                let v = raw[(s + 1) % n_raw];
                if verts.last() != Some(&u) {
                    verts.push(u);
                }
                // Crossings strictly inside the segment, exact rationals
                // t = num/den (den normalized positive) of the parameter.
                let mut cuts: Vec<(i128, i128, [i64; 3])> = Vec::new();
                for j in 0..d {
                    let (mn, mx) = (u[j].min(v[j]), u[j].max(v[j]));
                    if mn < mid[j] && mid[j] < mx {
                        let den = (v[j] - u[j]) as i128;
                        let num = (mid[j] - u[j]) as i128;
                        let mut q = [0i64; 3];
                        for o in 0..3 {
                            let top = u[o] as i128 * den + num * (v[o] - u[o]) as i128;
                            if top % den != 0 {
                                return Err(Error::NotLight(format!(
                                    "tour crosses the axis-{j} wall of a cell off the integer grid"
                                )));
                            }
                            q[o] = (top / den) as i64;
                        }
                        let (num, den) = if den > 0 { (num, den) } else { (-num, -den) };
                        cuts.push((num, den, q));
                    }
                }
                cuts.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)));
                for w in cuts.windows(2) {
                    if w[0].0 * w[1].1 == w[1].0 * w[0].1 {
                        return Err(Error::NotLight(
                            "tour crosses two walls at once at a cell corner".into(),
                        ));
                    }
                }
                for (_, _, q) in cuts {
                    if verts.last() != Some(&q) {
                        verts.push(q);
                    }
                }
                if !closed || s + 1 < seg_count {
                    if verts.last() != Some(&v) {
                        verts.push(v);
                    }
                }
            }
            if closed && verts.len() > 1 && verts.first() == verts.last() {
                verts.pop();
            }
            let nseg = if closed {
                if verts.len() == 1 {
                    0
                } else {
                    verts.len()
                }
            } else {
                verts.len() - 1
            };
            let mut cands = Vec::with_capacity(nseg);
            for s in 0..nseg {
                let u = verts[s];
                let v = verts[(s + 1) % verts.len()];
                let mut opts: Vec<usize> = vec![0];
                for j in 0..d {
                    let (mn, mx) = (u[j].min(v[j]), u[j].max(v[j]));
                    let low_ok = mx <= mid[j];
                    let high_ok = mn >= mid[j];
                    match (low_ok, high_ok) {
                        (true, false) => {}
                        (false, true) => {
                            for o in &mut opts {
                                *o |= 1 << j;
                            }
                        }
                        (true, true) => {
                            let extra: Vec<usize> = opts.iter().map(|o| o | 1 << j).collect();
                            opts.extend(extra);
                        }
                        (false, false) => {
                            unreachable!("strict straddles were refined away")
                        }
                    }
                }
                cands.push(opts);
            }
            sps.push(SegPiece { verts, cands, closed, f_in, f_out });
        }

        // Ambiguity product over segments with several candidate children.
        let mut total: usize = 1;
        for sp in &sps {
            for cd in &sp.cands {
                total = total.saturating_mul(cd.len());
                if total > 64 {
                    return Err(Error::NotLight(
                        "too many wall-riding segments to disambiguate".into(),
                    ));
                }
            }
        }
        let mut alternatives = Vec::new();
        let mut last_err: Option<Error> = None;
        let mut choice: Vec<Vec<usize>> = sps.iter().map(|sp| vec![0usize; sp.cands.len()]).collect();
        loop {
            match self.cut(&sps, &choice, c.lo, h, &mid, nk) {
                Ok(mut assigns) => alternatives.append(&mut assigns),
                Err(e) => last_err = Some(e),
            }
            let mut done = true;
            'adv: for (pi_, sp) in sps.iter().enumerate() {
                for si in 0..sp.cands.len() {
                    choice[pi_][si] += 1;
                    if choice[pi_][si] < sp.cands[si].len() {
                        done = false;
                        break 'adv;
                    }
                    choice[pi_][si] = 0;
                }
            }
            if done {
                break;
            }
        }
        if alternatives.is_empty() {
            return Err(last_err.unwrap_or_else(|| {
                Error::NotLight("no consistent child assignment for the tour fragments".into())
            }));
        }
        Ok(alternatives)
    }

    /// Facets and sibling child for a bounce across the inner wall at `axis`,
    /// checking the touch point against the wall's portal lattice. Returns
    /// (facet of the touching child, facet of the sibling, sibling index).
    fn bounce(
        &self,
        kid: usize,
        axis: usize,
        q: &[i64; 3],
        lo: [i64; 3],
        h: i64,
    ) -> Result<(u8, u8, usize)> {
        let d = self.tree.dim;
        let k = (self.fs - 1) as usize;
        let ph = kid ^ (1 << axis);
        let kid_high = kid >> axis & 1 == 1;
        let hi = if kid_high { kid } else { ph };
        let mut hi_lo = lo;
        for j in 0..d {
            if hi >> j & 1 == 1 {
                hi_lo[j] += h;
            }
        }
        let wall = facet_positions(&hi_lo, h, d, (2 * axis) as u8, k);
        if !wall.contains(q) {
            return Err(Error::NotLight(format!(
                "tour touches an axis-{axis} wall off the portal lattice"
            )));
        }
        Ok((bounce_facet(kid, axis), bounce_facet(ph, axis), ph))
    }

    /// Cuts every piece at child changes and forced wall bounces, for one
    /// wall-riding resolution; one assignment per bounce-axis resolution.
    fn cut(
        &self,
        sps: &[SegPiece],
        choice: &[Vec<usize>],
        lo: [i64; 3],
        h: i64,
        mid: &[i64],
        nk: usize,
    ) -> Result<Vec<Vec<Vec<Piece>>>> {
        let d = self.tree.dim;
        // Junction events per piece. A junction whose flanking segments stay
        // in one child while the vertex lies on an inner wall must be a
        // zero-length bounce through the sibling: interior piece vertices
        // never sit on a wall otherwise.
        let mut events: Vec<Vec<(usize, Ev)>> = Vec::with_capacity(sps.len());
        for (pi_, sp) in sps.iter().enumerate() {
            let kid_of = |s: usize| sp.cands[s][choice[pi_][s]];
            let nseg = sp.cands.len();
            let mut evs = Vec::new();
            if nseg > 0 {
                let juncs = if sp.closed { nseg } else { nseg - 1 };
                for s in 0..juncs {
                    let nxt = (s + 1) % nseg;
                    let q = sp.verts[(s + 1) % sp.verts.len()];
                    if kid_of(s) != kid_of(nxt) {
                        evs.push((s, Ev::Change));
                    } else {
                        let axes: Vec<usize> =
                            (0..d).filter(|&j| q[j] == mid[j]).collect();
                        if !axes.is_empty() {
                            evs.push((s, Ev::Bounce(axes)));
                        }
                    }
                }
            }
            events.push(evs);
        }
        // Product over bounce-axis choices, capped like the riding product.
        let slots: Vec<(usize, usize, usize)> = events
            .iter()
            .enumerate()
            .flat_map(|(pi_, evs)| {
                evs.iter().enumerate().filter_map(move |(ei, (_, ev))| match ev {
                    Ev::Bounce(axes) => Some((pi_, ei, axes.len())),
                    Ev::Change => None,
                })
            })
            .collect();
        let mut total = 1usize;
        for &(_, _, n) in &slots {
            total = total.saturating_mul(n);
            if total > 64 {
                return Err(Error::NotLight(
                    "too many wall touches to disambiguate".into(),
                ));
            }
        }
        let mut pick = vec![0usize; slots.len()];
        let mut outs = Vec::new();
        let mut last_err: Option<Error> = None;
        loop {
            match self.cut_once(sps, choice, &events, &slots, &pick, lo, h, mid, nk) {
                Ok(a) => outs.push(a),
                Err(e) => last_err = Some(e),
            }
            let mut done = true;
            for i in 0..pick.len() {
                pick[i] += 1;
                if pick[i] < slots[i].2 {
                    done = false;
                    break;
                }
                pick[i] = 0;
            }
            if done {
                break;
            }
        }
        if outs.is_empty() {
            return Err(last_err.unwrap_or_else(|| {
                Error::NotLight("no consistent child assignment for the tour fragments".into())
            }));
        }
        Ok(outs)
    }

    /// One full cutting pass for fixed riding and bounce-axis choices.
    #[allow(clippy::too_many_arguments)]
    fn cut_once(
        &self,
        sps: &[SegPiece],
        choice: &[Vec<usize>],
        events: &[Vec<(usize, Ev)>],
        slots: &[(usize, usize, usize)],
        pick: &[usize],
        lo: [i64; 3],
        h: i64,
        mid: &[i64],
        nk: usize,
    ) -> Result<Vec<Vec<Piece>>> {
        let d = self.tree.dim;
        let k = (self.fs - 1) as usize;
        let facet_of = |k1: usize, k2: usize, q: &[i64; 3]| -> Result<(u8, u8)> {
            let diff = k1 ^ k2;
            if diff.count_ones() != 1 {
                return Err(Error::NotLight(
                    "tour jumps diagonally across a cell corner".into(),
                ));
            }
            let axis = diff.trailing_zeros() as usize;
            debug_assert_eq!(q[axis], mid[axis]);
            let hi_kid = k1 | (1 << axis);
            let mut hi_lo = lo;
            for j in 0..d {
                if hi_kid >> j & 1 == 1 {
                    hi_lo[j] += h;
                }
            }
            let wall = facet_positions(&hi_lo, h, d, (2 * axis) as u8, k);
            if !wall.contains(q) {
                return Err(Error::NotLight(format!(
                    "tour crosses an axis-{axis} wall off the portal lattice"
                )));
            }
            let f1 = (2 * axis + if k1 >> axis & 1 == 1 { 0 } else { 1 }) as u8;
            let f2 = (2 * axis + if k2 >> axis & 1 == 1 { 0 } else { 1 }) as u8;
            Ok((f1, f2))
        };
        let axis_for = |pi_: usize, ei: usize| -> usize {
            let idx = slots
                .iter()
                .position(|&(p, e, _)| p == pi_ && e == ei)
                .expect("bounce events are enumerated in slots");
            match &events[pi_][ei].1 {
                Ev::Bounce(axes) => axes[pick[idx]],
                Ev::Change => unreachable!(),
            }
        };
        let mut out: Vec<Vec<Piece>> = vec![Vec::new(); nk];
        for (pi_, sp) in sps.iter().enumerate() {
            let kid_of = |s: usize| sp.cands[s][choice[pi_][s]];
            let nseg = sp.cands.len();
            if nseg == 0 {
                // Single-vertex closed piece: strict interior classification.
                let u = sp.verts[0];
                let mut mask = 0usize;
                for j in 0..d {
                    if u[j] == mid[j] {
                        return Err(Error::NotLight(
                            "an isolated tour vertex sits on a cell wall".into(),
                        ));
                    }
                    if u[j] > mid[j] {
                        mask |= 1 << j;
                    }
                }
                out[mask].push(Piece::Closed(sp.verts.clone()));
                continue;
            }
            let evs = &events[pi_];
            if !sp.closed {
                let mut entry_facet = sp.f_in;
                let mut entry_vert = 0usize;
                for (ei, (s, ev)) in evs.iter().enumerate() {
                    let vq = s + 1;
                    let q = sp.verts[vq];
                    let run_kid = kid_of(*s);
                    let (f_out, f_in_next) = match ev {
                        Ev::Change => facet_of(run_kid, kid_of(s + 1), &q)?,
                        Ev::Bounce(_) => {
                            let axis = axis_for(pi_, ei);
                            let (f_kid, f_ph, ph) = self.bounce(run_kid, axis, &q, lo, h)?;
                            out[ph].push(Piece::Open {
                                verts: vec![q, q],
                                f_in: f_ph,
                                f_out: f_ph,
                            });
                            (f_kid, f_kid)
                        }
                    };
                    out[run_kid].push(Piece::Open {
                        verts: sp.verts[entry_vert..=vq].to_vec(),
                        f_in: entry_facet,
                        f_out,
                    });
                    entry_facet = f_in_next;
                    entry_vert = vq;
                }
                out[kid_of(nseg - 1)].push(Piece::Open {
                    verts: sp.verts[entry_vert..].to_vec(),
                    f_in: entry_facet,
                    f_out: sp.f_out,
                });
            } else {
                if evs.is_empty() {
                    out[kid_of(0)].push(Piece::Closed(sp.verts.clone()));
                    continue;
                }
                let m = evs.len();
                for ci in 0..m {
                    let (s_from, ev_from) = &evs[ci];
                    let (s_to, ev_to) = &evs[(ci + 1) % m];
                    // This run covers segments s_from+1 ..= s_to, cyclically.
                    let first = (s_from + 1) % nseg;
                    let kid = kid_of(first);
                    let q_in = sp.verts[first];
                    let f_in = match ev_from {
                        Ev::Change => facet_of(kid_of(*s_from), kid, &q_in)?.1,
                        Ev::Bounce(_) => {
                            let axis = axis_for(pi_, ci);
                            let (f_kid, f_ph, ph) = self.bounce(kid, axis, &q_in, lo, h)?;
                            out[ph].push(Piece::Open {
                                verts: vec![q_in, q_in],
                                f_in: f_ph,
                                f_out: f_ph,
                            });
                            f_kid
                        }
                    };
                    let q_out = sp.verts[(s_to + 1) % nseg];
                    let f_out = match ev_to {
                        Ev::Change => facet_of(kid_of(*s_to), kid_of((s_to + 1) % nseg), &q_out)?.0,
                        Ev::Bounce(_) => bounce_facet(kid, axis_for(pi_, (ci + 1) % m)),
                    };
                    let mut verts = vec![sp.verts[first]];
                    let mut s = first;
                    loop {
                        let nxt = (s + 1) % nseg;
                        verts.push(sp.verts[nxt]);
                        if s == *s_to {
                            break;
                        }
                        s = nxt;
                    }
                    out[kid].push(Piece::Open { verts, f_in, f_out });
                }
            }
        }
        Ok(out)
    }
}

/// A junction inside one piece: either the flanking segments change child, or
/// they share a child and the vertex touches an inner wall (candidate bounce
/// axes listed).
enum Ev {
    Change,
    Bounce(Vec<usize>),
}

/// Facet of `kid` on its inner wall along `axis`.
fn bounce_facet(kid: usize, axis: usize) -> u8 {
    (2 * axis + if kid >> axis & 1 == 1 { 0 } else { 1 }) as u8
}

/// One piece after refinement: vertices plus per-segment child candidates.
#[derive(Clone)]
struct SegPiece {
    verts: Vec<[i64; 3]>,
    cands: Vec<Vec<usize>>,
    closed: bool,
    f_in: u8,
    f_out: u8,
}
