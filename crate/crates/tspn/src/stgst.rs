//! Fractional group covering over the solution graph and its randomized
//! rounding: a column-generation relaxation (dense two-phase simplex over
//! whole-tree columns, priced by a prize-collecting tree recurrence), the
//! natural top-down sampler, and an exact subset-DP reference solver.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dpgraph::{min_cost_tree, validate_solution_tree, DpGraph, NodeKind, SolutionTree};
use crate::error::{Error, Result};

/// Optimality and feasibility tolerance of the relaxation.
pub const LP_TOL: f64 = 1e-7;
/// Marginals below this count as zero mass for the sampler.
pub const MASS_EPS: f64 = 1e-12;
/// Default table budget for the exact solver.
pub const DEFAULT_EXACT_BUDGET: usize = 10_000;
/// Default sample-count multiplier.
pub const DEFAULT_ROUNDS_FACTOR: f64 = 4.0;

/// One covering problem: pick a solution tree of the graph that touches at
/// least one node of every group set.
#[derive(Clone, Debug)]
pub struct StgstInstance<'a> {
    pub dag: &'a DpGraph,
    /// Node ids covering each group.
    pub groups: Vec<Vec<usize>>,
}

impl<'a> StgstInstance<'a> {
    /// Reads the group sets off the graph's covered leaves.
    pub fn new(dag: &'a DpGraph) -> Result<Self> {
        if !matches!(dag.nodes[dag.root].kind, NodeKind::Subproblem { .. }) {
            return Err(Error::InvalidParameter(
                "the graph root must be a subproblem node".into(),
            ));
        }
        let groups = dag.groups()?;
        Ok(StgstInstance { dag, groups })
    }
}

/// A feasible point of the covering relaxation, as edge marginals.
#[derive(Clone, Debug)]
pub struct FractionalSolution {
    /// Marginal per graph edge id, in [0, 1].
    pub x: Vec<f64>,
    /// Fractional cost, sum of cost(e) * x(e).
    pub objective: f64,
}

/// Node in-values: summed marginals of incoming edges, with the root pinned
/// to one.
fn in_values(dag: &DpGraph, x: &[f64]) -> Vec<f64> {
    let mut inv = vec![0.0; dag.nodes.len()];
    for (e, edge) in dag.edges.iter().enumerate() {
        inv[edge.to] += x[e];
    }
    inv[dag.root] = 1.0;
    inv
}

/// Structural check of a fractional solution: marginals in range, unit mass
/// out of the root, flow conservation at subproblems, replication at
/// combinations, and capped coverage of at least one per group.
pub fn validate_fractional(inst: &StgstInstance, frac: &FractionalSolution) -> bool {
    let dag = inst.dag;
    let tol = 1e-5;
    if frac.x.len() != dag.edges.len() {
        return false;
    }
    if frac.x.iter().any(|&v| !(-tol..=1.0 + tol).contains(&v)) {
        return false;
    }
    let inv = in_values(dag, &frac.x);
    for (i, node) in dag.nodes.iter().enumerate() {
        let out: f64 = node.out.iter().map(|&e| frac.x[e]).sum();
        match &node.kind {
            NodeKind::Subproblem { leaf: Some(_), .. } => {}
            NodeKind::Subproblem { .. } => {
                if (out - inv[i]).abs() > tol {
                    return false;
                }
            }
            NodeKind::Combination { .. } => {
                if node.out.iter().any(|&e| (frac.x[e] - inv[i]).abs() > tol) {
                    return false;
                }
            }
        }
    }
    for s in &inst.groups {
        let got: f64 = s.iter().map(|&v| inv[v].min(1.0)).sum();
        if got < 1.0 - tol {
            return false;
        }
    }
    let cost: f64 = dag
        .edges
        .iter()
        .enumerate()
        .map(|(e, edge)| edge.cost * frac.x[e])
        .sum();
    (cost - frac.objective).abs() <= 1e-6 * (1.0 + frac.objective.abs())
}

const PIVOT_TOL: f64 = 1e-9;

struct LpSolved {
    z: Vec<f64>,
    /// Row duals.
    duals: Vec<f64>,
}

/// Pivots the tableau on (row, col) and updates the cost row and basis.
fn pivot(t: &mut [Vec<f64>], cost: &mut [f64], basis: &mut [usize], r: usize, j: usize) {
    let p = t[r][j];
    for v in t[r].iter_mut() {
        *v /= p;
    }
    t[r][j] = 1.0;
    let pr = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i == r {
            continue;
        }
        let f = row[j];
        if f != 0.0 {
            for (k, v) in row.iter_mut().enumerate() {
                *v -= f * pr[k];
            }
            row[j] = 0.0;
        }
    }
    let f = cost[j];
    if f != 0.0 {
        for (k, v) in cost.iter_mut().enumerate() {
            *v -= f * pr[k];
        }
        cost[j] = 0.0;
    }
    basis[r] = j;
}

/// Runs Bland-rule pivots until no column among the first n_enter prices out.
fn run_pivots(
    t: &mut [Vec<f64>],
    cost: &mut [f64],
    basis: &mut [usize],
    n_enter: usize,
) -> Result<()> {
    let m = t.len();
    let width = cost.len();
    for _ in 0..100_000 {
        let Some(j) = (0..n_enter).find(|&j| cost[j] < -LP_TOL) else {
            return Ok(());
        };
        let mut row: Option<usize> = None;
        let mut best = f64::INFINITY;
        for r in 0..m {
            if t[r][j] > PIVOT_TOL {
                let ratio = t[r][width - 1] / t[r][j];
                let take = match row {
                    None => true,
                    Some(p) => {
                        ratio < best - 1e-12 || (ratio < best + 1e-12 && basis[r] < basis[p])
                    }
                };
                if take {
                    row = Some(r);
                    if ratio < best {
                        best = ratio;
                    }
                }
            }
        }
        let Some(r) = row else {
            return Err(Error::Infeasible("linear program is unbounded below".into()));
        };
        pivot(t, cost, basis, r, j);
    }
    Err(Error::Infeasible("simplex failed to converge".into()))
}

/// Dense two-phase primal simplex with Bland's rule for
/// min c.z subject to A z = b, z >= 0. Returns optimum, point, and duals.
fn solve_lp(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<LpSolved> {
    let m = a.len();
    let n = c.len();
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m];
    let mut sign = vec![1.0; m];
    for i in 0..m {
        if b[i] < 0.0 {
            sign[i] = -1.0;
        }
        for j in 0..n {
            t[i][j] = sign[i] * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = sign[i] * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    // Phase 1: drive the artificial sum to zero.
    let mut cost = vec![0.0; width];
    for v in cost[n..n + m].iter_mut() {
        *v = 1.0;
    }
    for i in 0..m {
        for j in 0..width {
            cost[j] -= t[i][j];
        }
    }
    run_pivots(&mut t, &mut cost, &mut basis, n + m)?;
    if -cost[width - 1] > LP_TOL {
        return Err(Error::Infeasible(format!(
            "linear program has no feasible point (phase-1 residual {:.2e})",
            -cost[width - 1]
        )));
    }
    // Pivot leftover artificials out; a row with no eligible column is
    // redundant and its artificial stays basic at zero.
    for r in 0..m {
        if basis[r] >= n {
            if let Some(j) = (0..n).find(|&j| t[r][j].abs() > PIVOT_TOL) {
                pivot(&mut t, &mut cost, &mut basis, r, j);
            }
        }
    }
    // Phase 2 over the original columns only.
    let mut cost = vec![0.0; width];
    cost[..n].copy_from_slice(c);
    for r in 0..m {
        let cb = if basis[r] < n { c[basis[r]] } else { 0.0 };
        if cb != 0.0 {
            for j in 0..width {
                cost[j] -= cb * t[r][j];
            }
        }
    }
    run_pivots(&mut t, &mut cost, &mut basis, n)?;
    let mut z = vec![0.0; n];
    for r in 0..m {
        if basis[r] < n {
            z[basis[r]] = t[r][width - 1];
        }
    }
    // The artificial block began as the identity, so its reduced costs are
    // the negated duals of the sign-flipped rows.
    let duals = (0..m).map(|i| -sign[i] * cost[n + i]).collect();
    Ok(LpSolved { z, duals })
}

/// Values every node by the min/sum recurrence with per-node prizes
/// subtracted at leaves, then extracts a minimizing tree (first minimal edge
/// in creation order). Returns the root value alongside the tree.
fn priced_tree(dag: &DpGraph, prize: &[f64]) -> Result<(f64, SolutionTree)> {
    let mut value = vec![f64::INFINITY; dag.nodes.len()];
    let max_level = dag.nodes.iter().map(|n| n.level).max().unwrap_or(0);
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
                value[i] = -prize[i];
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
            "the solution graph admits no tree at all".into(),
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
    Ok((value[dag.root], SolutionTree { nodes, edges }))
}

struct Column {
    tree: SolutionTree,
    cost: f64,
    /// Cover count per group.
    cover: Vec<f64>,
}

fn make_column(tree: SolutionTree, dag: &DpGraph, groups_of: &[Vec<usize>], h: usize) -> Column {
    let cost = tree.cost(dag);
    let mut cover = vec![0.0; h];
    for &v in &tree.nodes {
        for &g in &groups_of[v] {
            cover[g] += 1.0;
        }
    }
    Column { tree, cost, cover }
}

/// Optimal fractional tree mixture, reported as edge marginals. Column
/// generation: a restricted covering master over whole solution trees is
/// solved by the dense simplex and new trees are priced in by the
/// prize-collecting recurrence until none improves.
pub fn lp_relax(inst: &StgstInstance) -> Result<FractionalSolution> {
    let dag = inst.dag;
    let h = inst.groups.len();
    let mut groups_of: Vec<Vec<usize>> = vec![Vec::new(); dag.nodes.len()];
    for (g, s) in inst.groups.iter().enumerate() {
        for &v in s {
            groups_of[v].push(g);
        }
    }
    // Larger than any tree cost: prices coverage-seeking seeds and penalizes
    // the artificial cover columns.
    let big = 1e4 * (1.0 + dag.edges.iter().map(|e| e.cost.abs()).sum::<f64>());
    let mut cols: Vec<Column> = Vec::new();
    let mut sigs: HashSet<Vec<usize>> = HashSet::new();
    let push = |tree: SolutionTree, cols: &mut Vec<Column>, sigs: &mut HashSet<Vec<usize>>| {
        let mut sig = tree.nodes.clone();
        sig.sort_unstable();
        if !sigs.insert(sig) {
            return false;
        }
        cols.push(make_column(tree, dag, &groups_of, h));
        true
    };
    push(min_cost_tree(dag)?, &mut cols, &mut sigs);
    let mut prize = vec![0.0; dag.nodes.len()];
    for (g, s) in inst.groups.iter().enumerate() {
        for &v in s {
            prize[v] = big;
        }
        let (_, tree) = priced_tree(dag, &prize)?;
        for &v in s {
            prize[v] = 0.0;
        }
        if !tree.nodes.iter().any(|v| groups_of[*v].contains(&g)) {
            return Err(Error::Infeasible(format!(
                "group {g} cannot be covered by any solution tree"
            )));
        }
        push(tree, &mut cols, &mut sigs);
    }
    let rows = h + 1;
    let mut solved: Option<LpSolved> = None;
    for _ in 0..2_000 {
        // Master: per-group coverage of at least one (surplus plus penalized
        // artificial) and a convexity row over the tree columns.
        let nt = cols.len();
        let n = nt + 2 * h;
        let mut a = vec![vec![0.0; n]; rows];
        let mut c = vec![0.0; n];
        let b = vec![1.0; rows];
        for (k, col) in cols.iter().enumerate() {
            for g in 0..h {
                a[g][k] = col.cover[g];
            }
            a[h][k] = 1.0;
            c[k] = col.cost;
        }
        for g in 0..h {
            a[g][nt + g] = -1.0;
            a[g][nt + h + g] = 1.0;
            c[nt + h + g] = big;
        }
        let sol = solve_lp(&a, &b, &c)?;
        let mut prize = vec![0.0; dag.nodes.len()];
        for g in 0..h {
            let y = sol.duals[g].max(0.0);
            if y > 0.0 {
                for &v in &inst.groups[g] {
                    prize[v] += y;
                }
            }
        }
        let mu = sol.duals[h];
        let (val, tree) = priced_tree(dag, &prize)?;
        solved = Some(sol);
        if val - mu >= -LP_TOL || !push(tree, &mut cols, &mut sigs) {
            break;
        }
    }
    let sol = solved.ok_or_else(|| Error::Infeasible("column generation stalled".into()))?;
    for g in 0..h {
        if sol.z[cols.len() + h + g] > 1e-6 {
            return Err(Error::Infeasible(format!(
                "group {g} cannot be fractionally covered by solution trees"
            )));
        }
    }
    let mut x = vec![0.0; dag.edges.len()];
    let mut objective = 0.0;
    for (k, col) in cols.iter().enumerate() {
        let lam = sol.z[k];
        if lam <= MASS_EPS {
            continue;
        }
        objective += lam * col.cost;
        for &e in &col.tree.edges {
            x[e] += lam;
        }
    }
    for v in x.iter_mut() {
        if *v < MASS_EPS {
            *v = 0.0;
        } else if *v > 1.0 {
            *v = 1.0;
        }
    }
    Ok(FractionalSolution { x, objective })
}

/// Samples one solution tree: every reached subproblem picks an outgoing
/// combination edge with probability proportional to its marginal and every
/// reached combination takes all its children. Resamples on a zero-mass
/// subproblem, then gives up.
pub fn round_once(
    inst: &StgstInstance,
    frac: &FractionalSolution,
    seed: u64,
) -> Result<SolutionTree> {
    let dag = inst.dag;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..8 {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut stack = vec![dag.root];
        while let Some(v) = stack.pop() {
            nodes.push(v);
            match &dag.nodes[v].kind {
                NodeKind::Subproblem { leaf: Some(_), .. } => {}
                NodeKind::Subproblem { .. } => {
                    let out = &dag.nodes[v].out;
                    let mass: Vec<f64> = out
                        .iter()
                        .map(|&e| if frac.x[e] > MASS_EPS { frac.x[e] } else { 0.0 })
                        .collect();
                    let total: f64 = mass.iter().sum();
                    if total <= MASS_EPS {
                        continue 'attempt;
                    }
                    let mut r = rng.gen::<f64>() * total;
                    let mut pick = None;
                    for (k, &m) in mass.iter().enumerate() {
                        if m <= 0.0 {
                            continue;
                        }
                        r -= m;
                        if r <= 0.0 {
                            pick = Some(k);
                            break;
                        }
                    }
                    let k = pick
                        .unwrap_or_else(|| mass.iter().rposition(|&m| m > 0.0).expect("positive mass"));
                    edges.push(out[k]);
                    stack.push(dag.edges[out[k]].to);
                }
                NodeKind::Combination { .. } => {
                    for &e in &dag.nodes[v].out {
                        edges.push(e);
                        stack.push(dag.edges[e].to);
                    }
                }
            }
        }
        let t = SolutionTree { nodes, edges };
        debug_assert!(validate_solution_tree(dag, &t));
        return Ok(t);
    }
    Err(Error::Infeasible(
        "rounding reached a zero-mass subproblem on every attempt".into(),
    ))
}

struct Exact<'b> {
    dag: &'b DpGraph,
    /// Group bits each node covers.
    cov: Vec<u64>,
    f: HashMap<(usize, u64), f64>,
    rest: HashMap<(usize, usize, u64), f64>,
    budget: usize,
}

impl Exact<'_> {
    fn charge(&self) -> Result<()> {
        if self.f.len() + self.rest.len() > self.budget {
            return Err(Error::BudgetExceeded {
                budget: self.budget,
                what: "exact cover table entries",
            });
        }
        Ok(())
    }

    /// Cheapest subtree at v covering at least the groups in s.
    fn value(&mut self, v: usize, s_in: u64) -> Result<f64> {
        let s = s_in & !self.cov[v];
        if let Some(&x) = self.f.get(&(v, s)) {
            return Ok(x);
        }
        let out = self.dag.nodes[v].out.clone();
        let val = match &self.dag.nodes[v].kind {
            NodeKind::Subproblem { leaf: Some(_), .. } => {
                if s == 0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            NodeKind::Subproblem { .. } => {
                let mut best = f64::INFINITY;
                for &e in &out {
                    let v2 = self.dag.edges[e].cost + self.value(self.dag.edges[e].to, s)?;
                    if v2 < best {
                        best = v2;
                    }
                }
                best
            }
            NodeKind::Combination { .. } => {
                let base: f64 = out.iter().map(|&e| self.dag.edges[e].cost).sum();
                base + self.split(v, 0, s)?
            }
        };
        self.f.insert((v, s), val);
        self.charge()?;
        Ok(val)
    }

    /// Cheapest assignment of the groups in s to the combination's children
    /// from position t onward.
    fn split(&mut self, c: usize, t: usize, s: u64) -> Result<f64> {
        let out = &self.dag.nodes[c].out;
        if t == out.len() {
            return Ok(if s == 0 { 0.0 } else { f64::INFINITY });
        }
        if let Some(&x) = self.rest.get(&(c, t, s)) {
            return Ok(x);
        }
        let kid = self.dag.edges[out[t]].to;
        let mut best = f64::INFINITY;
        let mut a = s;
        loop {
            let v = self.value(kid, a)?;
            if v.is_finite() {
                let r = self.split(c, t + 1, s & !a)?;
                best = best.min(v + r);
            }
            if a == 0 {
                break;
            }
            a = (a - 1) & s;
        }
        self.rest.insert((c, t, s), best);
        self.charge()?;
        Ok(best)
    }

    /// Rebuilds one optimal tree: smallest child combination id at each
    /// subproblem, then the smallest cover assignment per child left to
    /// right, which canonicalizes ties.
    fn extract(
        &mut self,
        v: usize,
        s_in: u64,
        out_n: &mut Vec<usize>,
        out_e: &mut Vec<usize>,
    ) -> Result<()> {
        let s = s_in & !self.cov[v];
        out_n.push(v);
        let out = self.dag.nodes[v].out.clone();
        match &self.dag.nodes[v].kind {
            NodeKind::Subproblem { leaf: Some(_), .. } => Ok(()),
            NodeKind::Subproblem { .. } => {
                let target = self.value(v, s)?;
                let mut chosen: Option<(usize, usize)> = None;
                for &e in &out {
                    let to = self.dag.edges[e].to;
                    let val = self.dag.edges[e].cost + self.value(to, s)?;
                    if val == target && chosen.map_or(true, |(_, t)| to < t) {
                        chosen = Some((e, to));
                    }
                }
                let (e, to) = chosen.expect("an optimal edge achieves the minimum");
                out_e.push(e);
                self.extract(to, s, out_n, out_e)
            }
            NodeKind::Combination { .. } => {
                let mut rem = s;
                for (t, &e) in out.iter().enumerate() {
                    let kid = self.dag.edges[e].to;
                    let target = self.split(v, t, rem)?;
                    let mut a = 0u64;
                    let pick = loop {
                        let val = self.value(kid, a)?;
                        if val.is_finite() && val + self.split(v, t + 1, rem & !a)? == target {
                            break a;
                        }
                        if a == rem {
                            return Err(Error::Infeasible(
                                "exact cover extraction lost the optimum".into(),
                            ));
                        }
                        a = a.wrapping_sub(rem) & rem;
                    };
                    out_e.push(e);
                    self.extract(kid, pick, out_n, out_e)?;
                    rem &= !pick;
                }
                Ok(())
            }
        }
    }
}

/// Cheapest solution tree covering every group, by exact dynamic programming
/// over (node, needed-group subset). The budget caps table entries.
pub fn exact_stgst(inst: &StgstInstance, budget: usize) -> Result<SolutionTree> {
    let dag = inst.dag;
    let h = inst.groups.len();
    if h > 63 {
        return Err(Error::InvalidParameter(format!(
            "{h} groups exceed the 63-bit subset limit of the exact solver"
        )));
    }
    let mut cov = vec![0u64; dag.nodes.len()];
    for (g, s) in inst.groups.iter().enumerate() {
        for &v in s {
            cov[v] |= 1 << g;
        }
    }
    let full = (1u64 << h) - 1;
    let mut ex = Exact {
        dag,
        cov,
        f: HashMap::new(),
        rest: HashMap::new(),
        budget,
    };
    let total = ex.value(dag.root, full)?;
    if !total.is_finite() {
        return Err(Error::Infeasible(
            "no solution tree covers every group".into(),
        ));
    }
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    ex.extract(dag.root, full, &mut nodes, &mut edges)?;
    let t = SolutionTree { nodes, edges };
    debug_assert!(validate_solution_tree(dag, &t));
    Ok(t)
}

/// Every solution tree of the graph by exhaustive expansion (testing oracle
/// for tiny graphs); the cap bounds partial trees held at any point.
pub fn enumerate_trees(dag: &DpGraph, cap: usize) -> Result<Vec<SolutionTree>> {
    fn rec(dag: &DpGraph, v: usize, cap: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let over = || Error::BudgetExceeded {
            budget: cap,
            what: "enumerated solution trees",
        };
        match &dag.nodes[v].kind {
            NodeKind::Subproblem { leaf: Some(_), .. } => Ok(vec![(vec![v], Vec::new())]),
            NodeKind::Subproblem { .. } => {
                let mut all = Vec::new();
                for &e in &dag.nodes[v].out {
                    for (mut ns, mut es) in rec(dag, dag.edges[e].to, cap)? {
                        ns.push(v);
                        es.push(e);
                        all.push((ns, es));
                        if all.len() > cap {
                            return Err(over());
                        }
                    }
                }
                Ok(all)
            }
            NodeKind::Combination { .. } => {
                let mut acc = vec![(vec![v], Vec::new())];
                for &e in &dag.nodes[v].out {
                    let kids = rec(dag, dag.edges[e].to, cap)?;
                    let mut next = Vec::new();
                    for (ns, es) in &acc {
                        for (kns, kes) in &kids {
                            let mut ns2 = ns.clone();
                            let mut es2 = es.clone();
                            ns2.extend_from_slice(kns);
                            es2.push(e);
                            es2.extend_from_slice(kes);
                            next.push((ns2, es2));
                            if next.len() > cap {
                                return Err(over());
                            }
                        }
                    }
                    acc = next;
                }
                Ok(acc)
            }
        }
    }
    Ok(rec(dag, dag.root, cap)?
        .into_iter()
        .map(|(nodes, edges)| SolutionTree { nodes, edges })
        .collect())
}

/// Rounding summary: the relaxation, every sampled tree with its cost, and
/// per-group coverage statistics.
#[derive(Clone, Debug)]
pub struct RoundingReport {
    pub lp: FractionalSolution,
    pub trees: Vec<SolutionTree>,
    /// Cost of each sample.
    pub costs: Vec<f64>,
    /// Samples covering each group.
    pub coverage: Vec<usize>,
    /// Groups no sample covered.
    pub uncovered: Vec<bool>,
    pub mean_cost: f64,
}

/// Solves the relaxation once, then draws ceil(c * ln(groups) * ln(nodes))
/// independent samples with per-index seeds (reproducible, order-stable).
pub fn solve_stgst(inst: &StgstInstance, c: f64, seed: u64) -> Result<RoundingReport> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(
            "the sample-count multiplier must be positive".into(),
        ));
    }
    let lp = lp_relax(inst)?;
    let dag = inst.dag;
    let hh = inst.groups.len().max(2) as f64;
    let nn = dag.nodes.len().max(2) as f64;
    let ell = ((c * hh.ln() * nn.ln()).ceil() as usize).max(1);
    let trees = (0..ell)
        .into_par_iter()
        .map(|i| round_once(inst, &lp, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let costs: Vec<f64> = trees.iter().map(|t| t.cost(dag)).collect();
    let mut coverage = vec![0usize; inst.groups.len()];
    for t in &trees {
        let nset: HashSet<usize> = t.nodes.iter().copied().collect();
        for (g, s) in inst.groups.iter().enumerate() {
            if s.iter().any(|v| nset.contains(v)) {
                coverage[g] += 1;
            }
        }
    }
    let uncovered: Vec<bool> = coverage.iter().map(|&k| k == 0).collect();
    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
    Ok(RoundingReport {
        lp,
        trees,
        costs,
        coverage,
        uncovered,
        mean_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgraph::{Edge, LeafGeom, Node};
    use crate::quadtree::{CellState, StateKey};

    fn internal(level: u32) -> Node {
        Node {
            kind: NodeKind::Subproblem {
                cell: 0,
                key: StateKey { state: CellState::Idle, visit: false },
                leaf: None,
            },
            level,
            out: Vec::new(),
        }
    }

    fn leaf(level: u32, covered: Vec<usize>) -> Node {
        Node {
            kind: NodeKind::Subproblem {
                cell: 0,
                key: StateKey { state: CellState::Loop, visit: true },
                leaf: Some(LeafGeom {
                    cost: 0.0,
                    paths: Vec::new(),
                    covered,
                    merged: None,
                    point_fine: None,
                }),
            },
            level,
            out: Vec::new(),
        }
    }

    fn combo(level: u32) -> Node {
        Node {
            kind: NodeKind::Combination { parent: 0, kids: Vec::new() },
            level,
            out: Vec::new(),
        }
    }

    fn edge(from: usize, to: usize, cost: f64) -> Edge {
        Edge { from, to, cost }
    }

    /// Root, one combination, one leaf child per entry.
    fn fan(leaves: &[(f64, Vec<usize>)], n_groups: usize) -> DpGraph {
        let mut nodes = vec![internal(0), combo(0)];
        let mut edges = vec![edge(0, 1, 0.0)];
        for (cost, cov) in leaves {
            let id = nodes.len();
            nodes.push(leaf(1, cov.clone()));
            edges.push(edge(1, id, *cost));
        }
        DpGraph::from_parts(nodes, edges, 0, n_groups).unwrap()
    }

    /// Root with one single-leaf combination per option.
    fn choice(options: &[(f64, Vec<usize>)], n_groups: usize) -> DpGraph {
        let mut nodes = vec![internal(0)];
        let mut edges = Vec::new();
        for (cost, cov) in options {
            let c = nodes.len();
            nodes.push(combo(0));
            edges.push(edge(0, c, 0.0));
            let l = nodes.len();
            nodes.push(leaf(1, cov.clone()));
            edges.push(edge(c, l, *cost));
        }
        DpGraph::from_parts(nodes, edges, 0, n_groups).unwrap()
    }

    fn node_set(t: &SolutionTree) -> Vec<usize> {
        let mut v = t.nodes.clone();
        v.sort_unstable();
        v
    }

    #[test]
    fn unique_tree_relaxation_is_its_indicator() {
        let dag = fan(&[(2.0, vec![0]), (3.0, vec![1])], 2);
        let inst = StgstInstance::new(&dag).unwrap();
        let lp = lp_relax(&inst).unwrap();
        assert!((lp.objective - 5.0).abs() < 1e-6);
        for &v in &lp.x {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert!(validate_fractional(&inst, &lp));
        for seed in 0..20 {
            let t = round_once(&inst, &lp, seed).unwrap();
            assert!(validate_solution_tree(&dag, &t));
            assert_eq!(node_set(&t), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn cheaper_of_two_root_choices_wins() {
        let dag = choice(&[(3.0, vec![0]), (5.0, vec![0])], 1);
        let inst = StgstInstance::new(&dag).unwrap();
        let exact = exact_stgst(&inst, DEFAULT_EXACT_BUDGET).unwrap();
        assert_eq!(exact.cost(&dag), 3.0);
        let lp = lp_relax(&inst).unwrap();
        assert!((lp.objective - 3.0).abs() < 1e-6);
        assert!(validate_fractional(&inst, &lp));
    }

    #[test]
    fn single_leaf_cost_is_the_objective() {
        let dag = fan(&[(7.0, vec![0])], 1);
        let inst = StgstInstance::new(&dag).unwrap();
        assert!((lp_relax(&inst).unwrap().objective - 7.0).abs() < 1e-6);
        assert_eq!(exact_stgst(&inst, DEFAULT_EXACT_BUDGET).unwrap().cost(&dag), 7.0);
    }

    #[test]
    fn even_split_rounds_fifty_fifty() {
        let dag = choice(&[(4.0, vec![0]), (4.0, vec![0])], 1);
        let inst = StgstInstance::new(&dag).unwrap();
        let mut x = vec![0.0; dag.edges.len()];
        for e in 0..dag.edges.len() {
            x[e] = 0.5;
        }
        let frac = FractionalSolution { x, objective: 4.0 };
        assert!(validate_fractional(&inst, &frac));
        let n = 10_000;
        let mut first = 0usize;
        for seed in 0..n {
            let t = round_once(&inst, &frac, seed as u64).unwrap();
            if t.nodes.contains(&1) {
                first += 1;
            }
        }
        // 3 sigma for a fair coin over 10^4 draws.
        let dev = (first as f64 - 5_000.0).abs();
        assert!(dev <= 150.0, "split {first} of {n} is off by {dev}");
    }

    #[test]
    fn mean_sample_cost_tracks_the_fractional_objective() {
        let dag = choice(&[(3.0, vec![0]), (8.0, vec![0])], 1);
        let inst = StgstInstance::new(&dag).unwrap();
        let mut x = vec![0.0; dag.edges.len()];
        // Option one at mass 0.3, option two at 0.7.
        x[0] = 0.3;
        x[1] = 0.3;
        x[2] = 0.7;
        x[3] = 0.7;
        let objective = 0.3 * 3.0 + 0.7 * 8.0;
        let frac = FractionalSolution { x, objective };
        assert!(validate_fractional(&inst, &frac));
        let n = 10_000usize;
        let costs: Vec<f64> = (0..n)
            .map(|s| round_once(&inst, &frac, s as u64).unwrap().cost(&dag))
            .collect();
        let mean = costs.iter().sum::<f64>() / n as f64;
        let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
        let margin = 3.0 * (var / n as f64).sqrt() + 1e-9;
        assert!(
            (mean - objective).abs() <= margin,
            "mean {mean} vs objective {objective} exceeds {margin}"
        );
    }

    #[test]
    fn edge_inclusion_frequency_matches_the_marginal() {
        // Two levels of branching: root splits 0.5/0.5, one branch splits
        // again 0.2/0.3 at a deeper subproblem.
        let mut nodes = vec![internal(0)];
        let mut edges = Vec::new();
        let ca = 1;
        nodes.push(combo(0));
        edges.push(edge(0, ca, 0.0)); // 0
        let mid = 2;
        nodes.push(internal(1));
        edges.push(edge(ca, mid, 1.0)); // 1
        let c1 = 3;
        nodes.push(combo(1));
        edges.push(edge(mid, c1, 0.0)); // 2
        let l1 = 4;
        nodes.push(leaf(2, vec![0]));
        edges.push(edge(c1, l1, 2.0)); // 3
        let c2 = 5;
        nodes.push(combo(1));
        edges.push(edge(mid, c2, 0.0)); // 4
        let l2 = 6;
        nodes.push(leaf(2, vec![0]));
        edges.push(edge(c2, l2, 5.0)); // 5
        let cb = 7;
        nodes.push(combo(0));
        edges.push(edge(0, cb, 0.0)); // 6
        let l3 = 8;
        nodes.push(leaf(1, vec![0]));
        edges.push(edge(cb, l3, 4.0)); // 7
        let dag = DpGraph::from_parts(nodes, edges, 0, 1).unwrap();
        let inst = StgstInstance::new(&dag).unwrap();
        let x = vec![0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.5, 0.5];
        let objective = 0.5 * 1.0 + 0.2 * 2.0 + 0.3 * 5.0 + 0.5 * 4.0;
        let frac = FractionalSolution { x: x.clone(), objective };
        assert!(validate_fractional(&inst, &frac));
        let n = 10_000usize;
        let mut hits = vec![0usize; dag.edges.len()];
        for seed in 0..n {
            for &e in &round_once(&inst, &frac, seed as u64).unwrap().edges {
                hits[e] += 1;
            }
        }
        for (e, &want) in x.iter().enumerate() {
            let sigma = (n as f64 * want * (1.0 - want)).sqrt();
            let dev = (hits[e] as f64 - n as f64 * want).abs();
            assert!(
                dev <= 3.0 * sigma + 1.0,
                "edge {e}: {} hits vs expected {}",
                hits[e],
                n as f64 * want
            );
        }
    }

    #[test]
    fn zero_mass_rounding_fails_cleanly() {
        let dag = choice(&[(1.0, vec![0]), (2.0, vec![0])], 1);
        let inst = StgstInstance::new(&dag).unwrap();
        let frac = FractionalSolution { x: vec![0.0; dag.edges.len()], objective: 0.0 };
        let err = round_once(&inst, &frac, 3).unwrap_err();
        assert!(err.to_string().contains("zero-mass"));
    }

    #[test]
    fn budget_guard_trips_on_tiny_allowance() {
        let dag = fan(&[(1.0, vec![0]), (2.0, vec![1]), (3.0, vec![2])], 3);
        let inst = StgstInstance::new(&dag).unwrap();
        match exact_stgst(&inst, 2) {
            Err(Error::BudgetExceeded { budget: 2, .. }) => {}
            other => panic!("expected a budget error, got {other:?}"),
        }
    }

    #[test]
    fn uncoverable_mixture_names_a_group() {
        // Each root choice covers exactly one of two groups, so no single
        // tree, and hence no convex mixture, covers both.
        let dag = choice(&[(1.0, vec![0]), (1.0, vec![1])], 2);
        let inst = StgstInstance::new(&dag).unwrap();
        let err = lp_relax(&inst).unwrap_err();
        assert!(err.to_string().contains("group"));
        assert!(exact_stgst(&inst, DEFAULT_EXACT_BUDGET).is_err());
    }

    fn random_dag(seed: u64) -> (DpGraph, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.gen_range(1..=3usize);
        let n_leaf = rng.gen_range(2..=5usize);
        let n_mid = rng.gen_range(1..=3usize);
        let mut nodes = vec![internal(0)];
        let mut covered: Vec<Vec<usize>> = (0..n_leaf)
            .map(|_| (0..h).filter(|_| rng.gen_bool(0.3)).collect())
            .collect();
        for g in 0..h {
            let pick = rng.gen_range(0..n_leaf);
            if !covered[pick].contains(&g) {
                covered[pick].push(g);
            }
        }
        let leaf_ids: Vec<usize> = covered
            .iter()
            .map(|cov| {
                let mut cov = cov.clone();
                cov.sort_unstable();
                nodes.push(leaf(2, cov));
                nodes.len() - 1
            })
            .collect();
        let mid_ids: Vec<usize> = (0..n_mid)
            .map(|_| {
                nodes.push(internal(1));
                nodes.len() - 1
            })
            .collect();
        // Each leaf lives under exactly one owner (a mid subproblem or the
        // root), keeping sibling subgraphs disjoint as in a real dissection.
        let zone: Vec<usize> = (0..n_leaf).map(|_| rng.gen_range(0..=n_mid)).collect();
        let mut edges = Vec::new();
        for (mi, &m) in mid_ids.iter().enumerate() {
            let pool: Vec<usize> = (0..n_leaf)
                .filter(|&l| zone[l] == mi + 1)
                .map(|l| leaf_ids[l])
                .collect();
            for _ in 0..rng.gen_range(1..=2) {
                let c = nodes.len();
                nodes.push(combo(1));
                edges.push(edge(m, c, 0.0));
                let mut kids = pool.clone();
                for i in (1..kids.len()).rev() {
                    kids.swap(i, rng.gen_range(0..=i));
                }
                if !kids.is_empty() {
                    kids.truncate(rng.gen_range(1..=kids.len()));
                }
                for kid in kids {
                    edges.push(edge(c, kid, rng.gen_range(0..10) as f64));
                }
            }
        }
        let root_pool: Vec<usize> = mid_ids
            .iter()
            .copied()
            .chain((0..n_leaf).filter(|&l| zone[l] == 0).map(|l| leaf_ids[l]))
            .collect();
        for _ in 0..rng.gen_range(1..=3) {
            let c = nodes.len();
            nodes.push(combo(0));
            edges.push(edge(0, c, 0.0));
            let mut kids = root_pool.clone();
            for i in (1..kids.len()).rev() {
                kids.swap(i, rng.gen_range(0..=i));
            }
            kids.truncate(rng.gen_range(1..=kids.len()));
            for kid in kids {
                edges.push(edge(c, kid, rng.gen_range(0..10) as f64));
            }
        }
        (DpGraph::from_parts(nodes, edges, 0, h).unwrap(), h)
    }

    fn brute_optimum(dag: &DpGraph, groups: &[Vec<usize>]) -> Option<f64> {
        let trees = enumerate_trees(dag, 200_000).unwrap();
        trees
            .iter()
            .filter(|t| {
                groups
                    .iter()
                    .all(|s| s.iter().any(|v| t.nodes.contains(v)))
            })
            .map(|t| t.cost(dag))
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    #[test]
    fn exact_matches_brute_force_on_random_graphs() {
        for seed in 0..30u64 {
            let (dag, _) = random_dag(seed);
            let inst = match StgstInstance::new(&dag) {
                Ok(i) => i,
                Err(_) => continue,
            };
            let brute = brute_optimum(&dag, &inst.groups);
            match exact_stgst(&inst, 1_000_000) {
                Ok(t) => {
                    assert!(validate_solution_tree(&dag, &t));
                    let want = brute.expect("exact found a tree, so one exists");
                    assert_eq!(t.cost(&dag), want, "seed {seed}");
                    let lp = lp_relax(&inst).unwrap();
                    assert!(lp.objective <= want + 1e-6, "seed {seed}");
                    assert!(validate_fractional(&inst, &lp));
                    for s in 0..3 {
                        let r = round_once(&inst, &lp, s).unwrap();
                        assert!(validate_solution_tree(&dag, &r), "seed {seed}");
                    }
                }
                Err(_) => assert!(brute.is_none(), "seed {seed}"),
            }
        }
    }

    #[test]
    fn real_graph_exact_equals_enumeration() {
        use crate::dpgraph::build_dag;
        use crate::geometry::Point;
        use crate::instance::DiscreteInstance;
        use crate::quadtree::{build_quadtree, enumerate_guesses, perturb, DpConfig};
        let base = [[0.15, 0.2], [0.8, 0.3], [0.45, 0.75]];
        let nbh: Vec<Vec<Point>> = base
            .iter()
            .map(|p| vec![Point::new(p.to_vec()).unwrap()])
            .collect();
        let inst0 = DiscreteInstance::new(2, nbh).unwrap();
        let ctx = enumerate_guesses(&inst0)
            .into_iter()
            .find(|c| c.kept.len() == 3)
            .unwrap();
        let pi = perturb(&inst0, &ctx).unwrap();
        let tree = build_quadtree(&pi, &[0, 0]).unwrap();
        let dag = build_dag(&pi, &tree, &DpConfig::for_dim(2), false).unwrap();
        let inst = StgstInstance::new(&dag).unwrap();
        let exact = exact_stgst(&inst, 1_000_000).unwrap();
        assert!(validate_solution_tree(&dag, &exact));
        let best = brute_optimum(&dag, &inst.groups).unwrap();
        let got = exact.cost(&dag);
        assert!(
            (got - best).abs() <= 1e-9 * best.max(1.0),
            "exact {got} vs enumeration {best}"
        );
        let lp = lp_relax(&inst).unwrap();
        assert!(validate_fractional(&inst, &lp));
        assert!(lp.objective <= got + 1e-6);
        let report = solve_stgst(&inst, DEFAULT_ROUNDS_FACTOR, 7).unwrap();
        for t in &report.trees {
            assert!(validate_solution_tree(&dag, t));
        }
        assert!(report.uncovered.iter().all(|&u| !u));
    }

    #[test]
    fn reports_are_reproducible_and_covering() {
        let dag = fan(&[(2.0, vec![0]), (3.0, vec![1])], 2);
        let inst = StgstInstance::new(&dag).unwrap();
        let a = solve_stgst(&inst, DEFAULT_ROUNDS_FACTOR, 11).unwrap();
        let b = solve_stgst(&inst, DEFAULT_ROUNDS_FACTOR, 11).unwrap();
        assert_eq!(a.costs, b.costs);
        assert_eq!(a.coverage, b.coverage);
        assert!(!a.trees.is_empty());
        assert!(a.uncovered.iter().all(|&u| !u));
        assert_eq!(a.coverage, vec![a.trees.len(); 2]);
        assert!((a.mean_cost - 5.0).abs() < 1e-9);
    }
}
