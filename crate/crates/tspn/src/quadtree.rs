//! Shifted-quadtree machinery for the multipath DP: radius guessing, integer
//! perturbation, dissection construction, portal grids, per-cell boundary
//! states, and the enumerator that expands a cell state into child states.
//!
//! Geometry convention: the perturbed instance lives on an integer grid whose
//! unit is `g/8` original length units. Point coordinates are congruent to 4
//! mod 8 and shifts are multiples of 8, so no point ever lies on a dissection
//! plane (every cell in the tree has side >= 8). Portal and slot coordinates
//! are stored in "fine" units: shifted grid units times `k + 1`, where `k` is
//! the per-axis interior portal count. This keeps every portal coordinate an
//! exact integer, so portals shared by neighboring cells match bit for bit.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::geometry::{Point, Tour};
use crate::instance::DiscreteInstance;

/// One (start point, radius) guess: the DP runs once per context.
#[derive(Clone, Debug)]
pub struct GuessContext {
    /// Index into the instance point list of the anchor point v0.
    pub v0_index: usize,
    pub v0: Point,
    /// Smallest radius around v0 that touches every group.
    pub r0: f64,
    /// The guessed tour-length scale; 0 marks the degenerate all-groups-at-v0 case.
    pub r: f64,
    /// Half of r; the perturbation grid pitch is l0 / (8 N).
    pub l0: f64,
    /// Indices of the instance points within distance r of v0.
    pub kept: Vec<usize>,
}

/// Enumerates all (v0, R) contexts: for each point, R doubles from R0 until
/// it passes 4nR0, giving floor(log2(4n)) + 1 radii per anchor.
pub fn enumerate_guesses(inst: &DiscreteInstance) -> Vec<GuessContext> {
    let n = inst.groups.len();
    let steps = ((4 * n) as f64).log2().floor() as i32;
    let mut out = Vec::new();
    for (vi, v0) in inst.points.iter().enumerate() {
        let mut r0 = 0.0f64;
        for grp in &inst.groups {
            let d = grp
                .iter()
                .map(|&p| v0.dist(&inst.points[p]))
                .fold(f64::INFINITY, f64::min);
            r0 = r0.max(d);
        }
        if r0 == 0.0 {
            out.push(GuessContext {
                v0_index: vi,
                v0: v0.clone(),
                r0,
                r: 0.0,
                l0: 0.0,
                kept: vec![vi],
            });
            continue;
        }
        for j in 0..=steps {
            let r = r0 * f64::powi(2.0, j);
            let kept: Vec<usize> = inst
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| v0.dist(p) <= r)
                .map(|(i, _)| i)
                .collect();
            let feasible = inst
                .groups
                .iter()
                .all(|grp| grp.iter().any(|p| kept.binary_search(p).is_ok()));
            if !feasible {
                continue;
            }
            out.push(GuessContext {
                v0_index: vi,
                v0: v0.clone(),
                r0,
                r,
                l0: r / 2.0,
                kept,
            });
        }
    }
    out
}

/// The instance after snapping to the integer grid of one guess context.
#[derive(Clone, Debug)]
pub struct PerturbedInstance {
    pub dim: usize,
    /// Grid pitch in original units; one integer unit is g/8 original units.
    pub g: f64,
    /// Original coordinates of integer origin.
    pub corner: Vec<f64>,
    /// Dissection modulus: shifts range over multiples of 8 below l, and the
    /// root box has side 2l. Always a power of two.
    pub l: i64,
    /// Merged integer points (coordinates = 4 mod 8; unused axes 0).
    pub points: Vec<[i64; 3]>,
    /// Sorted group ids per merged point.
    pub memberships: Vec<Vec<usize>>,
    /// Merged point ids per group.
    pub groups: Vec<Vec<usize>>,
    /// Original instance point indices behind each merged point.
    pub back: Vec<Vec<usize>>,
}

impl PerturbedInstance {
    /// Maps integer grid coordinates (unshifted) back to original space.
    pub fn unit_to_point(&self, c: &[i64; 3]) -> Point {
        let u = self.g / 8.0;
        Point {
            coords: (0..self.dim)
                .map(|j| self.corner[j] + c[j] as f64 * u)
                .collect(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Snaps the kept points of a guess onto the integer grid, merging duplicates.
pub fn perturb(inst: &DiscreteInstance, ctx: &GuessContext) -> Result<PerturbedInstance> {
    let d = inst.dim;
    if !(2..=3).contains(&d) {
        return Err(Error::InvalidParameter(format!(
            "the quadtree DP supports dimensions 2 and 3, got {d}"
        )));
    }
    if ctx.r <= 0.0 {
        return Err(Error::InvalidParameter(
            "cannot perturb a zero-radius guess context".into(),
        ));
    }
    let nn = inst.points.len();
    let g = ctx.l0 / (8.0 * nn as f64);
    let corner: Vec<f64> = (0..d).map(|j| ctx.v0.coords[j] - ctx.r).collect();
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut points: Vec<[i64; 3]> = Vec::new();
    let mut member_sets: Vec<BTreeSet<usize>> = Vec::new();
    let mut back: Vec<Vec<usize>> = Vec::new();
    for &orig in &ctx.kept {
        let p = &inst.points[orig];
        let mut c = [0i64; 3];
        for (j, cj) in c.iter_mut().enumerate().take(d) {
            let x = (p.coords[j] - corner[j]) / g;
            *cj = 8 * ((x - 0.5).round() as i64) + 4;
        }
        let id = *index.entry(c).or_insert_with(|| {
            points.push(c);
            member_sets.push(BTreeSet::new());
            back.push(Vec::new());
            points.len() - 1
        });
        for &gi in &inst.memberships[orig] {
            member_sets[id].insert(gi);
        }
        back[id].push(orig);
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); inst.groups.len()];
    for (mi, ms) in member_sets.iter().enumerate() {
        for &gi in ms {
            groups[gi].push(mi);
        }
    }
    for (gi, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Infeasible(format!(
                "group {gi} has no point within the guess radius"
            )));
        }
    }
    let l = (256 * nn as u64).next_power_of_two() as i64;
    Ok(PerturbedInstance {
        dim: d,
        g,
        corner,
        l,
        points,
        memberships: member_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        groups,
        back,
    })
}

/// One box of the dissection, in shifted grid units.
#[derive(Clone, Debug)]
pub struct Cell {
    pub level: u32,
    pub lo: [i64; 3],
    pub side: i64,
    pub parent: Option<usize>,
    /// 2^d children in bit order (bit j set = high half of axis j); empty for leaves.
    pub children: Vec<usize>,
    /// Merged point ids inside this cell.
    pub points: Vec<usize>,
}

impl Cell {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A quadtree over the shifted point set; cells[0] is the root box [0, 2l)^d.
#[derive(Clone, Debug)]
pub struct ShiftedQuadtree {
    pub dim: usize,
    pub l: i64,
    pub shift: [i64; 3],
    pub cells: Vec<Cell>,
    /// points[i] + shift, the coordinates the cells are built over.
    pub shifted_points: Vec<[i64; 3]>,
}

impl ShiftedQuadtree {
    pub fn root(&self) -> usize {
        0
    }

    pub fn height(&self) -> u32 {
        self.cells.iter().map(|c| c.level).max().unwrap_or(0)
    }

    /// Walks down to the leaf holding a merged point.
    pub fn leaf_of(&self, merged: usize) -> usize {
        let mut c = 0;
        while !self.cells[c].is_leaf() {
            c = *self.cells[c]
                .children
                .iter()
                .find(|&&k| self.cells[k].points.contains(&merged))
                .expect("point lost during descent");
        }
        c
    }
}

/// Draws one admissible shift: independent multiples of 8 below l.
pub fn random_shift<R: rand::Rng>(l: i64, dim: usize, rng: &mut R) -> Vec<i64> {
    (0..dim).map(|_| 8 * rng.gen_range(0..l / 8)).collect()
}

/// Builds the dissection for one shift; splits every cell holding >= 2 points.
pub fn build_quadtree(pi: &PerturbedInstance, shift: &[i64]) -> Result<ShiftedQuadtree> {
    let d = pi.dim;
    if shift.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: shift.len(),
        });
    }
    for &a in shift {
        if a < 0 || a >= pi.l || a % 8 != 0 {
            return Err(Error::InvalidParameter(format!(
                "shift components must be multiples of 8 in [0, {}), got {a}",
                pi.l
            )));
        }
    }
    let mut sh = [0i64; 3];
    sh[..d].copy_from_slice(shift);
    let shifted: Vec<[i64; 3]> = pi
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for j in 0..d {
                q[j] += sh[j];
            }
            q
        })
        .collect();
    let mut cells = vec![Cell {
        level: 0,
        lo: [0; 3],
        side: 2 * pi.l,
        parent: None,
        children: Vec::new(),
        points: (0..shifted.len()).collect(),
    }];
    let mut stack = vec![0usize];
    while let Some(ci) = stack.pop() {
        if cells[ci].points.len() < 2 {
            continue;
        }
        let (lo, side, level) = (cells[ci].lo, cells[ci].side, cells[ci].level);
        debug_assert!(side >= 16, "cells with two points are at least 16 wide");
        let h = side / 2;
        let nk = 1usize << d;
        let mut kids: Vec<Cell> = (0..nk)
            .map(|mask| {
                let mut klo = lo;
                for j in 0..d {
                    if mask >> j & 1 == 1 {
                        klo[j] += h;
                    }
                }
                Cell {
                    level: level + 1,
                    lo: klo,
                    side: h,
                    parent: Some(ci),
                    children: Vec::new(),
                    points: Vec::new(),
                }
            })
            .collect();
        for &p in &cells[ci].points {
            let sp = shifted[p];
            let mut mask = 0usize;
            for j in 0..d {
                if sp[j] >= lo[j] + h {
                    mask |= 1 << j;
                }
            }
            kids[mask].points.push(p);
        }
        let base = cells.len();
        for (t, kid) in kids.into_iter().enumerate() {
            cells.push(kid);
            stack.push(base + t);
        }
        cells[ci].children = (base..base + nk).collect();
    }
    Ok(ShiftedQuadtree {
        dim: d,
        l: pi.l,
        shift: sh,
        cells,
        shifted_points: shifted,
    })
}

/// Per-axis interior portal count k, from the per-facet total m = k^(d-1).
pub fn per_axis_portals(m: usize, dim: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::InvalidParameter("portal parameter m must be >= 1".into()));
    }
    let k = match dim {
        2 => m,
        3 => {
            let k = (m as f64).sqrt().round() as usize;
            if k * k != m {
                return Err(Error::InvalidParameter(format!(
                    "in dimension 3, m must be a perfect square, got {m}"
                )));
            }
            k
        }
        _ => {
            return Err(Error::InvalidParameter(format!(
                "portals are defined for dimensions 2 and 3, got {dim}"
            )))
        }
    };
    Ok(k)
}

/// Interior portal lattice of one facet, in fine units (grid units * (k+1)).
pub(crate) fn facet_positions(lo: &[i64; 3], side: i64, dim: usize, facet: u8, k: usize) -> Vec<[i64; 3]> {
    let fs = (k + 1) as i64;
    let axis = (facet >> 1) as usize;
    let high = facet & 1 == 1;
    let mut base = [0i64; 3];
    for j in 0..dim {
        base[j] = lo[j] * fs;
    }
    if high {
        base[axis] += side * fs;
    }
    let others: Vec<usize> = (0..dim).filter(|&j| j != axis).collect();
    let mut out = Vec::new();
    let mut idx = vec![1usize; others.len()];
    loop {
        let mut p = base;
        for (oi, &j) in others.iter().enumerate() {
            p[j] += side * idx[oi] as i64;
        }
        out.push(p);
        let mut carry = true;
        for oi in (0..others.len()).rev() {
            if !carry {
                break;
            }
            idx[oi] += 1;
            if idx[oi] > k {
                idx[oi] = 1;
            } else {
                carry = false;
            }
        }
        if carry {
            break;
        }
    }
    out
}

/// Full portal set of a cell: the 2^d corners plus the interior lattice of
/// each of the 2d facets, all in fine units.
#[derive(Clone, Debug)]
pub struct PortalSet {
    pub corners: Vec<[i64; 3]>,
    pub facets: Vec<Vec<[i64; 3]>>,
}

impl PortalSet {
    pub fn count(&self) -> usize {
        self.corners.len() + self.facets.iter().map(Vec::len).sum::<usize>()
    }
}

pub fn portals(cell: &Cell, m: usize, dim: usize) -> Result<PortalSet> {
    let k = per_axis_portals(m, dim)?;
    let fs = (k + 1) as i64;
    let mut corners = Vec::new();
    for mask in 0..1usize << dim {
        let mut p = [0i64; 3];
        for j in 0..dim {
            p[j] = (cell.lo[j] + if mask >> j & 1 == 1 { cell.side } else { 0 }) * fs;
        }
        corners.push(p);
    }
    let facets = (0..2 * dim as u8)
        .map(|f| facet_positions(&cell.lo, cell.side, dim, f, k))
        .collect();
    Ok(PortalSet { corners, facets })
}

/// Search-width knobs for the DP; all state enumeration is bounded by these.
#[derive(Clone, Debug)]
pub struct DpConfig {
    /// Interior portals per facet (k^(d-1) for per-axis count k).
    pub m: usize,
    /// Maximum crossings per cell facet.
    pub r: usize,
    /// Maximum boundary crossings of one cell, all facets combined.
    pub max_cell_crossings: usize,
    /// Maximum inner-wall crossings along one path through a cell.
    pub max_path_hops: usize,
    /// Maximum inner-wall crossings when a closed tour is split among children.
    pub max_loop_hops: usize,
    /// Maximum number of DP graph nodes before giving up.
    pub node_budget: usize,
}

impl DpConfig {
    pub fn for_dim(dim: usize) -> DpConfig {
        if dim <= 2 {
            DpConfig {
                m: 1,
                r: 2,
                max_cell_crossings: 4,
                max_path_hops: 2,
                max_loop_hops: 4,
                node_budget: 5_000_000,
            }
        } else {
            DpConfig {
                m: 1,
                r: 2,
                max_cell_crossings: 2,
                max_path_hops: 7,
                max_loop_hops: 8,
                node_budget: 5_000_000,
            }
        }
    }
}

/// One crossing on a cell boundary: the facet crossed and the portal position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    /// 2 * axis + (1 if the high facet of that axis).
    pub facet: u8,
    /// Fine-unit coordinates (shifted frame).
    pub pos: [i64; 3],
}

/// How the tour meets one cell.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellState {
    /// The tour does not touch the cell.
    Idle,
    /// The whole closed tour lies inside the cell.
    Loop,
    /// The tour crosses the boundary; each pair is one path's two endpoints.
    Paths(Vec<(Slot, Slot)>),
}

/// Canonical form: each pair ordered, pair list sorted. States compare equal
/// exactly when they describe the same multiset of endpoint pairs.
pub fn paths_state(mut pairs: Vec<(Slot, Slot)>) -> CellState {
    for p in &mut pairs {
        if p.1 < p.0 {
            std::mem::swap(&mut p.0, &mut p.1);
        }
    }
    pairs.sort();
    CellState::Paths(pairs)
}

/// A cell state plus the visit bit (meaningful only on leaves with a point).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey {
    pub state: CellState,
    pub visit: bool,
}

fn fdist(a: &[i64; 3], b: &[i64; 3]) -> f64 {
    let mut s = 0i64;
    for j in 0..3 {
        let d = a[j] - b[j];
        s += d * d;
    }
    (s as f64).sqrt()
}

/// True when the straight segment between two distinct slots lies inside one
/// of the cell's own boundary planes.
fn rides_boundary(cell: &Cell, dim: usize, fs: i64, a: &Slot, b: &Slot) -> bool {
    if a.pos == b.pos {
        return false;
    }
    for j in 0..dim {
        if a.pos[j] == b.pos[j]
            && (a.pos[j] == cell.lo[j] * fs || a.pos[j] == (cell.lo[j] + cell.side) * fs)
        {
            return true;
        }
    }
    false
}

/// Optimal multipath geometry inside a leaf: straight portal-to-portal
/// segments, plus the cheapest detour through the point when the visit bit is
/// set. Returns the cost in fine units and the path polylines.
pub(crate) fn leaf_paths(
    cell: &Cell,
    dim: usize,
    fs: i64,
    key: &StateKey,
    point: Option<[i64; 3]>,
) -> Result<(f64, Vec<Vec<[i64; 3]>>)> {
    if key.visit && point.is_none() {
        return Err(Error::InvalidParameter(
            "visit bit set on a leaf with no point".into(),
        ));
    }
    match &key.state {
        CellState::Idle => {
            if key.visit {
                Err(Error::Infeasible("visit bit set with no paths".into()))
            } else {
                Ok((0.0, Vec::new()))
            }
        }
        CellState::Loop => {
            let p = point.ok_or_else(|| Error::Infeasible("closed loop in an empty leaf".into()))?;
            if !key.visit {
                return Err(Error::Infeasible(
                    "closed loop in a leaf must visit its point".into(),
                ));
            }
            Ok((0.0, vec![vec![p]]))
        }
        CellState::Paths(pairs) => {
            let riders: Vec<usize> = pairs
                .iter()
                .enumerate()
                .filter(|(_, (a, b))| rides_boundary(cell, dim, fs, a, b))
                .map(|(i, _)| i)
                .collect();
            if riders.len() > 1 || (riders.len() == 1 && !key.visit) {
                return Err(Error::Infeasible(
                    "straight path would ride a cell boundary plane".into(),
                ));
            }
            let base: f64 = pairs.iter().map(|(a, b)| fdist(&a.pos, &b.pos)).sum();
            let mut paths: Vec<Vec<[i64; 3]>> =
                pairs.iter().map(|(a, b)| vec![a.pos, b.pos]).collect();
            if !key.visit {
                return Ok((base, paths));
            }
            let p = point.unwrap();
            let candidates: Vec<usize> = if riders.len() == 1 {
                riders
            } else {
                (0..pairs.len()).collect()
            };
            let mut best: Option<(usize, f64)> = None;
            for i in candidates {
                let (a, b) = &pairs[i];
                let detour = fdist(&a.pos, &p) + fdist(&p, &b.pos) - fdist(&a.pos, &b.pos);
                if best.map_or(true, |(_, d)| detour < d) {
                    best = Some((i, detour));
                }
            }
            let (i, detour) = best.ok_or_else(|| {
                Error::Infeasible("visit bit set with no paths".into())
            })?;
            paths[i] = vec![pairs[i].0.pos, p, pairs[i].1.pos];
            Ok((base + detour, paths))
        }
    }
}

/// Cost of the optimal multipath realization inside a leaf cell.
pub fn solve_leaf(
    cell: &Cell,
    dim: usize,
    fs: i64,
    key: &StateKey,
    point: Option<[i64; 3]>,
) -> Result<f64> {
    leaf_paths(cell, dim, fs, key, point).map(|(c, _)| c)
}

/// An inner wall of a split cell: the shared facet of two child cells.
struct Wall {
    /// Child slot index (0..2^d) on the low side of the axis.
    a: usize,
    /// Child slot index on the high side.
    b: usize,
    axis: usize,
    positions: Vec<[i64; 3]>,
}

/// Pair accumulator used during walk enumeration.
#[derive(Clone)]
struct Acc {
    pairs: Vec<Vec<(Slot, Slot)>>,
    slot_count: Vec<usize>,
    facet_count: Vec<[u8; 6]>,
}

impl Acc {
    fn new(nk: usize) -> Acc {
        Acc {
            pairs: vec![Vec::new(); nk],
            slot_count: vec![0; nk],
            facet_count: vec![[0; 6]; nk],
        }
    }

    /// Adds one path segment through child `kid`; false if a cap is exceeded.
    fn add(&mut self, kid: usize, s1: Slot, s2: Slot, cfg: &DpConfig) -> bool {
        self.slot_count[kid] += 2;
        if self.slot_count[kid] > cfg.max_cell_crossings {
            return false;
        }
        for s in [&s1, &s2] {
            let f = s.facet as usize;
            self.facet_count[kid][f] += 1;
            if self.facet_count[kid][f] as usize > cfg.r {
                return false;
            }
        }
        self.pairs[kid].push((s1, s2));
        true
    }
}

/// Exit facet of child `kid` when crossing `wall`.
fn exit_facet(wall: &Wall, kid: usize) -> u8 {
    if kid == wall.a {
        (2 * wall.axis + 1) as u8
    } else {
        (2 * wall.axis) as u8
    }
}

fn other_side(wall: &Wall, kid: usize) -> usize {
    if kid == wall.a {
        wall.b
    } else {
        wall.a
    }
}

/// Expands one cell state into all admissible child-state vectors (aligned
/// with `cell.children`). With `force_visit` set, children holding points are
/// never left Idle.
pub(crate) fn enumerate_combinations(
    tree: &ShiftedQuadtree,
    cell_idx: usize,
    state: &CellState,
    cfg: &DpConfig,
    force_visit: bool,
) -> Result<Vec<Vec<CellState>>> {
    let cell = &tree.cells[cell_idx];
    debug_assert!(!cell.is_leaf());
    let d = tree.dim;
    let nk = 1usize << d;
    let k = per_axis_portals(cfg.m, d)?;
    let fs = (k + 1) as i64;
    let h = cell.side / 2;
    let kid_cells: Vec<&Cell> = cell.children.iter().map(|&c| &tree.cells[c]).collect();
    let occupied: Vec<bool> = kid_cells.iter().map(|c| !c.points.is_empty()).collect();

    let mut walls: Vec<Wall> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nk];
    for axis in 0..d {
        for a in 0..nk {
            if a >> axis & 1 == 1 {
                continue;
            }
            let b = a | 1 << axis;
            let positions = facet_positions(&kid_cells[b].lo, h, d, (2 * axis) as u8, k);
            adj[a].push(walls.len());
            adj[b].push(walls.len());
            walls.push(Wall { a, b, axis, positions });
        }
    }

    let mut out: BTreeSet<Vec<CellState>> = BTreeSet::new();
    let finalize = |acc: &Acc, out: &mut BTreeSet<Vec<CellState>>| {
        let mut v = Vec::with_capacity(nk);
        for t in 0..nk {
            if acc.pairs[t].is_empty() {
                if force_visit && occupied[t] {
                    return;
                }
                v.push(CellState::Idle);
            } else {
                v.push(paths_state(acc.pairs[t].clone()));
            }
        }
        out.insert(v);
    };

    // Walk extension below is shared by path and loop enumeration. `last` is
    // the most recent crossing; consecutive crossings of one wall must reuse
    // the same position unless the child between them holds a point.
    match state {
        CellState::Idle => {
            let acc = Acc::new(nk);
            finalize(&acc, &mut out);
        }
        CellState::Loop => {
            for t in 0..nk {
                if !occupied[t] {
                    continue;
                }
                if force_visit && occupied.iter().enumerate().any(|(s, &o)| o && s != t) {
                    continue;
                }
                let mut v = vec![CellState::Idle; nk];
                v[t] = CellState::Loop;
                out.insert(v);
            }
            // Closed walks: first crossing fixed, then depth-first extension.
            struct LoopCtx<'a> {
                walls: &'a [Wall],
                adj: &'a [Vec<usize>],
                cfg: &'a DpConfig,
                first_kid: usize,
                first_exit: Slot,
                first_wall: usize,
                first_pos: [i64; 3],
            }
            #[allow(clippy::too_many_arguments)]
            fn dfs_loop(
                ctx: &LoopCtx,
                cur: usize,
                entry: Slot,
                hops: usize,
                last: (usize, [i64; 3]),
                acc: &Acc,
                occupied: &[bool],
                emit: &mut dyn FnMut(&Acc),
            ) {
                if hops >= ctx.cfg.max_loop_hops {
                    return;
                }
                for &wi in &ctx.adj[cur] {
                    let w = &ctx.walls[wi];
                    for q in &w.positions {
                        if !(match last {
                            (lw, lq) if lw == wi && lq != *q => occupied[cur],
                            _ => true,
                        }) {
                            continue;
                        }
                        let exit = Slot { facet: exit_facet(w, cur), pos: *q };
                        let nxt = other_side(w, cur);
                        let nxt_entry = Slot { facet: exit_facet(w, nxt), pos: *q };
                        let mut acc2 = acc.clone();
                        if !acc2.add(cur, entry, exit, ctx.cfg) {
                            continue;
                        }
                        if nxt == ctx.first_kid {
                            // Close here: the wrap pair joins the final entry
                            // to the very first exit.
                            let wrap_ok = if wi == ctx.first_wall && *q != ctx.first_pos {
                                occupied[nxt]
                            } else {
                                true
                            };
                            if wrap_ok {
                                let mut acc3 = acc2.clone();
                                if acc3.add(nxt, nxt_entry, ctx.first_exit, ctx.cfg) {
                                    emit(&acc3);
                                }
                            }
                        }
                        dfs_loop(ctx, nxt, nxt_entry, hops + 1, (wi, *q), &acc2, occupied, emit);
                    }
                }
            }
            for (wi, w) in walls.iter().enumerate() {
                for q in &w.positions {
                    for (first, second) in [(w.a, w.b), (w.b, w.a)] {
                        let first_exit = Slot { facet: exit_facet(w, first), pos: *q };
                        let entry = Slot { facet: exit_facet(w, second), pos: *q };
                        let ctx = LoopCtx {
                            walls: &walls,
                            adj: &adj,
                            cfg,
                            first_kid: first,
                            first_exit,
                            first_wall: wi,
                            first_pos: *q,
                        };
                        let acc = Acc::new(nk);
                        let mut emit = |a: &Acc| finalize(a, &mut out);
                        dfs_loop(&ctx, second, entry, 1, (wi, *q), &acc, &occupied, &mut emit);
                    }
                }
            }
        }
        CellState::Paths(pairs) => {
            // Candidate children for each parent-boundary slot (closed boxes,
            // so a slot on a child corner may belong to several children).
            let candidates = |s: &Slot| -> Vec<usize> {
                let axis = (s.facet >> 1) as usize;
                let high = s.facet & 1 == 1;
                (0..nk)
                    .filter(|&t| {
                        if (t >> axis & 1 == 1) != high {
                            return false;
                        }
                        (0..d).all(|j| {
                            j == axis
                                || (kid_cells[t].lo[j] * fs <= s.pos[j]
                                    && s.pos[j] <= (kid_cells[t].lo[j] + h) * fs)
                        })
                    })
                    .collect()
            };
            struct PathCtx<'a> {
                walls: &'a [Wall],
                adj: &'a [Vec<usize>],
                cfg: &'a DpConfig,
                pairs: &'a [(Slot, Slot)],
                assign: &'a [(usize, usize)],
                occupied: &'a [bool],
            }
            // Depth-first over pairs; within a pair, depth-first over walks.
            fn do_pair(
                ctx: &PathCtx,
                pair_idx: usize,
                acc: &Acc,
                emit: &mut dyn FnMut(&Acc),
            ) {
                if pair_idx == ctx.pairs.len() {
                    emit(acc);
                    return;
                }
                let (sa, sb) = &ctx.pairs[pair_idx];
                let (ka, kb) = ctx.assign[pair_idx];
                walk(ctx, pair_idx, ka, *sa, kb, *sb, 0, None, acc, emit);
            }
            #[allow(clippy::too_many_arguments)]
            fn walk(
                ctx: &PathCtx,
                pair_idx: usize,
                cur: usize,
                entry: Slot,
                target: usize,
                target_slot: Slot,
                hops: usize,
                last: Option<(usize, [i64; 3])>,
                acc: &Acc,
                emit: &mut dyn FnMut(&Acc),
            ) {
                if cur == target {
                    let mut acc2 = acc.clone();
                    if acc2.add(cur, entry, target_slot, ctx.cfg) {
                        do_pair(ctx, pair_idx + 1, &acc2, emit);
                    }
                }
                if hops >= ctx.cfg.max_path_hops {
                    return;
                }
                for &wi in &ctx.adj[cur] {
                    let w = &ctx.walls[wi];
                    for q in &w.positions {
                        let ok = match last {
                            Some((lw, lq)) if lw == wi && lq != *q => ctx.occupied[cur],
                            _ => true,
                        };
                        if !ok {
                            continue;
                        }
                        let exit = Slot { facet: exit_facet(w, cur), pos: *q };
                        let nxt = other_side(w, cur);
                        let nxt_entry = Slot { facet: exit_facet(w, nxt), pos: *q };
                        let mut acc2 = acc.clone();
                        if !acc2.add(cur, entry, exit, ctx.cfg) {
                            continue;
                        }
                        walk(
                            ctx,
                            pair_idx,
                            nxt,
                            nxt_entry,
                            target,
                            target_slot,
                            hops + 1,
                            Some((wi, *q)),
                            &acc2,
                            emit,
                        );
                    }
                }
            }
            // Enumerate slot-to-child assignments as a product over pairs.
            let cand: Vec<(Vec<usize>, Vec<usize>)> = pairs
                .iter()
                .map(|(a, b)| (candidates(a), candidates(b)))
                .collect();
            let mut assign: Vec<(usize, usize)> = vec![(0, 0); pairs.len()];
            fn product(
                i: usize,
                cand: &[(Vec<usize>, Vec<usize>)],
                assign: &mut Vec<(usize, usize)>,
                run: &mut dyn FnMut(&[(usize, usize)]),
            ) {
                if i == cand.len() {
                    run(assign);
                    return;
                }
                for &ka in &cand[i].0 {
                    for &kb in &cand[i].1 {
                        assign[i] = (ka, kb);
                        product(i + 1, cand, assign, run);
                    }
                }
            }
            let mut run = |assign: &[(usize, usize)]| {
                let ctx = PathCtx {
                    walls: &walls,
                    adj: &adj,
                    cfg,
                    pairs,
                    assign,
                    occupied: &occupied,
                };
                let acc = Acc::new(nk);
                let mut emit = |a: &Acc| finalize(a, &mut out);
                do_pair(&ctx, 0, &acc, &mut emit);
            };
            product(0, &cand, &mut assign, &mut run);
        }
    }
    Ok(out.into_iter().collect())
}

/// Point-TSP on a perturbed instance: every point visited, minimum cost over
/// this shift's portal-respecting tours. Errors if the crossing caps leave no
/// feasible root realization.
pub fn dp_tsp(pi: &PerturbedInstance, tree: &ShiftedQuadtree, cfg: &DpConfig) -> Result<Tour> {
    let dag = crate::dpgraph::build_dag(pi, tree, cfg, true)?;
    let t = crate::dpgraph::min_cost_tree(&dag)?;
    let (tour, _) = crate::dpgraph::tree_to_tour(&t, &dag)?;
    Ok(tour)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn inst_from(points: Vec<Vec<f64>>, groups: Vec<Vec<usize>>) -> DiscreteInstance {
        let pts: Vec<Vec<Point>> = groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&i| Point::new(points[i].clone()).unwrap())
                    .collect()
            })
            .collect();
        DiscreteInstance::new(points[0].len(), pts).unwrap()
    }

    #[test]
    fn guess_radius_takes_the_farthest_group() {
        let inst = inst_from(
            vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![3.0, 0.0]],
            vec![vec![0], vec![1], vec![2]],
        );
        let ctxs = enumerate_guesses(&inst);
        let first = ctxs.iter().find(|c| c.v0_index == 0).unwrap();
        assert!((first.r0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn guess_schedule_has_log_many_radii() {
        let inst = inst_from(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.5]],
            vec![vec![0], vec![1], vec![2]],
        );
        let ctxs = enumerate_guesses(&inst);
        // n = 3 groups: floor(log2(12)) + 1 = 4 radii per anchor point.
        for vi in 0..3 {
            assert_eq!(ctxs.iter().filter(|c| c.v0_index == vi).count(), 4);
        }
        for c in &ctxs {
            assert_eq!(c.kept.len(), 3, "every radius covers all points here");
        }
    }

    #[test]
    fn coincident_groups_give_one_trivial_context() {
        let inst = inst_from(vec![vec![2.0, 3.0]], vec![vec![0]]);
        let ctxs = enumerate_guesses(&inst);
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].r, 0.0);
        assert_eq!(ctxs[0].r0, 0.0);
    }

    fn random_instance(n: usize, seed: u64) -> DiscreteInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        inst_from(points, groups)
    }

    #[test]
    fn perturbed_coordinates_are_integral_and_separated() {
        let inst = random_instance(9, 7);
        let ctx = enumerate_guesses(&inst)
            .into_iter()
            .find(|c| c.kept.len() == 9)
            .unwrap();
        let pi = perturb(&inst, &ctx).unwrap();
        for p in &pi.points {
            for j in 0..2 {
                assert_eq!(p[j].rem_euclid(8), 4);
                assert!(p[j] >= 0);
            }
        }
        for i in 0..pi.points.len() {
            for j in 0..i {
                let dx = fdist(&pi.points[i], &pi.points[j]);
                assert!(dx >= 8.0, "merged points must be 8 units apart");
            }
        }
        assert!((pi.l as u64).is_power_of_two());
        assert!(pi.l >= 256 * 9);
    }

    #[test]
    fn near_duplicates_merge_and_pool_memberships() {
        // Distinct at instance level, coincident after grid snapping.
        let eps = 1e-6;
        let inst = inst_from(
            vec![vec![0.0, 0.0], vec![eps, 0.0], vec![1.0, 0.0]],
            vec![vec![0], vec![1], vec![2]],
        );
        let ctx = enumerate_guesses(&inst)
            .into_iter()
            .find(|c| c.v0_index == 0 && c.kept.len() == 3)
            .unwrap();
        let pi = perturb(&inst, &ctx).unwrap();
        assert_eq!(pi.points.len(), 2);
        let merged = pi.memberships.iter().find(|m| m.len() == 2).unwrap();
        assert_eq!(merged, &vec![0, 1]);
        assert_eq!(pi.groups.len(), 3);
    }

    #[test]
    fn perturbation_distorts_tours_by_at_most_the_grid_bound() {
        let inst = random_instance(12, 11);
        let ctx = enumerate_guesses(&inst)
            .into_iter()
            .find(|c| c.kept.len() == 12)
            .unwrap();
        let pi = perturb(&inst, &ctx).unwrap();
        assert_eq!(pi.points.len(), 12);
        let mut order: Vec<usize> = (0..12).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        order.shuffle(&mut rng);
        let orig: f64 = (0..12)
            .map(|i| inst.points[order[i]].dist(&inst.points[order[(i + 1) % 12]]))
            .sum();
        // Map original index -> merged index via back lists.
        let mut to_merged = vec![0usize; 12];
        for (mi, b) in pi.back.iter().enumerate() {
            for &o in b {
                to_merged[o] = mi;
            }
        }
        let snapped: f64 = (0..12)
            .map(|i| {
                let a = pi.unit_to_point(&pi.points[to_merged[order[i]]]);
                let b = pi.unit_to_point(&pi.points[to_merged[order[(i + 1) % 12]]]);
                a.dist(&b)
            })
            .sum();
        let bound = 2.0 * 12.0 * pi.g * (2.0f64).sqrt();
        assert!(
            (orig - snapped).abs() <= bound,
            "distortion {} exceeds bound {}",
            (orig - snapped).abs(),
            bound
        );
    }

    fn tsp_pi(n: usize, seed: u64) -> (DiscreteInstance, PerturbedInstance) {
        let inst = random_instance(n, seed);
        let ctx = enumerate_guesses(&inst)
            .into_iter()
            .find(|c| c.kept.len() == n)
            .unwrap();
        let pi = perturb(&inst, &ctx).unwrap();
        (inst, pi)
    }

    #[test]
    fn quadtree_splits_down_to_single_point_leaves() {
        let (_, pi) = tsp_pi(10, 21);
        let tree = build_quadtree(&pi, &[0, 0]).unwrap();
        let mut seen = vec![0usize; pi.points.len()];
        for c in &tree.cells {
            if c.is_leaf() {
                assert!(c.points.len() <= 1);
                for &p in &c.points {
                    seen[p] += 1;
                }
            } else {
                assert_eq!(c.children.len(), 4);
            }
        }
        assert!(seen.iter().all(|&s| s == 1), "each point in exactly one leaf");
        assert_eq!((tree.cells.len() - 1) % 4, 0);
        let bound = (2 * pi.l as u64).ilog2();
        assert!(tree.height() <= bound);
        for (i, _) in pi.points.iter().enumerate() {
            let leaf = tree.leaf_of(i);
            assert!(tree.cells[leaf].is_leaf());
        }
    }

    #[test]
    fn perturb_refuses_when_a_group_is_out_of_reach() {
        let inst = inst_from(vec![vec![0.3, 0.4], vec![0.9, 0.1]], vec![vec![0], vec![1]]);
        // A hand-made context whose ball misses the second group.
        let ctx = GuessContext {
            v0_index: 0,
            v0: inst.points[0].clone(),
            r0: 0.1,
            r: 0.1,
            l0: 0.05,
            kept: vec![0],
        };
        assert!(matches!(perturb(&inst, &ctx), Err(Error::Infeasible(_))));
    }

    #[test]
    fn shifts_must_be_coarse_multiples() {
        let (_, pi) = tsp_pi(4, 2);
        assert!(build_quadtree(&pi, &[4, 0]).is_err());
        assert!(build_quadtree(&pi, &[-8, 0]).is_err());
        assert!(build_quadtree(&pi, &[pi.l, 0]).is_err());
        assert!(build_quadtree(&pi, &[pi.l - 8, 8]).is_ok());
    }

    #[test]
    fn portal_counts_match_the_grid_parameter() {
        let cell = Cell {
            level: 0,
            lo: [8, 16, 0],
            side: 8,
            parent: None,
            children: Vec::new(),
            points: Vec::new(),
        };
        let p1 = portals(&cell, 1, 2).unwrap();
        assert_eq!(p1.corners.len(), 4);
        assert_eq!(p1.count(), 8);
        let p3 = portals(&cell, 3, 2).unwrap();
        assert_eq!(p3.count(), 16);
        let cell3 = Cell {
            level: 0,
            lo: [0, 0, 0],
            side: 16,
            parent: None,
            children: Vec::new(),
            points: Vec::new(),
        };
        let q1 = portals(&cell3, 1, 3).unwrap();
        assert_eq!(q1.count(), 8 + 6);
        let q4 = portals(&cell3, 4, 3).unwrap();
        assert_eq!(q4.count(), 8 + 24);
        assert!(portals(&cell3, 2, 3).is_err());
    }

    #[test]
    fn portal_positions_are_exact_and_shared_between_siblings() {
        let (_, pi) = tsp_pi(6, 5);
        let tree = build_quadtree(&pi, &[8, 16]).unwrap();
        let root = &tree.cells[0];
        let kid0 = &tree.cells[root.children[0]];
        let kid1 = &tree.cells[root.children[1]];
        // kid0's high-x facet and kid1's low-x facet are one wall.
        let a = facet_positions(&kid0.lo, kid0.side, 2, 1, 1);
        let b = facet_positions(&kid1.lo, kid1.side, 2, 0, 1);
        assert_eq!(a, b);
        // m = 1 midpoint of a side-s facet sits at fine coordinate lo*2 + s.
        assert_eq!(a[0][0], (kid0.lo[0] + kid0.side) * 2);
        assert_eq!(a[0][1], kid0.lo[1] * 2 + kid0.side);
    }

    fn slot(facet: u8, x: i64, y: i64) -> Slot {
        Slot { facet, pos: [x, y, 0] }
    }

    #[test]
    fn leaf_cost_examples() {
        let cell = Cell {
            level: 3,
            lo: [0, 0, 0],
            side: 8,
            parent: None,
            children: Vec::new(),
            points: Vec::new(),
        };
        let fs = 2;
        // Straight pass: west midpoint to east midpoint of an 8-cell, fine units.
        let a = slot(0, 0, 8);
        let b = slot(1, 16, 8);
        let key = StateKey { state: paths_state(vec![(a, b)]), visit: false };
        let c = solve_leaf(&cell, 2, fs, &key, None).unwrap();
        assert!((c - 16.0).abs() < 1e-12);
        // Visiting a point on the segment costs nothing extra.
        let on_line = [8, 8, 0];
        let key_v = StateKey { state: paths_state(vec![(a, b)]), visit: true };
        let c2 = solve_leaf(&cell, 2, fs, &key_v, Some(on_line)).unwrap();
        assert!((c2 - 16.0).abs() < 1e-12);
        // Off-segment point: detour picks the cheaper of the two paths.
        let p = [8, 14, 0];
        let s1 = (slot(0, 0, 8), slot(1, 16, 8));
        let s2 = (slot(2, 8, 0), slot(3, 8, 16));
        let key2 = StateKey {
            state: paths_state(vec![s1, s2]),
            visit: true,
        };
        let c3 = solve_leaf(&cell, 2, fs, &key2, Some(p)).unwrap();
        let d1 = fdist(&[0, 8, 0], &p) + fdist(&p, &[16, 8, 0]) - 16.0;
        let d2 = fdist(&[8, 0, 0], &p) + fdist(&p, &[8, 16, 0]) - 16.0;
        assert!((c3 - (32.0 + d1.min(d2))).abs() < 1e-12);
        // Visit bit with no point is a caller error.
        assert!(solve_leaf(&cell, 2, fs, &key_v, None).is_err());
        // Visit bit with no paths is infeasible.
        let idle = StateKey { state: CellState::Idle, visit: true };
        assert!(solve_leaf(&cell, 2, fs, &idle, Some(p)).is_err());
        // A loop parked on the point is free.
        let lp = StateKey { state: CellState::Loop, visit: true };
        let (lc, lp_paths) = leaf_paths(&cell, 2, fs, &lp, Some(p)).unwrap();
        assert_eq!(lc, 0.0);
        assert_eq!(lp_paths, vec![vec![p]]);
    }

    #[test]
    fn boundary_riding_pairs_are_rejected_unless_detoured() {
        let cell = Cell {
            level: 3,
            lo: [0, 0, 0],
            side: 8,
            parent: None,
            children: Vec::new(),
            points: Vec::new(),
        };
        let fs = 2;
        // Both endpoints on the south boundary plane y = 0.
        let a = slot(2, 4, 0);
        let b = slot(2, 12, 0);
        let key = StateKey { state: paths_state(vec![(a, b)]), visit: false };
        assert!(matches!(
            solve_leaf(&cell, 2, fs, &key, None),
            Err(Error::Infeasible(_))
        ));
        // With a point to visit, the pair must host the detour and is legal.
        let key_v = StateKey { state: paths_state(vec![(a, b)]), visit: true };
        let p = [8, 10, 0];
        let (c, paths) = leaf_paths(&cell, 2, fs, &key_v, Some(p)).unwrap();
        assert_eq!(paths[0], vec![[4, 0, 0], p, [12, 0, 0]]);
        assert!((c - (fdist(&[4, 0, 0], &p) + fdist(&p, &[12, 0, 0]))).abs() < 1e-12);
    }

    #[test]
    fn combination_enumeration_routes_a_loop_through_two_children() {
        let inst = inst_from(
            vec![vec![0.1, 0.5], vec![0.9, 0.5]],
            vec![vec![0], vec![1]],
        );
        let ctx = enumerate_guesses(&inst)
            .into_iter()
            .find(|c| c.kept.len() == 2)
            .unwrap();
        let pi = perturb(&inst, &ctx).unwrap();
        let tree = build_quadtree(&pi, &[0, 0]).unwrap();
        let cfg = DpConfig::for_dim(2);
        // Find the lowest cell separating the two points.
        let mut cell = 0usize;
        loop {
            let c = &tree.cells[cell];
            if c.is_leaf() {
                panic!("points were never separated");
            }
            match c
                .children
                .iter()
                .find(|&&k| tree.cells[k].points.len() == 2)
            {
                Some(&k) => cell = k,
                None => break,
            }
        }
        let combos = enumerate_combinations(&tree, cell, &CellState::Loop, &cfg, true).unwrap();
        assert!(!combos.is_empty());
        // No delegate option exists (points straddle children), so every combo
        // assigns paths to at least two children and leaves none occupied-idle.
        for combo in &combos {
            let active = combo
                .iter()
                .filter(|s| matches!(s, CellState::Paths(_)))
                .count();
            assert!(active >= 2);
            for (s, &kid) in combo.iter().zip(&tree.cells[cell].children) {
                if matches!(s, CellState::Idle) {
                    assert!(tree.cells[kid].points.is_empty());
                }
            }
        }
    }

    #[test]
    fn combination_enumeration_is_deterministic() {
        let (_, pi) = tsp_pi(5, 9);
        let tree = build_quadtree(&pi, &[16, 8]).unwrap();
        let cfg = DpConfig::for_dim(2);
        let a = enumerate_combinations(&tree, 0, &CellState::Loop, &cfg, true).unwrap();
        let b = enumerate_combinations(&tree, 0, &CellState::Loop, &cfg, true).unwrap();
        assert_eq!(a, b);
    }
}
