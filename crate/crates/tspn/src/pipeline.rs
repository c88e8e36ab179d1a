//! End-to-end solver runs: guess enumeration, shifted dissections, the
//! covering relaxation with rounding, tour stitching, and oracle comparison.

use std::collections::HashSet;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dpgraph::{build_dag, tree_to_tour};
use crate::error::{Error, Result};
use crate::geometry::{dist_point_line, Tour};
use crate::instance::{discretize_lines, DiscreteInstance, DiscretizeScheme, LineInstance};
use crate::oracle::{exact_line_tspn, held_karp_groups};
use crate::quadtree::{
    build_quadtree, dp_tsp, enumerate_guesses, perturb, random_shift, DpConfig, GuessContext,
};
use crate::report::Report;
use crate::stgst::{solve_stgst, StgstInstance};

/// Knobs for a full solver run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Interior portals per facet axis.
    pub m: usize,
    /// Crossing cap per facet.
    pub r: usize,
    /// Dissection shifts sampled per guess.
    pub shifts: usize,
    /// Rounding sample multiplier.
    pub c: f64,
    /// Master seed; every random choice below derives from it.
    pub seed: u64,
    /// Node cap per solution graph.
    pub node_budget: usize,
    /// Cap on the number of guesses tried.
    pub max_guesses: Option<usize>,
    /// Compare against an exact oracle when the instance is small enough.
    pub oracle: bool,
    /// Output path hint for callers that write files; unused here.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            m: 1,
            r: 2,
            shifts: 16,
            c: 4.0,
            seed: 0,
            node_budget: 5_000_000,
            max_guesses: None,
            oracle: true,
            out: None,
        }
    }
}

/// Outcome of one (guess, shift) cell.
#[derive(Clone, Debug)]
pub struct CellRecord {
    pub guess: usize,
    pub shift_index: usize,
    /// Dissection shift actually used, in grid units, zero-padded to 3 axes.
    pub shift: [i64; 3],
    pub nodes: usize,
    pub edges: usize,
    pub lp_objective: f64,
    pub samples: usize,
    pub mean_sample_cost: f64,
    /// Groups no sample visited, patched in afterwards.
    pub detours: usize,
    /// Candidate tour cost in original coordinates; infinite when the cell failed.
    pub cost: f64,
    /// Why the cell produced no candidate, when it did not.
    pub note: Option<String>,
}

impl CellRecord {
    fn blank(guess: usize, shift_index: usize) -> CellRecord {
        CellRecord {
            guess,
            shift_index,
            shift: [0; 3],
            nodes: 0,
            edges: 0,
            lp_objective: 0.0,
            samples: 0,
            mean_sample_cost: 0.0,
            detours: 0,
            cost: f64::INFINITY,
            note: None,
        }
    }
}

/// Full account of a solver run.
#[derive(Clone, Debug)]
pub struct RunReport {
    /// One record per cell, ordered by (guess, shift).
    pub cells: Vec<CellRecord>,
    /// Cheapest feasible tour found, in original coordinates.
    pub tour: Tour,
    pub cost: f64,
    pub best_guess: usize,
    pub best_shift: usize,
    pub oracle_cost: Option<f64>,
    pub oracle_method: Option<&'static str>,
    /// cost / oracle cost when the oracle ran.
    pub ratio: Option<f64>,
}

impl RunReport {
    /// Flattens the run into a key = value report.
    pub fn sidecar(&self, cfg: &RunConfig) -> Report {
        let mut r = Report::new();
        r.put("config.m", cfg.m);
        r.put("config.r", cfg.r);
        r.put("config.shifts", cfg.shifts);
        r.put_f64("config.c", cfg.c);
        r.put("config.seed", cfg.seed);
        r.put("config.budget", cfg.node_budget);
        r.put("cells", self.cells.len());
        for c in &self.cells {
            r.put(
                "cell",
                format!(
                    "{} {} {},{},{} {} {} {:.17e} {} {:.17e} {} {:.17e}",
                    c.guess,
                    c.shift_index,
                    c.shift[0],
                    c.shift[1],
                    c.shift[2],
                    c.nodes,
                    c.edges,
                    c.lp_objective,
                    c.samples,
                    c.mean_sample_cost,
                    c.detours,
                    c.cost
                ),
            );
            if let Some(note) = &c.note {
                r.put("cell.note", format!("{} {} {}", c.guess, c.shift_index, note));
            }
        }
        r.put("best.guess", self.best_guess);
        r.put("best.shift", self.best_shift);
        r.put_f64("best.cost", self.cost);
        r.put("tour.waypoints", self.tour.len());
        if let Some(oc) = self.oracle_cost {
            r.put_f64("oracle.cost", oc);
        }
        if let Some(m) = self.oracle_method {
            r.put("oracle.method", m);
        }
        if let Some(rt) = self.ratio {
            r.put_f64("ratio", rt);
        }
        r
    }
}

/// Splitmix-style derivation of independent seeds from the master seed.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn same_waypoints(a: &Tour, b: &Tour) -> bool {
    a.waypoints.len() == b.waypoints.len()
        && a.waypoints
            .iter()
            .zip(&b.waypoints)
            .all(|(p, q)| p.coords == q.coords)
}

fn ratio_of(cost: f64, oracle: f64) -> Option<f64> {
    if oracle > 1e-12 {
        Some(cost / oracle)
    } else if cost <= 1e-9 {
        Some(1.0)
    } else {
        None
    }
}

/// Merges tours into one and patches in the groups none of them visited.
///
/// Tours are joined greedily at their closest waypoint pair, so the merged
/// cost is at most the sum of the tour costs plus twice the weight of a
/// minimum spanning tree over the tour components. Each uncovered group is
/// then served by its globally closest (waypoint, member point) pair, an
/// insertion costing at most twice that distance.
pub fn stitch_and_detour(
    tours: &[Tour],
    inst: &DiscreteInstance,
    uncovered: &[usize],
) -> Result<Tour> {
    if tours.is_empty() {
        return Err(Error::EmptyTour);
    }
    for t in tours {
        if t.dim() != inst.dim {
            return Err(Error::DimensionMismatch {
                expected: inst.dim,
                got: t.dim(),
            });
        }
    }
    let mut merged: Vec<(crate::geometry::Point, Option<usize>)> = tours[0]
        .waypoints
        .iter()
        .cloned()
        .zip(tours[0].meta.iter().copied())
        .collect();
    let mut rest: Vec<usize> = (1..tours.len()).collect();
    while !rest.is_empty() {
        // Closest (merged waypoint, remaining tour waypoint) pair, first minimal.
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for (pos, &ti) in rest.iter().enumerate() {
            for (b, wb) in tours[ti].waypoints.iter().enumerate() {
                for (a, (wa, _)) in merged.iter().enumerate() {
                    let d = wa.dist(wb);
                    if best.map_or(true, |(bd, ..)| d < bd) {
                        best = Some((d, a, pos, b));
                    }
                }
            }
        }
        let (_, a, pos, b) = best.expect("tours are non-empty");
        let ti = rest.remove(pos);
        let t = &tours[ti];
        let n = t.waypoints.len();
        // Rotate the joined tour to start at its closest waypoint and splice
        // it in right after ours; the two new hops cost at most 2 d(a, b).
        let rotated: Vec<_> = (0..n)
            .map(|k| {
                let i = (b + k) % n;
                (t.waypoints[i].clone(), t.meta[i])
            })
            .collect();
        merged.splice(a + 1..a + 1, rotated);
    }
    // Patch uncovered groups, cheapest pair first; one insertion may cover
    // several groups at once.
    let mut done: HashSet<usize> = HashSet::new();
    for &g in uncovered {
        if done.contains(&g) {
            continue;
        }
        if g >= inst.n() {
            return Err(Error::InvalidParameter(format!(
                "uncovered group {g} is out of range"
            )));
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for &pid in &inst.groups[g] {
            for (a, (w, _)) in merged.iter().enumerate() {
                let d = w.dist(&inst.points[pid]);
                if best.map_or(true, |(bd, ..)| d < bd) {
                    best = Some((d, a, pid));
                }
            }
        }
        let (_, a, pid) = best.expect("groups are non-empty");
        merged.insert(a + 1, (inst.points[pid].clone(), Some(pid)));
        done.extend(inst.memberships[pid].iter().copied());
    }
    // Drop zero-length hops, keeping whichever copy carries a point label.
    let mut i = 0;
    while i + 1 < merged.len() {
        if merged[i].0.coords == merged[i + 1].0.coords {
            if merged[i].1.is_none() {
                merged[i].1 = merged[i + 1].1;
            }
            merged.remove(i + 1);
        } else {
            i += 1;
        }
    }
    while merged.len() > 1 && merged[0].0.coords == merged.last().expect("non-empty").0.coords {
        let last = merged.pop().expect("non-empty");
        if merged[0].1.is_none() {
            merged[0].1 = last.1;
        }
    }
    let (waypoints, meta): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
    Tour::with_meta(waypoints, meta)
}

/// Runs one (guess, shift) cell, filling `rec` as far as it gets.
fn cell_attempt(
    inst: &DiscreteInstance,
    ctx: &GuessContext,
    cfg: &RunConfig,
    dpcfg: &DpConfig,
    cell_seed: u64,
    rec: &mut CellRecord,
) -> Result<Tour> {
    let pi = perturb(inst, ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cell_seed, 1));
    let shift = random_shift(pi.l, pi.dim, &mut rng);
    for (i, s) in shift.iter().enumerate() {
        rec.shift[i] = *s;
    }
    let tree = build_quadtree(&pi, &shift)?;
    let dag = build_dag(&pi, &tree, dpcfg, false)?;
    rec.nodes = dag.nodes.len();
    rec.edges = dag.edges.len();
    let sg = StgstInstance::new(&dag)?;
    let rr = solve_stgst(&sg, cfg.c, derive_seed(cell_seed, 2))?;
    rec.lp_objective = rr.lp.objective;
    rec.samples = rr.trees.len();
    rec.mean_sample_cost = rr.mean_cost;
    let mut covered = vec![false; inst.n()];
    let mut tours: Vec<Tour> = Vec::new();
    for t in &rr.trees {
        let (mut tour, visited) = tree_to_tour(t, &dag)?;
        // Snap labelled waypoints back to the exact instance points; the
        // perturbed grid moved each by at most half a grid cell.
        for i in 0..tour.waypoints.len() {
            if let Some(pid) = tour.meta[i] {
                tour.waypoints[i] = inst.points[pid].clone();
            }
        }
        for &pid in &visited {
            for &g in &inst.memberships[pid] {
                covered[g] = true;
            }
        }
        if !tours.iter().any(|u| same_waypoints(u, &tour)) {
            tours.push(tour);
        }
    }
    let uncovered: Vec<usize> = (0..inst.n()).filter(|&g| !covered[g]).collect();
    rec.detours = uncovered.len();
    let cand = stitch_and_detour(&tours, inst, &uncovered)?;
    inst.verify_tour(&cand, 1e-9)?;
    Ok(cand)
}

fn run_cell(
    inst: &DiscreteInstance,
    ctx: &GuessContext,
    gi: usize,
    si: usize,
    cfg: &RunConfig,
    dpcfg: &DpConfig,
) -> (CellRecord, Option<Tour>) {
    let mut rec = CellRecord::blank(gi, si);
    let cell_seed = derive_seed(cfg.seed, ((gi as u64) << 32) | si as u64);
    match cell_attempt(inst, ctx, cfg, dpcfg, cell_seed, &mut rec) {
        Ok(t) => {
            rec.cost = t.cost();
            (rec, Some(t))
        }
        Err(e) => {
            rec.note = Some(e.to_string());
            (rec, None)
        }
    }
}

fn check_config(cfg: &RunConfig) -> Result<()> {
    if cfg.m < 1 || cfg.r < 1 || cfg.shifts < 1 || cfg.node_budget < 1 {
        return Err(Error::InvalidParameter(
            "m, r, shifts, and the node budget must all be at least 1".into(),
        ));
    }
    if !(cfg.c > 0.0) {
        return Err(Error::InvalidParameter(
            "the sample multiplier c must be positive".into(),
        ));
    }
    Ok(())
}

/// Solves a discrete instance: tries every guess, samples shifted
/// dissections in parallel, and keeps the cheapest feasible tour.
pub fn run_tspn(inst: &DiscreteInstance, cfg: &RunConfig) -> Result<RunReport> {
    check_config(cfg)?;
    let mut dpcfg = DpConfig::for_dim(inst.dim);
    if cfg.r > dpcfg.r {
        // Keep the per-cell cap proportional to the per-facet cap.
        dpcfg.max_cell_crossings = (dpcfg.max_cell_crossings * cfg.r).div_ceil(dpcfg.r);
    }
    dpcfg.m = cfg.m;
    dpcfg.r = cfg.r;
    dpcfg.node_budget = cfg.node_budget;
    let mut guesses = enumerate_guesses(inst);
    if let Some(cap) = cfg.max_guesses {
        guesses.truncate(cap);
    }
    let mut cells: Vec<CellRecord> = Vec::new();
    let mut best: Option<(f64, usize, usize, Tour)> = None;
    for (gi, ctx) in guesses.iter().enumerate() {
        // Any tour anchored at this guess must reach its farthest group and
        // come back, so 2 r0 lower-bounds every candidate the guess can give.
        if let Some((bc, ..)) = &best {
            if 2.0 * ctx.r0 > *bc + 1e-12 {
                let mut rec = CellRecord::blank(gi, 0);
                rec.note = Some("pruned: twice the guess radius exceeds the best cost".into());
                cells.push(rec);
                continue;
            }
        }
        if ctx.r == 0.0 {
            // The anchor point touches every group; the one-point tour is free.
            let tour = Tour::with_meta(vec![ctx.v0.clone()], vec![Some(ctx.v0_index)])?;
            let mut rec = CellRecord::blank(gi, 0);
            rec.cost = 0.0;
            rec.samples = 1;
            cells.push(rec);
            if best.as_ref().map_or(true, |(bc, ..)| 0.0 < *bc) {
                best = Some((0.0, gi, 0, tour));
            }
            continue;
        }
        let outcomes: Vec<(CellRecord, Option<Tour>)> = (0..cfg.shifts)
            .into_par_iter()
            .map(|si| run_cell(inst, ctx, gi, si, cfg, &dpcfg))
            .collect();
        for (rec, cand) in outcomes {
            if let Some(t) = cand {
                if best.as_ref().map_or(true, |(bc, ..)| rec.cost < *bc) {
                    best = Some((rec.cost, gi, rec.shift_index, t));
                }
            }
            cells.push(rec);
        }
    }
    let Some((cost, best_guess, best_shift, tour)) = best else {
        let why = cells
            .iter()
            .find_map(|c| c.note.clone())
            .unwrap_or_else(|| "no guesses were available".into());
        return Err(Error::Infeasible(format!(
            "every guess and shift failed to produce a tour ({why})"
        )));
    };
    let mut report = RunReport {
        cells,
        tour,
        cost,
        best_guess,
        best_shift,
        oracle_cost: None,
        oracle_method: None,
        ratio: None,
    };
    if cfg.oracle {
        if let Ok(o) = held_karp_groups(inst) {
            report.ratio = ratio_of(report.cost, o.cost);
            report.oracle_cost = Some(o.cost);
            report.oracle_method = Some(o.method);
        }
    }
    Ok(report)
}

/// One forced-visit shift cell: dissect, run the point DP, snap back.
fn point_cell(
    forced: &DiscreteInstance,
    ctx: &GuessContext,
    dpcfg: &DpConfig,
    cell_seed: u64,
    rec: &mut CellRecord,
) -> Result<Tour> {
    let pi = perturb(forced, ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cell_seed, 1));
    let shift = random_shift(pi.l, pi.dim, &mut rng);
    for (i, s) in shift.iter().enumerate() {
        rec.shift[i] = *s;
    }
    let tree = build_quadtree(&pi, &shift)?;
    let mut tour = dp_tsp(&pi, &tree, dpcfg)?;
    for i in 0..tour.waypoints.len() {
        if let Some(pid) = tour.meta[i] {
            tour.waypoints[i] = forced.points[pid].clone();
        }
    }
    forced.verify_tour(&tour, 1e-9)?;
    rec.samples = 1;
    Ok(tour)
}

/// Point TSP over all instance points: every point must be visited. Runs the
/// forced dynamic program once per shift and keeps the cheapest tour.
pub fn run_point_tsp(inst: &DiscreteInstance, cfg: &RunConfig) -> Result<RunReport> {
    check_config(cfg)?;
    // Re-group every point as its own mandatory singleton neighborhood.
    let singles: Vec<Vec<crate::geometry::Point>> =
        inst.points.iter().map(|p| vec![p.clone()]).collect();
    let forced = DiscreteInstance::new(inst.dim, singles)?;
    if forced.points.len() == 1 {
        let tour = Tour::with_meta(vec![forced.points[0].clone()], vec![Some(0)])?;
        return Ok(RunReport {
            cells: Vec::new(),
            cost: 0.0,
            tour,
            best_guess: 0,
            best_shift: 0,
            oracle_cost: Some(0.0),
            oracle_method: Some("held_karp_groups"),
            ratio: Some(1.0),
        });
    }
    let mut dpcfg = DpConfig::for_dim(inst.dim);
    if cfg.r > dpcfg.r {
        dpcfg.max_cell_crossings = (dpcfg.max_cell_crossings * cfg.r).div_ceil(dpcfg.r);
    }
    dpcfg.m = cfg.m;
    dpcfg.r = cfg.r;
    dpcfg.node_budget = cfg.node_budget;
    // The smallest guess radius that keeps every point inside the dissection.
    let guesses = enumerate_guesses(&forced);
    let Some((gi, ctx)) = guesses
        .iter()
        .enumerate()
        .find(|(_, c)| c.r > 0.0 && c.kept.len() == forced.points.len())
    else {
        return Err(Error::Infeasible(
            "no guess keeps every point inside the dissection".into(),
        ));
    };
    let outcomes: Vec<(CellRecord, Option<Tour>)> = (0..cfg.shifts)
        .into_par_iter()
        .map(|si| {
            let mut rec = CellRecord::blank(gi, si);
            let cell_seed = derive_seed(cfg.seed, ((gi as u64) << 32) | si as u64);
            match point_cell(&forced, ctx, &dpcfg, cell_seed, &mut rec) {
                Ok(t) => {
                    rec.cost = t.cost();
                    (rec, Some(t))
                }
                Err(e) => {
                    rec.note = Some(e.to_string());
                    (rec, None)
                }
            }
        })
        .collect();
    let mut cells = Vec::new();
    let mut best: Option<(f64, usize, Tour)> = None;
    for (rec, cand) in outcomes {
        if let Some(t) = cand {
            if best.as_ref().map_or(true, |(bc, ..)| rec.cost < *bc) {
                best = Some((rec.cost, rec.shift_index, t));
            }
        }
        cells.push(rec);
    }
    let Some((cost, best_shift, tour)) = best else {
        let why = cells
            .iter()
            .find_map(|c| c.note.clone())
            .unwrap_or_else(|| "no shifts were tried".into());
        return Err(Error::Infeasible(format!(
            "every shift failed to produce a point tour ({why})"
        )));
    };
    let mut report = RunReport {
        cells,
        tour,
        cost,
        best_guess: gi,
        best_shift,
        oracle_cost: None,
        oracle_method: None,
        ratio: None,
    };
    if cfg.oracle {
        if let Ok(o) = held_karp_groups(&forced) {
            report.ratio = ratio_of(report.cost, o.cost);
            report.oracle_cost = Some(o.cost);
            report.oracle_method = Some(o.method);
        }
    }
    Ok(report)
}

/// Solves a line instance by discretizing, solving the discrete instance,
/// and re-checking every line against the waypoints actually visited.
pub fn run_line_tspn(inst: &LineInstance, cfg: &RunConfig) -> Result<RunReport> {
    check_config(cfg)?;
    if inst.lines.len() == 1 {
        // A single line is served by standing on it.
        let tour = Tour::new(vec![inst.lines[0].base.clone()])?;
        return Ok(RunReport {
            cells: Vec::new(),
            cost: 0.0,
            tour,
            best_guess: 0,
            best_shift: 0,
            oracle_cost: None,
            oracle_method: None,
            ratio: None,
        });
    }
    let di = discretize_lines(inst, DiscretizeScheme::ClosestPairs)?;
    let inner = RunConfig {
        oracle: false,
        ..cfg.clone()
    };
    let mut report = run_tspn(&di, &inner)?;
    // The discrete groups are only proxies; check the real lines.
    let tol = 1e-6;
    for (i, line) in inst.lines.iter().enumerate() {
        let mut dmin = f64::INFINITY;
        for w in &report.tour.waypoints {
            dmin = dmin.min(dist_point_line(w, line)?);
        }
        if dmin > tol {
            return Err(Error::GroupMissed {
                group: i,
                dist: dmin,
                tol,
            });
        }
    }
    if cfg.oracle {
        if let Ok(o) = exact_line_tspn(inst) {
            report.ratio = ratio_of(report.cost, o.cost);
            report.oracle_cost = Some(o.cost);
            report.oracle_method = Some(o.method);
        }
    }
    Ok(report)
}
