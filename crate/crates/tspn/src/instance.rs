//! Instance models: line neighborhoods, discrete (point set) neighborhoods,
//! flat neighborhoods, the line-to-discrete conversion, flat lifting, and
//! the text file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{self, closest_params, Line, Point, Tour};

/// TSPN instance whose neighborhoods are lines; ids are list positions.
#[derive(Clone, Debug)]
pub struct LineInstance {
    pub dim: usize,
    pub lines: Vec<Line>,
}

impl LineInstance {
    pub fn new(dim: usize, lines: Vec<Line>) -> Result<LineInstance> {
        for l in &lines {
            if l.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: l.dim(),
                });
            }
        }
        Ok(LineInstance { dim, lines })
    }

    pub fn n(&self) -> usize {
        self.lines.len()
    }
}

/// Discrete TSPN instance: n neighborhoods over a deduplicated point union.
///
/// `points` is the union P; `memberships[p]` lists the neighborhoods that
/// contain point p (sorted); `groups[i]` lists the points of neighborhood i.
#[derive(Clone, Debug)]
pub struct DiscreteInstance {
    pub dim: usize,
    pub points: Vec<Point>,
    pub memberships: Vec<Vec<usize>>,
    pub groups: Vec<Vec<usize>>,
}

impl DiscreteInstance {
    /// Builds the union with 1e-9 deduplication; coincident points merge and
    /// carry every membership.
    pub fn new(dim: usize, neighborhoods: Vec<Vec<Point>>) -> Result<DiscreteInstance> {
        if neighborhoods.is_empty() {
            return Err(Error::EmptyInstance);
        }
        let mut points: Vec<Point> = Vec::new();
        let mut memberships: Vec<Vec<usize>> = Vec::new();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); neighborhoods.len()];
        for (gi, nb) in neighborhoods.iter().enumerate() {
            if nb.is_empty() {
                return Err(Error::InvalidParameter(format!("empty group {gi}")));
            }
            for p in nb {
                if p.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: p.dim(),
                    });
                }
                let found = points.iter().position(|q| q.dist(p) <= geometry::GEOM_EPS);
                let idx = match found {
                    Some(idx) => idx,
                    None => {
                        points.push(p.clone());
                        memberships.push(Vec::new());
                        points.len() - 1
                    }
                };
                if !memberships[idx].contains(&gi) {
                    memberships[idx].push(gi);
                }
                if !groups[gi].contains(&idx) {
                    groups[gi].push(idx);
                }
            }
        }
        for m in &mut memberships {
            m.sort_unstable();
        }
        Ok(DiscreteInstance {
            dim,
            points,
            memberships,
            groups,
        })
    }

    /// Number of neighborhoods.
    pub fn n(&self) -> usize {
        self.groups.len()
    }

    /// Size of the deduplicated union.
    pub fn size(&self) -> usize {
        self.points.len()
    }

    /// Checks that every neighborhood has a waypoint within `tol` of one of
    /// its points; reports the first miss.
    pub fn verify_tour(&self, tour: &Tour, tol: f64) -> Result<()> {
        for (gi, group) in self.groups.iter().enumerate() {
            let mut best = f64::INFINITY;
            for &pi in group {
                for w in &tour.waypoints {
                    let d = w.dist(&self.points[pi]);
                    if d < best {
                        best = d;
                    }
                }
            }
            if best > tol {
                return Err(Error::GroupMissed {
                    group: gi,
                    dist: best,
                    tol,
                });
            }
        }
        Ok(())
    }
}

/// A k-flat: base point plus an orthonormal basis of k directions.
#[derive(Clone, Debug)]
pub struct Flat {
    pub base: Point,
    pub basis: Vec<Vec<f64>>,
}

impl Flat {
    /// Distance from a point to the flat (project onto the basis, measure
    /// the residual).
    pub fn dist_point(&self, p: &Point) -> f64 {
        let mut w = geometry::sub(&p.coords, &self.base.coords);
        for b in &self.basis {
            let t = geometry::dot(&w, b);
            w = geometry::axpy(&w, -t, b);
        }
        geometry::norm(&w)
    }
}

/// TSPN instance with k-flat neighborhoods.
#[derive(Clone, Debug)]
pub struct FlatInstance {
    pub dim: usize,
    pub flats: Vec<Flat>,
}

impl FlatInstance {
    pub fn new(dim: usize, flats: Vec<Flat>) -> Result<FlatInstance> {
        for f in &flats {
            if f.base.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.base.dim(),
                });
            }
            let k = f.basis.len();
            if k == 0 || k > dim.saturating_sub(2) {
                return Err(Error::InvalidParameter(format!(
                    "flat dimension {k} not in 1..={}",
                    dim.saturating_sub(2)
                )));
            }
            for (i, bi) in f.basis.iter().enumerate() {
                if bi.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: bi.len(),
                    });
                }
                if (geometry::norm(bi) - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter("flat basis not unit length".into()));
                }
                for bj in &f.basis[..i] {
                    if geometry::dot(bi, bj).abs() > 1e-9 {
                        return Err(Error::InvalidParameter("flat basis not orthogonal".into()));
                    }
                }
            }
        }
        Ok(FlatInstance { dim, flats })
    }
}

/// How line neighborhoods are turned into candidate point sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscretizeScheme {
    /// For every ordered pair (i, j) emit the point of line i closest to
    /// line j, plus each line's closest point to the centroid of all those
    /// pairwise points. N <= n^2.
    ClosestPairs,
}

/// Converts a line instance into a discrete one; every emitted point lies
/// exactly on its line.
pub fn discretize_lines(
    inst: &LineInstance,
    scheme: DiscretizeScheme,
) -> Result<DiscreteInstance> {
    if inst.lines.len() < 2 {
        return Err(Error::InvalidParameter(
            "discretization needs at least 2 lines".into(),
        ));
    }
    match scheme {
        DiscretizeScheme::ClosestPairs => {
            let n = inst.lines.len();
            let mut params: Vec<Vec<f64>> = vec![Vec::new(); n];
            let mut centroid = vec![0.0; inst.dim];
            let mut count = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (s, _) = closest_params(&inst.lines[i], &inst.lines[j])?;
                    params[i].push(s);
                    let p = inst.lines[i].at(s);
                    centroid = geometry::add(&centroid, &p.coords);
                    count += 1.0;
                }
            }
            centroid = geometry::scale(&centroid, 1.0 / count);
            let c = Point::new(centroid)?;
            let mut neighborhoods = Vec::with_capacity(n);
            for i in 0..n {
                let mut pts: Vec<Point> = params[i].iter().map(|&s| inst.lines[i].at(s)).collect();
                pts.push(inst.lines[i].at(inst.lines[i].project(&c)));
                neighborhoods.push(pts);
            }
            DiscreteInstance::new(inst.dim, neighborhoods)
        }
    }
}

/// Lifts every line of a 3-d instance to a k-flat in R^d whose projection
/// to the first 3 coordinates is the original line.
pub fn lift_to_flats(inst: &LineInstance, k: usize, d: usize) -> Result<FlatInstance> {
    if inst.dim != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: inst.dim,
        });
    }
    if k < 1 || d < k + 2 {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= k <= d - 2, got k = {k}, d = {d}"
        )));
    }
    let mut flats = Vec::with_capacity(inst.lines.len());
    for l in &inst.lines {
        let mut base = l.base.coords.clone();
        base.resize(d, 0.0);
        let mut dir = l.dir.clone();
        dir.resize(d, 0.0);
        let mut basis = vec![dir];
        // extra axes live outside the first 3 coordinates, so they stay
        // orthonormal to the padded line direction
        for extra in 0..k - 1 {
            let mut e = vec![0.0; d];
            e[3 + extra] = 1.0;
            basis.push(e);
        }
        flats.push(Flat {
            base: Point::new(base)?,
            basis,
        });
    }
    FlatInstance::new(d, flats)
}

/// Coordinate projection of a tour onto the first `to_dim` coordinates.
pub fn project_tour(t: &Tour, to_dim: usize) -> Result<Tour> {
    if to_dim < 2 || to_dim > t.dim() {
        return Err(Error::InvalidParameter(format!(
            "cannot project a {}-d tour to {to_dim} dimensions",
            t.dim()
        )));
    }
    let waypoints = t
        .waypoints
        .iter()
        .map(|w| Point::new(w.coords[..to_dim].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Tour::with_meta(waypoints, t.meta.clone())
}

/// Any instance kind the text format can hold.
#[derive(Clone, Debug)]
pub enum Instance {
    Lines(LineInstance),
    Discrete(DiscreteInstance),
    Flats(FlatInstance),
}

fn fmt_coords(out: &mut String, coords: &[f64]) {
    for c in coords {
        let _ = write!(out, " {c:.17e}");
    }
}

/// Serializes an instance in the line-oriented text format.
pub fn format_instance(inst: &Instance) -> String {
    let mut out = String::new();
    match inst {
        Instance::Lines(li) => {
            let _ = writeln!(out, "TSPN LINES 1");
            let _ = writeln!(out, "dim {}", li.dim);
            for (id, l) in li.lines.iter().enumerate() {
                let mut row = format!("line {id}");
                fmt_coords(&mut row, &l.base.coords);
                fmt_coords(&mut row, &l.dir);
                let _ = writeln!(out, "{row}");
            }
        }
        Instance::Discrete(di) => {
            let _ = writeln!(out, "TSPN DISCRETE 1");
            let _ = writeln!(out, "dim {}", di.dim);
            for (gi, group) in di.groups.iter().enumerate() {
                let _ = writeln!(out, "group {gi} {}", group.len());
                for &pi in group {
                    let mut row = String::new();
                    fmt_coords(&mut row, &di.points[pi].coords);
                    let _ = writeln!(out, "{}", row.trim_start());
                }
            }
        }
        Instance::Flats(fi) => {
            let _ = writeln!(out, "TSPN FLATS 1");
            let _ = writeln!(out, "dim {}", fi.dim);
            for (id, f) in fi.flats.iter().enumerate() {
                let _ = writeln!(out, "flat {id} {}", f.basis.len());
                let mut row = String::new();
                fmt_coords(&mut row, &f.base.coords);
                let _ = writeln!(out, "{}", row.trim_start());
                for b in &f.basis {
                    let mut row = String::new();
                    fmt_coords(&mut row, b);
                    let _ = writeln!(out, "{}", row.trim_start());
                }
            }
        }
    }
    out
}

/// Writes an instance file.
pub fn write_instance(inst: &Instance, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_instance(inst))?;
    Ok(())
}

struct Parser<'a> {
    path: String,
    lines: Vec<(usize, &'a str)>, // (1-based line number, content)
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(path: &str, text: &'a str) -> Parser<'a> {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, raw)| {
                let content = match raw.find('#') {
                    Some(h) => &raw[..h],
                    None => raw,
                };
                (i + 1, content.trim())
            })
            .filter(|(_, c)| !c.is_empty())
            .collect();
        Parser {
            path: path.to_string(),
            lines,
            pos: 0,
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let last = self.lines.last().map_or(0, |(n, _)| *n);
        let item = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(last + 1, format!("unexpected end of file, expected {what}")))?;
        self.pos += 1;
        Ok(item)
    }

    fn coords(&self, line: usize, tokens: &[&str], dim: usize) -> Result<Vec<f64>> {
        if tokens.len() != dim {
            return Err(self.err(line, format!("expected {dim} coordinates, got {}", tokens.len())));
        }
        tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| self.err(line, format!("non-numeric token '{t}'")))
            })
            .collect()
    }
}

/// Parses the text format; the header decides which instance kind returns.
pub fn parse_instance(path: &str, text: &str) -> Result<Instance> {
    let mut p = Parser::new(path, text);
    let (hline, header) = p.next("header")?;
    let htok: Vec<&str> = header.split_whitespace().collect();
    if htok.len() != 3 || htok[0] != "TSPN" {
        return Err(p.err(hline, "malformed header, expected 'TSPN <KIND> <version>'"));
    }
    if htok[2] != "1" {
        return Err(p.err(hline, format!("unsupported version '{}'", htok[2])));
    }
    let kind = htok[1];
    let (dline, dim_row) = p.next("dim")?;
    let dtok: Vec<&str> = dim_row.split_whitespace().collect();
    if dtok.len() != 2 || dtok[0] != "dim" {
        return Err(p.err(dline, "expected 'dim <d>'"));
    }
    let dim: usize = dtok[1]
        .parse()
        .map_err(|_| p.err(dline, format!("non-numeric dimension '{}'", dtok[1])))?;
    if dim < 2 {
        return Err(p.err(dline, format!("dimension {dim} is below 2")));
    }
    match kind {
        "LINES" => {
            let mut lines = Vec::new();
            while p.pos < p.lines.len() {
                let (ln, row) = p.next("line row")?;
                let tok: Vec<&str> = row.split_whitespace().collect();
                if tok.first() != Some(&"line") || tok.len() != 2 + 2 * dim {
                    return Err(p.err(ln, "expected 'line <id> <base> <dir>'"));
                }
                let base = p.coords(ln, &tok[2..2 + dim], dim)?;
                let dir = p.coords(ln, &tok[2 + dim..], dim)?;
                lines.push(
                    Line::new(Point::new(base)?, dir)
                        .map_err(|e| p.err(ln, e.to_string()))?,
                );
            }
            Ok(Instance::Lines(LineInstance::new(dim, lines)?))
        }
        "DISCRETE" => {
            let mut neighborhoods = Vec::new();
            while p.pos < p.lines.len() {
                let (ln, row) = p.next("group row")?;
                let tok: Vec<&str> = row.split_whitespace().collect();
                if tok.first() != Some(&"group") || tok.len() != 3 {
                    return Err(p.err(ln, "expected 'group <id> <count>'"));
                }
                let count: usize = tok[2]
                    .parse()
                    .map_err(|_| p.err(ln, format!("non-numeric count '{}'", tok[2])))?;
                if count == 0 {
                    return Err(p.err(ln, "empty group"));
                }
                let mut pts = Vec::with_capacity(count);
                for _ in 0..count {
                    let (pl, prow) = p.next("point row")?;
                    let ptok: Vec<&str> = prow.split_whitespace().collect();
                    pts.push(Point::new(p.coords(pl, &ptok, dim)?)?);
                }
                neighborhoods.push(pts);
            }
            Ok(Instance::Discrete(DiscreteInstance::new(dim, neighborhoods)?))
        }
        "FLATS" => {
            let mut flats = Vec::new();
            while p.pos < p.lines.len() {
                let (ln, row) = p.next("flat row")?;
                let tok: Vec<&str> = row.split_whitespace().collect();
                if tok.first() != Some(&"flat") || tok.len() != 3 {
                    return Err(p.err(ln, "expected 'flat <id> <k>'"));
                }
                let k: usize = tok[2]
                    .parse()
                    .map_err(|_| p.err(ln, format!("non-numeric flat dimension '{}'", tok[2])))?;
                let (bl, brow) = p.next("flat base")?;
                let btok: Vec<&str> = brow.split_whitespace().collect();
                let base = Point::new(p.coords(bl, &btok, dim)?)?;
                let mut basis = Vec::with_capacity(k);
                for _ in 0..k {
                    let (vl, vrow) = p.next("flat basis row")?;
                    let vtok: Vec<&str> = vrow.split_whitespace().collect();
                    basis.push(p.coords(vl, &vtok, dim)?);
                }
                flats.push(Flat { base, basis });
            }
            Ok(Instance::Flats(FlatInstance::new(dim, flats)?))
        }
        other => Err(p.err(hline, format!("unknown instance kind '{other}'"))),
    }
}

/// Reads an instance file.
pub fn read_instance(path: impl AsRef<Path>) -> Result<Instance> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_instance(&path.display().to_string(), &text)
}

/// Serializes a tour (`TSPN TOUR 1` header, dim row, then waypoints).
pub fn format_tour(t: &Tour) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "TSPN TOUR 1");
    let _ = writeln!(out, "dim {}", t.dim());
    let _ = writeln!(out, "tour {}", t.len());
    for w in &t.waypoints {
        let mut row = String::new();
        fmt_coords(&mut row, &w.coords);
        let _ = writeln!(out, "{}", row.trim_start());
    }
    out
}

/// Writes a tour file.
pub fn write_tour(t: &Tour, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_tour(t))?;
    Ok(())
}

/// Reads a tour file.
pub fn read_tour(path: impl AsRef<Path>) -> Result<Tour> {
    let path_s = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut p = Parser::new(&path_s, &text);
    let (hline, header) = p.next("header")?;
    if header.split_whitespace().collect::<Vec<_>>() != ["TSPN", "TOUR", "1"] {
        return Err(p.err(hline, "malformed header, expected 'TSPN TOUR 1'"));
    }
    let (dline, dim_row) = p.next("dim")?;
    let dtok: Vec<&str> = dim_row.split_whitespace().collect();
    if dtok.len() != 2 || dtok[0] != "dim" {
        return Err(p.err(dline, "expected 'dim <d>'"));
    }
    let dim: usize = dtok[1]
        .parse()
        .map_err(|_| p.err(dline, format!("non-numeric dimension '{}'", dtok[1])))?;
    let (cline, count_row) = p.next("tour count")?;
    let ctok: Vec<&str> = count_row.split_whitespace().collect();
    if ctok.len() != 2 || ctok[0] != "tour" {
        return Err(p.err(cline, "expected 'tour <count>'"));
    }
    let count: usize = ctok[1]
        .parse()
        .map_err(|_| p.err(cline, format!("non-numeric count '{}'", ctok[1])))?;
    let mut waypoints = Vec::with_capacity(count);
    for _ in 0..count {
        let (pl, prow) = p.next("waypoint row")?;
        let ptok: Vec<&str> = prow.split_whitespace().collect();
        waypoints.push(Point::new(p.coords(pl, &ptok, dim)?)?);
    }
    Tour::new(waypoints)
}
