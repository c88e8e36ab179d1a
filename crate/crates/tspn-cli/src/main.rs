//! Command-line driver: instance generators, the neighborhood solver, exact
//! oracles, feasibility checks, and tour reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use tspn::error::Error;
use tspn::geometry::{dist_point_line, Point, Tour};
use tspn::hardness::cube::{gen_cube, verify_cube};
use tspn::hardness::highdim::gen_highdim;
use tspn::hardness::{SimpleGraph, TripartiteGraph};
use tspn::instance::{
    discretize_lines, lift_to_flats, read_instance, read_tour, write_instance, write_tour,
    DiscreteInstance, DiscretizeScheme, Instance, LineInstance,
};
use tspn::oracle::{exact_line_tspn, held_karp_groups, OracleResult, DEFAULT_TOL};
use tspn::pipeline::{run_line_tspn, RunConfig};
use tspn::report::{svg_plot, Report};

#[derive(Parser)]
#[command(name = "tspn", version, about = "Euclidean TSP with neighborhoods")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate instances.
    #[command(subcommand)]
    Gen(GenCmd),
    /// Replace each line by representative points on it.
    Discretize {
        /// Line instance file.
        input: PathBuf,
        /// Where to write the discrete instance.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve an instance.
    #[command(subcommand)]
    Solve(SolveCmd),
    /// Check files and tours.
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Summarize tour files, optionally plotting them.
    Report {
        /// Tour files to summarize.
        #[arg(required = true)]
        tours: Vec<PathBuf>,
        /// Where to write an SVG plot of the tours.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenCmd {
    /// Flattened-cube line construction over a complete tripartite graph.
    Cube {
        /// Vertices per class.
        #[arg(long)]
        n: usize,
        /// Gadget grid side (at least 4).
        #[arg(long, default_value_t = 4)]
        grid: usize,
        /// Include the anchor gadget lines in the instance.
        #[arg(long)]
        gadgets: bool,
        /// Where to write the line instance.
        #[arg(long)]
        out: PathBuf,
    },
    /// High-dimensional near-unit-distance line construction.
    Highdim {
        /// Vertices of the (complete) source graph.
        #[arg(long)]
        n: usize,
        /// Distance slack; pairwise distances land in [1, 1+eps^2].
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Copies per source vertex.
        #[arg(long, default_value_t = 2)]
        alpha: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the line instance.
        #[arg(long)]
        out: PathBuf,
    },
    /// Random discrete instance with uniform points in the unit cube.
    Random {
        #[arg(long, default_value_t = 2)]
        dim: usize,
        /// Number of neighborhoods.
        #[arg(long)]
        groups: usize,
        /// Points per neighborhood.
        #[arg(long, default_value_t = 2)]
        per: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the discrete instance.
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift a line instance to k-flats in a higher dimension.
    Lift {
        /// Line instance file.
        input: PathBuf,
        /// Flat dimension.
        #[arg(long)]
        k: usize,
        /// Ambient dimension.
        #[arg(long)]
        d: usize,
        /// Where to write the flat instance.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SolveOpts {
    /// Interior portals per facet axis.
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Crossing cap per facet.
    #[arg(long, default_value_t = 2)]
    r: usize,
    /// Dissection shifts sampled per guess.
    #[arg(long, default_value_t = 16)]
    shifts: usize,
    /// Rounding sample multiplier.
    #[arg(long, default_value_t = 4.0)]
    c: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Node cap per solution graph.
    #[arg(long, default_value_t = 5_000_000)]
    budget: usize,
    /// Cap on the number of guesses tried.
    #[arg(long)]
    max_guesses: Option<usize>,
    /// Skip the exact-oracle comparison.
    #[arg(long)]
    no_oracle: bool,
    /// Where to write the tour (plus .report and .svg siblings).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SolveOpts {
    fn config(&self) -> RunConfig {
        RunConfig {
            m: self.m,
            r: self.r,
            shifts: self.shifts,
            c: self.c,
            seed: self.seed,
            node_budget: self.budget,
            max_guesses: self.max_guesses,
            oracle: !self.no_oracle,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum SolveCmd {
    /// Point TSP: visit every point of the instance.
    Tsp {
        input: PathBuf,
        #[command(flatten)]
        opts: SolveOpts,
    },
    /// Neighborhood TSP: visit one point of each group / one point per line.
    Tspn {
        input: PathBuf,
        #[command(flatten)]
        opts: SolveOpts,
    },
    /// Exact small-instance oracle.
    Oracle {
        input: PathBuf,
        /// Where to write the oracle tour.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Parse an instance file and print its shape.
    Instance { input: PathBuf },
    /// Check a tour against an instance.
    Tour {
        /// Instance file.
        instance: PathBuf,
        /// Tour file.
        tour: PathBuf,
        /// Distance tolerance per neighborhood.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                emit(&e.to_string());
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
    }
}

/// Prints to stdout, ignoring a closed pipe instead of panicking.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

/// 2 = the instance or tour failed a mathematical check or a cap; 1 = bad
/// usage, unreadable files, or invalid parameters.
fn code_for(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_)
        | Error::BudgetExceeded { .. }
        | Error::GroupMissed { .. }
        | Error::NotVertexCover(_)
        | Error::EmbeddingFailed(_)
        | Error::NotLight(_)
        | Error::EmptyTour => 2,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> tspn::error::Result<()> {
    match cmd {
        Cmd::Gen(g) => gen(g),
        Cmd::Discretize { input, out } => {
            let lines = read_lines(&input)?;
            let di = discretize_lines(&lines, DiscretizeScheme::ClosestPairs)?;
            let mut r = Report::new();
            r.put("kind", "discrete");
            r.put("dim", di.dim);
            r.put("groups", di.n());
            r.put("points", di.size());
            write_instance(&Instance::Discrete(di), &out)?;
            emit(&r.to_text());
            Ok(())
        }
        Cmd::Solve(s) => solve(s),
        Cmd::Verify(v) => verify(v),
        Cmd::Report { tours, out } => report_tours(&tours, out.as_deref()),
    }
}

fn read_lines(path: &Path) -> tspn::error::Result<LineInstance> {
    match read_instance(path)? {
        Instance::Lines(l) => Ok(l),
        _ => Err(Error::InvalidParameter(format!(
            "{} is not a line instance",
            path.display()
        ))),
    }
}

fn gen(cmd: GenCmd) -> tspn::error::Result<()> {
    match cmd {
        GenCmd::Cube {
            n,
            grid,
            gadgets,
            out,
        } => {
            let c = gen_cube(&TripartiteGraph::complete(n), grid)?;
            let li = c.line_instance(gadgets)?;
            let mut r = Report::new();
            r.put("kind", "lines");
            r.put("dim", li.dim);
            r.put("lines", li.lines.len());
            r.put_f64("delta", c.delta);
            r.put_f64("delta.star", c.delta_star);
            r.put_f64("sigma", c.sigma);
            r.put("grid", c.m_grid);
            r.put_f64("gadget.scale", c.gadget_scale);
            r.put("anchors", c.q_points.len());
            for (v, p) in &c.points_flat {
                r.put(
                    "vertex",
                    format!(
                        "{} {} {:.17e} {:.17e} {:.17e}",
                        v.class, v.index, p.coords[0], p.coords[1], p.coords[2]
                    ),
                );
            }
            let checks = verify_cube(&c);
            r.put("checks.pass", checks.all_pass());
            write_instance(&Instance::Lines(li), &out)?;
            write_sidecar(&out, &r)?;
            emit(&r.to_text());
            Ok(())
        }
        GenCmd::Highdim {
            n,
            eps,
            alpha,
            seed,
            out,
        } => {
            let c = gen_highdim(&SimpleGraph::complete(n), eps, alpha, seed)?;
            let li = c.line_instance()?;
            let mut r = Report::new();
            r.put("kind", "lines");
            r.put("dim", li.dim);
            r.put("lines", li.lines.len());
            r.put_f64("eps", c.eps);
            r.put_f64("delta", c.delta);
            r.put("alpha", c.alpha);
            r.put_f64("ball.radius", c.ball_radius);
            r.put_f64("lambda", c.lambda);
            write_instance(&Instance::Lines(li), &out)?;
            write_sidecar(&out, &r)?;
            emit(&r.to_text());
            Ok(())
        }
        GenCmd::Random {
            dim,
            groups,
            per,
            seed,
            out,
        } => {
            if dim < 2 || groups == 0 || per == 0 {
                return Err(Error::InvalidParameter(
                    "need dim >= 2, groups >= 1, and per >= 1".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nbhds: Vec<Vec<Point>> = (0..groups)
                .map(|_| {
                    (0..per)
                        .map(|_| {
                            Point::new((0..dim).map(|_| rng.gen_range(0.0..1.0)).collect())
                        })
                        .collect::<tspn::error::Result<_>>()
                })
                .collect::<tspn::error::Result<_>>()?;
            let di = DiscreteInstance::new(dim, nbhds)?;
            let mut r = Report::new();
            r.put("kind", "discrete");
            r.put("dim", di.dim);
            r.put("groups", di.n());
            r.put("points", di.size());
            r.put("seed", seed);
            write_instance(&Instance::Discrete(di), &out)?;
            emit(&r.to_text());
            Ok(())
        }
        GenCmd::Lift { input, k, d, out } => {
            let lines = read_lines(&input)?;
            let fi = lift_to_flats(&lines, k, d)?;
            let mut r = Report::new();
            r.put("kind", "flats");
            r.put("dim", fi.dim);
            r.put("flats", fi.flats.len());
            r.put("k", k);
            write_instance(&Instance::Flats(fi), &out)?;
            emit(&r.to_text());
            Ok(())
        }
    }
}

fn solve(cmd: SolveCmd) -> tspn::error::Result<()> {
    match cmd {
        SolveCmd::Tsp { input, opts } => {
            let Instance::Discrete(di) = read_instance(&input)? else {
                return Err(Error::InvalidParameter(
                    "point TSP needs a discrete instance".into(),
                ));
            };
            let cfg = opts.config();
            let rep = tspn::pipeline::run_point_tsp(&di, &cfg)?;
            emit_run(&rep, &cfg)
        }
        SolveCmd::Tspn { input, opts } => {
            let cfg = opts.config();
            let rep = match read_instance(&input)? {
                Instance::Discrete(di) => tspn::pipeline::run_tspn(&di, &cfg)?,
                Instance::Lines(li) => run_line_tspn(&li, &cfg)?,
                Instance::Flats(_) => {
                    return Err(Error::InvalidParameter(
                        "solve the projected line instance; flats are for lifting only".into(),
                    ))
                }
            };
            emit_run(&rep, &cfg)
        }
        SolveCmd::Oracle { input, out } => {
            let o: OracleResult = match read_instance(&input)? {
                Instance::Discrete(di) => held_karp_groups(&di)?,
                Instance::Lines(li) => exact_line_tspn(&li)?,
                Instance::Flats(_) => {
                    return Err(Error::InvalidParameter(
                        "no exact oracle for flat instances".into(),
                    ))
                }
            };
            let mut r = Report::new();
            r.put_f64("cost", o.cost);
            r.put("method", o.method);
            r.put("optimality", format!("{:?}", o.optimality));
            if let Some(path) = out {
                write_tour(&o.tour, &path)?;
            }
            emit(&r.to_text());
            Ok(())
        }
    }
}

fn emit_run(rep: &tspn::pipeline::RunReport, cfg: &RunConfig) -> tspn::error::Result<()> {
    let sidecar = rep.sidecar(cfg);
    if let Some(path) = &cfg.out {
        write_tour(&rep.tour, path)?;
        write_sidecar(path, &sidecar)?;
        let svg = svg_plot(&[rep.tour.clone()], 640.0);
        std::fs::write(path.with_extension("svg"), svg)?;
    }
    emit(&sidecar.to_text());
    Ok(())
}

fn write_sidecar(base: &Path, r: &Report) -> tspn::error::Result<()> {
    r.write(base.with_extension("report"))
}

fn verify(cmd: VerifyCmd) -> tspn::error::Result<()> {
    match cmd {
        VerifyCmd::Instance { input } => {
            let mut r = Report::new();
            match read_instance(&input)? {
                Instance::Discrete(di) => {
                    r.put("kind", "discrete");
                    r.put("dim", di.dim);
                    r.put("groups", di.n());
                    r.put("points", di.size());
                }
                Instance::Lines(li) => {
                    r.put("kind", "lines");
                    r.put("dim", li.dim);
                    r.put("lines", li.lines.len());
                }
                Instance::Flats(fi) => {
                    r.put("kind", "flats");
                    r.put("dim", fi.dim);
                    r.put("flats", fi.flats.len());
                }
            }
            emit(&r.to_text());
            Ok(())
        }
        VerifyCmd::Tour {
            instance,
            tour,
            tol,
        } => {
            let t = read_tour(&tour)?;
            match read_instance(&instance)? {
                Instance::Discrete(di) => di.verify_tour(&t, tol)?,
                Instance::Lines(li) => verify_line_tour(&li, &t, tol)?,
                Instance::Flats(fi) => {
                    for (i, f) in fi.flats.iter().enumerate() {
                        let d = t
                            .waypoints
                            .iter()
                            .map(|w| f.dist_point(w))
                            .fold(f64::INFINITY, f64::min);
                        if d > tol {
                            return Err(Error::GroupMissed {
                                group: i,
                                dist: d,
                                tol,
                            });
                        }
                    }
                }
            }
            let mut r = Report::new();
            r.put("feasible", true);
            r.put_f64("cost", t.cost());
            r.put("waypoints", t.len());
            emit(&r.to_text());
            Ok(())
        }
    }
}

fn verify_line_tour(li: &LineInstance, t: &Tour, tol: f64) -> tspn::error::Result<()> {
    for (i, line) in li.lines.iter().enumerate() {
        let mut d = f64::INFINITY;
        for w in &t.waypoints {
            d = d.min(dist_point_line(w, line)?);
        }
        if d > tol {
            return Err(Error::GroupMissed {
                group: i,
                dist: d,
                tol,
            });
        }
    }
    Ok(())
}

fn report_tours(paths: &[PathBuf], out: Option<&Path>) -> tspn::error::Result<()> {
    let mut tours = Vec::new();
    let mut r = Report::new();
    for p in paths {
        let t = read_tour(p)?;
        r.put(
            "tour",
            format!("{} {} {:.17e}", p.display(), t.len(), t.cost()),
        );
        tours.push(t);
    }
    if let Some(path) = out {
        std::fs::write(path, svg_plot(&tours, 640.0))?;
        r.put("plot", path.display());
    }
    emit(&r.to_text());
    Ok(())
}
