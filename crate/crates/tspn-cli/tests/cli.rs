//! End-to-end checks of the command-line interface and its exit codes.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tspn"))
}

fn tdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("tspn-cli-{}-{}", std::process::id(), name));
    std::fs::create_dir_all(&d).expect("temp dir");
    d
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tspn")
}

fn path(p: &PathBuf) -> &str {
    p.to_str().expect("utf8 path")
}

#[test]
fn gen_solve_verify_round_trip() {
    let d = tdir("round-trip");
    let inst = d.join("a.inst");
    let tour = d.join("a.tour");
    let out = run(&[
        "gen", "random", "--dim", "2", "--groups", "3", "--per", "2", "--seed", "11", "--out",
        path(&inst),
    ]);
    assert!(out.status.success(), "gen failed: {out:?}");
    assert!(stdout(&out).contains("groups = 3"));

    let out = run(&[
        "solve",
        "tspn",
        path(&inst),
        "--shifts",
        "2",
        "--seed",
        "3",
        "--out",
        path(&tour),
    ]);
    assert!(out.status.success(), "solve failed: {out:?}");
    let text = stdout(&out);
    assert!(text.contains("best.cost ="), "no best cost in: {text}");
    assert!(text.contains("ratio ="), "oracle comparison missing: {text}");
    assert!(tour.exists());
    assert!(tour.with_extension("report").exists());
    assert!(tour.with_extension("svg").exists());

    let out = run(&["verify", "tour", path(&inst), path(&tour)]);
    assert!(out.status.success(), "verify failed: {out:?}");
    assert!(stdout(&out).contains("feasible = true"));
}

#[test]
fn infeasible_tours_exit_two() {
    let d = tdir("infeasible");
    let inst = d.join("a.inst");
    let tour = d.join("far.tour");
    assert!(run(&[
        "gen", "random", "--dim", "2", "--groups", "2", "--per", "1", "--seed", "4", "--out",
        path(&inst),
    ])
    .status
    .success());
    std::fs::write(&tour, "TSPN TOUR 1\ndim 2\ntour 1\n9.0 9.0\n").expect("write tour");
    let out = run(&["verify", "tour", path(&inst), path(&tour)]);
    assert_eq!(out.status.code(), Some(2), "wrong exit: {out:?}");
}

#[test]
fn usage_and_io_errors_exit_one() {
    let out = run(&["bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["solve", "tspn", "/nonexistent/x.inst"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn oracle_prints_its_method() {
    let d = tdir("oracle");
    let inst = d.join("a.inst");
    assert!(run(&[
        "gen", "random", "--dim", "2", "--groups", "3", "--per", "2", "--seed", "8", "--out",
        path(&inst),
    ])
    .status
    .success());
    let out = run(&["solve", "oracle", path(&inst)]);
    assert!(out.status.success(), "oracle failed: {out:?}");
    let text = stdout(&out);
    assert!(text.contains("method = held_karp"), "got: {text}");
    assert!(text.contains("cost ="));
}

#[test]
fn cube_lines_discretize_and_lift() {
    let d = tdir("cube");
    let cube = d.join("cube.inst");
    let disc = d.join("cube-d.inst");
    let flats = d.join("cube-f.inst");
    let out = run(&["gen", "cube", "--n", "1", "--out", path(&cube)]);
    assert!(out.status.success(), "gen cube failed: {out:?}");
    assert!(stdout(&out).contains("checks.pass = true"));
    assert!(cube.with_extension("report").exists());

    let out = run(&["discretize", path(&cube), "--out", path(&disc)]);
    assert!(out.status.success(), "discretize failed: {out:?}");
    let out = run(&["verify", "instance", path(&disc)]);
    assert!(stdout(&out).contains("kind = discrete"));

    let out = run(&[
        "gen",
        "lift",
        path(&cube),
        "--k",
        "2",
        "--d",
        "4",
        "--out",
        path(&flats),
    ]);
    assert!(out.status.success(), "lift failed: {out:?}");
    let out = run(&["verify", "instance", path(&flats)]);
    assert!(stdout(&out).contains("kind = flats"));
}

#[test]
fn report_renders_an_svg() {
    let d = tdir("report");
    let inst = d.join("a.inst");
    let tour = d.join("a.tour");
    let svg = d.join("plot.svg");
    assert!(run(&[
        "gen", "random", "--dim", "2", "--groups", "3", "--per", "1", "--seed", "2", "--out",
        path(&inst),
    ])
    .status
    .success());
    assert!(run(&["solve", "oracle", path(&inst), "--out", path(&tour)])
        .status
        .success());
    let out = run(&["report", path(&tour), "--out", path(&svg)]);
    assert!(out.status.success(), "report failed: {out:?}");
    assert!(stdout(&out).contains("tour ="));
    let body = std::fs::read_to_string(&svg).expect("svg written");
    assert!(body.starts_with("<svg"));
    assert!(body.contains("<polygon"));
}

#[test]
fn line_instances_solve_end_to_end() {
    let d = tdir("lines");
    let cube = d.join("cube.inst");
    let tour = d.join("cube.tour");
    assert!(run(&["gen", "cube", "--n", "1", "--out", path(&cube)])
        .status
        .success());
    let out = run(&[
        "solve",
        "tspn",
        path(&cube),
        "--shifts",
        "2",
        "--seed",
        "5",
        "--out",
        path(&tour),
    ]);
    assert!(out.status.success(), "solve lines failed: {out:?}");
    let out = run(&["verify", "tour", path(&cube), path(&tour), "--tol", "1e-6"]);
    assert!(out.status.success(), "line tour infeasible: {out:?}");
}
