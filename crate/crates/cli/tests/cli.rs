use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn chanceplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanceplan")).args(args).output().unwrap()
}

fn line_scenario(dir: &Path, goal: &str) -> PathBuf {
    let path = dir.join("line.toml");
    let src = format!(
        r#"name = "line"
horizon = 3
delta = 0.1
delta_goal = 0.1

[[state]]
name = "x"
update = "x + u + w"
initial = {{ kind = "uniform", lo = -0.05, hi = 0.05 }}

[[control]]
name = "u"
bounds = [-1.0, 1.0]

[[noise]]
name = "w"
dist = {{ kind = "uniform", lo = -0.01, hi = 0.01 }}

[[obstacle]]
name = "wall"
poly = "x + 0.5"

[goal]
poly = "{goal}"

[cost]
stage = "u^2"
"#
    );
    std::fs::write(&path, src).unwrap();
    path
}

/// Data rows of a CSV output with the comment header stripped.
fn body(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn malformed_scenario_exits_with_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "name = \"bad\"\nhorizon = 3\n[[state]]\nname = \"x\"\nupdate = \"x + (\"\n").unwrap();
    let out = chanceplan(&["solve", "--scenario", bad.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_scenario_is_not_a_parse_error() {
    let out = chanceplan(&["solve", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreachable_goal_exits_infeasible() {
    let tmp = tempfile::tempdir().unwrap();
    let s = line_scenario(tmp.path(), "(x - 10)^2 - 0.01");
    let out_dir = tmp.path().join("out");
    let out = chanceplan(&["solve", "--scenario", s.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(std::fs::read_to_string(out_dir.join("summary.toml")).unwrap().contains("infeasible"));
}

#[test]
fn iteration_limit_exits_max_iter() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario_path("underwater.toml");
    let out = chanceplan(&["solve", "--scenario", s.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap(), "--max-iter", "1"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn verify_passes_a_solved_plan_and_fails_a_reckless_one() {
    let tmp = tempfile::tempdir().unwrap();
    let s = line_scenario(tmp.path(), "(x - 1)^2 - 0.04");
    let s = s.to_str().unwrap();
    let solved = tmp.path().join("solved");
    let out = chanceplan(&["solve", "--scenario", s, "--out-dir", solved.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));

    let controls = solved.join("controls.csv");
    let verified = tmp.path().join("verified");
    let out = chanceplan(&[
        "verify", "--scenario", s, "--controls", controls.to_str().unwrap(), "--out-dir", verified.to_str().unwrap(), "--samples", "50000",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    // driving straight into the wall
    let reckless = tmp.path().join("reckless.csv");
    std::fs::write(&reckless, "step,u\n0,-1\n1,-1\n2,-1\n").unwrap();
    let out = chanceplan(&[
        "verify", "--scenario", s, "--controls", reckless.to_str().unwrap(), "--out-dir", verified.to_str().unwrap(), "--samples", "50000",
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    let report = std::fs::read_to_string(verified.join("mc_report.toml")).unwrap();
    assert!(report.starts_with("# chanceplan "));
    assert!(report.contains("pass = false"));
}

#[test]
fn propagate_reproduces_solver_moments() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario_path("underwater.toml");
    let s = s.to_str().unwrap();
    let solved = tmp.path().join("solved");
    assert_eq!(chanceplan(&["solve", "--scenario", s, "--out-dir", solved.to_str().unwrap()]).status.code(), Some(0));
    let propagated = tmp.path().join("propagated");
    let controls = solved.join("controls.csv");
    let out = chanceplan(&[
        "propagate", "--scenario", s, "--controls", controls.to_str().unwrap(), "--out-dir", propagated.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(body(&solved.join("moments.csv")), body(&propagated.join("moments.csv")));
}

#[test]
fn outputs_carry_provenance_header() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario_path("example3.toml");
    let out = chanceplan(&["propagate", "--scenario", s.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap(), "--seed", "12"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(tmp.path().join("moments.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# chanceplan "));
    let scen = lines.next().unwrap();
    assert!(scen.starts_with("# scenario example3 sha256=") && scen.len() == "# scenario example3 sha256=".len() + 64);
    assert_eq!(lines.next().unwrap(), "# seed 12");
}

#[test]
fn contour_writes_one_grid_per_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario_path("example2_contour.toml");
    let out = chanceplan(&[
        "contour", "--scenario", s.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap(), "--delta", "0.05", "--delta", "0.1",
        "--grid", "-1:1:5,-1:1:4", "--samples", "2000",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2, "{names:?}");
    let grid = body(&tmp.path().join(&names[0]));
    assert_eq!(grid.lines().count(), 1 + 20);
    assert_eq!(grid.lines().next().unwrap(), "x1,x2,mc_risk,stderr,vp_safe,mc_safe");
}
