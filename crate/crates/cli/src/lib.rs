//! Commands behind the `chanceplan` binary. Every command reads a scenario
//! file, writes plain-text outputs into an output directory and returns an
//! [`Outcome`] that maps to the process exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chanceplan::mc::{self, McOptions, NoiseMode};
use chanceplan::nlp::{self, Evaluator, NlpProblem, SolveResult, SolveStatus, SolverOptions};
use chanceplan::risk::{mc_risk_contour, Grid};
use chanceplan::scenario::Scenario;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "chanceplan", version, about = "Risk-bounded trajectory planning under non-Gaussian uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a control sequence and write the planned moment trajectory.
    Solve(SolveArgs),
    /// Monte Carlo check of a control sequence against the risk bounds.
    Verify(VerifyArgs),
    /// Propagate moments under a fixed control sequence.
    Propagate(PropagateArgs),
    /// Grid classification of one obstacle: VP-safe flags and MC risk.
    Contour(ContourArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Controls file written by `solve`.
    #[arg(long)]
    pub controls: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value = "redraw")]
    pub noise_mode: NoiseMode,
}

#[derive(Debug, Clone, Args)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Controls file; the scenario's initial guess when omitted.
    #[arg(long)]
    pub controls: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ContourArgs {
    #[command(flatten)]
    pub common: Common,
    /// Risk levels; one output file each.
    #[arg(long = "delta", required = true)]
    pub deltas: Vec<f64>,
    /// `xlo:xhi:nx,ylo:yhi:ny`
    #[arg(long, default_value = "-1:1:41,-1:1:41", allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Obstacle name; the first obstacle when omitted.
    #[arg(long)]
    pub obstacle: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Infeasible,
    MaxIter,
    Fail,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Infeasible => 3,
            Outcome::MaxIter => 4,
            Outcome::Fail => 5,
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Solve(a) => solve(&a),
        Command::Verify(a) => verify(&a),
        Command::Propagate(a) => propagate(&a),
        Command::Contour(a) => contour(&a),
    }
}

/// A scenario together with the provenance recorded in output headers.
pub struct Loaded {
    pub scenario: Scenario,
    pub sha256: String,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scenario = Scenario::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
    let digest = Sha256::digest(text.as_bytes());
    let sha256 = digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    Ok(Loaded { scenario, sha256 })
}

fn header(l: &Loaded, seed: u64) -> String {
    format!(
        "# chanceplan {VERSION}\n# scenario {} sha256={}\n# seed {seed}\n",
        l.scenario.file.name, l.sha256
    )
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn solver_options(s: &Scenario, a: &SolveArgs) -> SolverOptions {
    let mut o = SolverOptions::from_scenario(s);
    if let Some(v) = a.max_iter {
        o.max_iter = v;
    }
    if let Some(v) = a.tol {
        o.tol = v;
    }
    if let Some(v) = a.restarts {
        o.restarts = v;
    }
    if let Some(v) = a.common.seed {
        o.seed = v;
    }
    o
}

fn csv_row<I: IntoIterator<Item = String>>(out: &mut String, cells: I) {
    let row: Vec<String> = cells.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

fn controls_table(l: &Loaded, seed: u64, controls: &[Vec<f64>]) -> String {
    let s = &l.scenario;
    let mut out = header(l, seed);
    let names = s.dynamics.controls.iter().map(|&c| s.table().name(c).to_string());
    csv_row(&mut out, std::iter::once("step".to_string()).chain(names));
    for (k, c) in controls.iter().enumerate() {
        csv_row(&mut out, std::iter::once(k.to_string()).chain(c.iter().map(|x| x.to_string())));
    }
    out
}

/// Moment trajectory table; `order1` restricts it to the basis expectations.
fn moments_table(l: &Loaded, seed: u64, p: &NlpProblem, moments: &[Vec<f64>], order1: bool) -> String {
    let cols = if order1 { p.basis.len() } else { p.n_moments() };
    let mut out = header(l, seed);
    let labels = p.labels[..cols].iter().cloned();
    csv_row(&mut out, ["step".to_string(), "time".to_string()].into_iter().chain(labels));
    for (k, m) in moments.iter().enumerate() {
        csv_row(
            &mut out,
            [k.to_string(), p.time_at(k).to_string()]
                .into_iter()
                .chain(m[..cols].iter().map(|x| x.to_string())),
        );
    }
    out
}

fn solve_summary(l: &Loaded, p: &NlpProblem, o: &SolverOptions, r: &SolveResult) -> String {
    let mut out = header(l, o.seed);
    let _ = writeln!(out, "status = \"{}\"", r.status.as_str());
    let _ = writeln!(out, "objective = {}", r.objective);
    let _ = writeln!(out, "iterations = {}", r.iterations);
    let _ = writeln!(out, "start = {}", r.start);
    let _ = writeln!(out, "eq_violation = {}", r.eq_violation);
    let _ = writeln!(out, "ineq_violation = {}", r.ineq_violation);
    let _ = writeln!(out, "variables = {}", p.n_vars());
    let _ = writeln!(out, "constraints = {}", p.n_constraints());
    let _ = writeln!(out, "equalities = {}", p.n_eq());
    let _ = writeln!(out, "inequalities = {}", p.n_ineq());
    let _ = writeln!(out, "max_iter = {}", o.max_iter);
    let _ = writeln!(out, "tol = {}", o.tol);
    let _ = writeln!(out, "restarts = {}", o.restarts);
    out
}

fn solver_log(l: &Loaded, seed: u64, r: &SolveResult) -> String {
    let mut out = header(l, seed);
    out.push_str("iter,objective,violation,penalty,radius,step,merit_before,merit_after,accepted\n");
    for e in &r.log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.iter, e.objective, e.violation, e.penalty, e.radius, e.step, e.merit_before, e.merit_after, e.accepted
        );
    }
    out
}

pub fn solve(a: &SolveArgs) -> Result<Outcome> {
    let l = load(&a.common.scenario)?;
    let p = NlpProblem::assemble(&l.scenario).context("assembling the optimization problem")?;
    let opts = solver_options(&l.scenario, a);
    log::info!("{}: {} variables, {} constraints", p.name, p.n_vars(), p.n_constraints());
    let r = nlp::solve(&p, &opts);
    let dir = &a.common.out_dir;
    write(dir, "controls.csv", &controls_table(&l, opts.seed, &r.controls))?;
    write(dir, "expected.csv", &moments_table(&l, opts.seed, &p, &r.moments, true))?;
    write(dir, "moments.csv", &moments_table(&l, opts.seed, &p, &r.moments, false))?;
    write(dir, "summary.toml", &solve_summary(&l, &p, &opts, &r))?;
    write(dir, "solver_log.csv", &solver_log(&l, opts.seed, &r))?;
    println!(
        "{}: {} after {} iterations, objective {}, max violation {:.3e}",
        p.name,
        r.status.as_str(),
        r.iterations,
        r.objective,
        r.ineq_violation.max(r.eq_violation)
    );
    Ok(match r.status {
        SolveStatus::Converged => Outcome::Success,
        SolveStatus::Infeasible => Outcome::Infeasible,
        SolveStatus::MaxIter => Outcome::MaxIter,
    })
}

/// Reads a controls table: `#` comments, a header row, then
/// `step,c1,...,cn` rows.
pub fn read_controls(path: &Path, n_controls: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    lines.next().context("controls file has no header row")?;
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        ensure!(
            cells.len() == n_controls + 1,
            "{}:{}: expected {} columns, found {}",
            path.display(),
            i + 1,
            n_controls + 1,
            cells.len()
        );
        let values = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}: invalid number", path.display(), i + 1))?;
        rows.push(values);
    }
    Ok(rows)
}

fn checked_controls(s: &Scenario, path: &Path) -> Result<Vec<Vec<f64>>> {
    let controls = read_controls(path, s.dynamics.controls.len())?;
    if controls.len() != s.horizon() {
        bail!(
            "{} has {} control steps but the horizon is {}",
            path.display(),
            controls.len(),
            s.horizon()
        );
    }
    Ok(controls)
}

pub fn verify(a: &VerifyArgs) -> Result<Outcome> {
    let l = load(&a.common.scenario)?;
    let s = &l.scenario;
    let controls = checked_controls(s, &a.controls)?;
    let seed = a.common.seed.unwrap_or(0);
    let report = mc::simulate(
        s,
        &controls,
        &McOptions {
            samples: a.samples,
            seed,
            noise_mode: a.noise_mode,
            moment_order: None,
        },
    )?;
    let verdict = report.verdict(3.0);

    let mut risk = header(&l, seed);
    csv_row(
        &mut risk,
        ["step", "time", "constrained"]
            .into_iter()
            .map(String::from)
            .chain(report.obstacles.iter().flat_map(|o| [o.clone(), format!("{o}_stderr")])),
    );
    for st in &report.steps {
        csv_row(
            &mut risk,
            [st.step.to_string(), st.time.to_string(), st.constrained.to_string()]
                .into_iter()
                .chain(st.risk.iter().flat_map(|e| [e.p.to_string(), e.stderr.to_string()])),
        );
    }
    let dir = &a.common.out_dir;
    write(dir, "risk.csv", &risk)?;
    let mut text = header(&l, seed);
    let _ = writeln!(text, "pass = {}", verdict.pass);
    text.push_str(&report.to_text());
    write(dir, "mc_report.toml", &text)?;

    let goal = verdict.goal.map_or(String::new(), |g| format!(", goal probability {g}"));
    println!(
        "{}: worst risk {} at step {}{}{}",
        if verdict.pass { "PASS" } else { "FAIL" },
        verdict.worst_risk,
        verdict.worst_step,
        verdict.worst_obstacle.map_or(String::new(), |o| format!(" ({o})")),
        goal
    );
    Ok(if verdict.pass { Outcome::Success } else { Outcome::Fail })
}

pub fn propagate(a: &PropagateArgs) -> Result<Outcome> {
    let l = load(&a.common.scenario)?;
    let s = &l.scenario;
    let p = NlpProblem::assemble(s).context("building the moment system")?;
    let u: Vec<f64> = match &a.controls {
        Some(path) => checked_controls(s, path)?.concat(),
        None => p.guess.clone(),
    };
    let ev = Evaluator::new(&p);
    let moments = p.reduced(&u, &ev, false).moments;
    let seed = a.common.seed.unwrap_or(0);
    let dir = &a.common.out_dir;
    write(dir, "moments.csv", &moments_table(&l, seed, &p, &moments, false))?;
    write(dir, "expected.csv", &moments_table(&l, seed, &p, &moments, true))?;
    println!("{}: propagated {} moments over {} steps", p.name, p.n_moments(), p.horizon);
    Ok(Outcome::Success)
}

/// Parses `xlo:xhi:nx,ylo:yhi:ny`.
pub fn parse_grid(spec: &str) -> Result<Grid> {
    let axis = |part: &str| -> Result<((f64, f64), usize)> {
        let f: Vec<&str> = part.split(':').map(str::trim).collect();
        ensure!(f.len() == 3, "grid axis `{part}` must be lo:hi:n");
        let n: usize = f[2].parse().with_context(|| format!("grid count `{}`", f[2]))?;
        ensure!(n >= 1, "grid count must be at least 1");
        Ok(((f[0].parse()?, f[1].parse()?), n))
    };
    let parts: Vec<&str> = spec.split(',').collect();
    ensure!(parts.len() == 2, "grid spec `{spec}` must be xlo:xhi:nx,ylo:yhi:ny");
    let (x, nx) = axis(parts[0])?;
    let (y, ny) = axis(parts[1])?;
    Ok(Grid { x, y, nx, ny })
}

pub fn contour(a: &ContourArgs) -> Result<Outcome> {
    let l = load(&a.common.scenario)?;
    let s = &l.scenario;
    let grid = parse_grid(&a.grid)?;
    let region = match &a.obstacle {
        Some(name) => s
            .obstacles
            .iter()
            .find(|o| &o.name == name)
            .with_context(|| format!("no obstacle named `{name}`"))?,
        None => s.obstacles.first().context("scenario has no obstacles")?,
    };
    ensure!(s.dynamics.states.len() >= 2, "contours need two state axes");
    let axes = (s.dynamics.states[0], s.dynamics.states[1]);
    let seed = a.common.seed.unwrap_or(0);
    let points = mc_risk_contour(
        region,
        s.table(),
        &s.dynamics.noises,
        axes,
        &a.deltas,
        &grid,
        a.samples,
        seed,
    )?;
    let names = (s.table().name(axes.0).to_string(), s.table().name(axes.1).to_string());
    for (i, delta) in a.deltas.iter().enumerate() {
        let mut out = header(&l, seed);
        let _ = writeln!(out, "# obstacle {} delta {delta} samples {}", region.name, a.samples);
        let _ = writeln!(out, "{},{},mc_risk,stderr,vp_safe,mc_safe", names.0, names.1);
        let mut inside = 0;
        for pt in &points {
            let mc_safe = pt.mc_risk <= *delta;
            inside += usize::from(pt.vp_safe[i]);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                pt.x1,
                pt.x2,
                pt.mc_risk,
                pt.stderr,
                u8::from(pt.vp_safe[i]),
                u8::from(mc_safe)
            );
        }
        write(&a.common.out_dir, &format!("contour_{}_{delta}.csv", region.name), &out)?;
        println!("{} delta {delta}: {inside} of {} grid points VP-safe", region.name, points.len());
    }
    Ok(Outcome::Success)
}

/// Exit code for an error: 2 for scenario parse errors, 1 otherwise.
pub fn error_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.is::<chanceplan::scenario::ScenarioError>()) {
        2
    } else {
        1
    }
}
