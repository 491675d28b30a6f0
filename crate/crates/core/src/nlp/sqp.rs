//! Trust-region Sℓ1QP on the reduced (control-only) problem.
//!
//! Each major iteration solves an elastic QP model of the ℓ1 exact-penalty
//! merit `f + μ Σ max(gᵢ, 0)` inside a box trust region intersected with the
//! control bounds, and accepts the step on sufficient actual-to-predicted
//! reduction. The Hessian is a damped BFGS approximation of the Lagrangian's.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::qp::{solve_elastic_qp, QpProblem};
use super::{Evaluator, NlpProblem, Reduced};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Tolerance on equality residuals and inequality violations.
    pub tol: f64,
    /// Extra solves from perturbed initial guesses.
    pub restarts: usize,
    pub seed: u64,
    pub trust_radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            restarts: 0,
            seed: 0,
            trust_radius: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    Infeasible,
    MaxIter,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub objective: f64,
    pub violation: f64,
    pub penalty: f64,
    pub radius: f64,
    pub step: f64,
    /// Merit before and after the step, at the same penalty.
    pub merit_before: f64,
    pub merit_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Controls per step.
    pub controls: Vec<Vec<f64>>,
    /// Moments `m(0..=T)` per step.
    pub moments: Vec<Vec<f64>>,
    pub objective: f64,
    pub iterations: usize,
    /// Largest equality residual of the full-space problem.
    pub eq_violation: f64,
    /// Largest inequality violation `max(gᵢ, 0)`.
    pub ineq_violation: f64,
    pub start: usize,
    pub log: Vec<IterationLog>,
}

impl SolverOptions {
    /// Defaults overridden by the scenario's `[solver]` section.
    pub fn from_scenario(s: &crate::scenario::Scenario) -> Self {
        let d = Self::default();
        let f = &s.file.solver;
        Self {
            max_iter: f.max_iter.unwrap_or(d.max_iter),
            tol: f.tol.unwrap_or(d.tol),
            restarts: f.restarts.unwrap_or(d.restarts),
            seed: f.seed.unwrap_or(d.seed),
            trust_radius: f.trust_radius.unwrap_or(d.trust_radius),
        }
    }
}

/// Backend that solves an assembled problem.
pub trait NlpSolver {
    fn solve(&self, problem: &NlpProblem, opts: &SolverOptions) -> SolveResult;
}

/// The built-in SQP backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sqp;

impl NlpSolver for Sqp {
    fn solve(&self, problem: &NlpProblem, opts: &SolverOptions) -> SolveResult {
        solve(problem, opts)
    }
}

const MAX_PENALTY: f64 = 1e10;
const MIN_RADIUS: f64 = 1e-10;
const ACCEPT: f64 = 0.1;
const EXPAND: f64 = 0.75;

/// Solves from the problem's initial guess, plus `opts.restarts` perturbed
/// guesses in parallel; the best converged (then least violating) result wins.
pub fn solve(problem: &NlpProblem, opts: &SolverOptions) -> SolveResult {
    let starts: Vec<Vec<f64>> = (0..=opts.restarts)
        .map(|k| {
            if k == 0 {
                problem.guess.clone()
            } else {
                perturbed_guess(problem, opts.seed, k)
            }
        })
        .collect();
    let results: Vec<SolveResult> = if starts.len() == 1 {
        vec![solve_from(problem, opts, &starts[0], 0)]
    } else {
        starts
            .par_iter()
            .enumerate()
            .map(|(k, u0)| solve_from(problem, opts, u0, k))
            .collect()
    };
    results
        .into_iter()
        .min_by(|a, b| rank(a).partial_cmp(&rank(b)).unwrap_or(std::cmp::Ordering::Equal))
        .expect("at least one start")
}

fn rank(r: &SolveResult) -> (u8, f64, usize) {
    match r.status {
        SolveStatus::Converged => (0, r.objective, r.start),
        _ => (1, r.ineq_violation, r.start),
    }
}

fn perturbed_guess(problem: &NlpProblem, seed: u64, k: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let nc = problem.n_controls;
    problem
        .guess
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let (lo, hi) = problem.bounds[i % nc];
            let width = if lo.is_finite() && hi.is_finite() { hi - lo } else { 2.0 };
            (g + 0.25 * width * rng.random_range(-1.0..1.0)).clamp(lo, hi)
        })
        .collect()
}

fn violation_sum(g: &[f64]) -> f64 {
    g.iter().map(|v| v.max(0.0)).sum()
}

fn violation_max(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(*v))
}

struct Model {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Model {
    fn qp(&self, u: &[f64], r: &Reduced, b: &DMatrix<f64>, c: DVector<f64>, mu: f64, radius: f64) -> QpProblem {
        let n = u.len();
        QpProblem {
            h: b.clone(),
            g: DVector::from_column_slice(&r.grad),
            a: r.jac.clone(),
            c,
            mu,
            lo: DVector::from_fn(n, |i, _| (self.lo[i] - u[i]).max(-radius).min(0.0)),
            hi: DVector::from_fn(n, |i, _| (self.hi[i] - u[i]).min(radius).max(0.0)),
        }
    }

    fn bounds_of(p: &NlpProblem) -> (Vec<f64>, Vec<f64>) {
        let nc = p.n_controls;
        let n = p.n_control_vars();
        let lo = (0..n).map(|i| p.bounds[i % nc].0).collect();
        let hi = (0..n).map(|i| p.bounds[i % nc].1).collect();
        (lo, hi)
    }
}

fn solve_from(problem: &NlpProblem, opts: &SolverOptions, u0: &[f64], start: usize) -> SolveResult {
    let ev = Evaluator::new(problem);
    let (lo, hi) = Model::bounds_of(problem);
    let model = Model { lo, hi };
    let n = u0.len();
    let mut u: Vec<f64> = u0
        .iter()
        .zip(model.lo.iter().zip(&model.hi))
        .map(|(x, (l, h))| x.clamp(*l, *h))
        .collect();
    let mut r = problem.reduced(&u, &ev, true);
    let mut b = DMatrix::<f64>::identity(n, n);
    let mut mu: f64 = 10.0;
    let mut radius = opts.trust_radius;
    let mut log = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let viol = violation_sum(&r.g);
        let c = DVector::from_column_slice(&r.g);
        let mut sol = solve_elastic_qp(&model.qp(&u, &r, &b, c.clone(), mu, radius));
        // Steering: raise the penalty while that reduces linearized infeasibility.
        let mut lin = sol.t.sum();
        while lin > 1e-9 * (1.0 + viol) && mu < MAX_PENALTY {
            let trial = solve_elastic_qp(&model.qp(&u, &r, &b, c.clone(), mu * 10.0, radius));
            let t = trial.t.sum();
            if t < 0.9 * lin || t <= 1e-9 * (1.0 + viol) {
                mu *= 10.0;
                sol = trial;
                lin = t;
            } else {
                break;
            }
        }
        let ymax = sol.y.amax();
        if ymax >= 0.5 * mu && mu < MAX_PENALTY && lin <= 1e-9 * (1.0 + viol) {
            mu = (mu * 10.0).min(MAX_PENALTY);
        }

        let d = &sol.d;
        log::debug!(
            "iter {iter}: f {:.6e} viol {:.3e} mu {mu:.1e} radius {radius:.3e} qp_iters {} lin {lin:.3e} |d| {:.3e}",
            r.f, viol, sol.iterations, d.amax()
        );
        let gd = DVector::from_column_slice(&r.grad).dot(d);
        let quad = 0.5 * d.dot(&(&b * d));
        let pred = -(gd + quad) + mu * (viol - lin);
        let merit = r.f + mu * viol;
        let step = d.amax();
        let vmax = violation_max(&r.g);

        let small = pred <= 1e-10 * (1.0 + r.f.abs()) || step <= 1e-11 * (1.0 + vec_amax(&u));
        if small {
            if vmax <= opts.tol {
                status = SolveStatus::Converged;
                break;
            }
            if mu >= MAX_PENALTY {
                status = SolveStatus::Infeasible;
                break;
            }
            mu = (mu * 10.0).min(MAX_PENALTY);
            continue;
        }

        let trial = |dd: &DVector<f64>| {
            let ut: Vec<f64> = u
                .iter()
                .zip(dd.iter())
                .zip(model.lo.iter().zip(&model.hi))
                .map(|((x, s), (l, h))| (x + s).clamp(*l, *h))
                .collect();
            let rt = problem.reduced(&ut, &ev, false);
            let merit_t = rt.f + mu * violation_sum(&rt.g);
            (ut, rt, merit_t)
        };
        let (ut, rt, merit_t) = trial(d);
        let mut accepted = None;
        if merit_t.is_finite() && merit_t < merit && (merit - merit_t) / pred >= ACCEPT {
            accepted = Some((ut, d.clone(), (merit - merit_t) / pred, merit_t));
        } else if rt.g.iter().all(|v| v.is_finite()) {
            // Second-order correction: keep the linearization but shift the
            // constraint values to those seen at the trial point.
            let c2 = DVector::from_column_slice(&rt.g) - &r.jac * d;
            let d2 = solve_elastic_qp(&model.qp(&u, &r, &b, c2, mu, radius)).d;
            let (ut, _, merit_t) = trial(&d2);
            if merit_t.is_finite() && merit_t < merit && (merit - merit_t) / pred >= ACCEPT {
                accepted = Some((ut, d2, (merit - merit_t) / pred, merit_t));
            }
        }

        match accepted {
            Some((ut, dd, ratio, merit_t)) => {
                let rn = problem.reduced(&ut, &ev, true);
                let y = &sol.y;
                let lag = |rr: &Reduced| DVector::from_column_slice(&rr.grad) + rr.jac.tr_mul(y);
                let s = DVector::from_fn(n, |i, _| ut[i] - u[i]);
                let yk = lag(&rn) - lag(&r);
                damped_bfgs(&mut b, &s, &yk);
                log.push(IterationLog {
                    iter,
                    objective: rn.f,
                    violation: violation_max(&rn.g),
                    penalty: mu,
                    radius,
                    step: dd.amax(),
                    merit_before: merit,
                    merit_after: merit_t,
                    accepted: true,
                });
                if ratio >= EXPAND && dd.amax() >= 0.5 * radius {
                    radius = (2.0 * radius).min(1e3);
                }
                u = ut;
                r = rn;
            }
            None => {
                log.push(IterationLog {
                    iter,
                    objective: r.f,
                    violation: vmax,
                    penalty: mu,
                    radius,
                    step,
                    merit_before: merit,
                    merit_after: merit,
                    accepted: false,
                });
                radius = 0.25 * step.min(radius);
                if radius < MIN_RADIUS {
                    status = if vmax <= opts.tol {
                        SolveStatus::Converged
                    } else {
                        SolveStatus::Infeasible
                    };
                    break;
                }
            }
        }
    }
    finish(problem, &ev, status, u, r, iterations, start, log)
}

fn vec_amax(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Powell-damped BFGS update keeping `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-300 || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs {
        1.0
    } else {
        0.8 * sbs / (sbs - sy)
    };
    let rv = y * theta + &bs * (1.0 - theta);
    let srv = s.dot(&rv);
    if srv <= 1e-300 || !srv.is_finite() {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &rv * rv.transpose() / srv;
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &NlpProblem,
    ev: &Evaluator,
    status: SolveStatus,
    u: Vec<f64>,
    r: Reduced,
    iterations: usize,
    start: usize,
    log: Vec<IterationLog>,
) -> SolveResult {
    let x = problem.full_point(&u);
    let c = problem.constraints(&x, ev);
    let eq_violation = c[..problem.n_eq()].iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let ineq_violation = violation_max(&r.g);
    let nc = problem.n_controls;
    SolveResult {
        status,
        controls: u.chunks(nc.max(1)).map(|c| c.to_vec()).collect(),
        moments: r.moments,
        objective: r.f,
        iterations,
        eq_violation,
        ineq_violation,
        start,
        log,
    }
}
