//! The deterministic trajectory optimization problem over controls and
//! moment vectors.
//!
//! Variables are laid out as `[u_0, ..., u_{T-1}, m(0), ..., m(T)]`, where
//! each `m(t)` holds every moment of order `1..=α_max` of the augmented
//! basis. Equalities pin `m(0)` to the initial moments and enforce
//! `m(t+1) = A(u_t, t)[1; m(t)]`. Inequalities are the VP constraint sets of
//! every obstacle at steps `1..=T` (optionally `0`) and of the goal at `T`; control
//! bounds are simple variable bounds.
//!
//! Because the equality Jacobian with respect to the moments is unit lower
//! block-triangular, the moments are an explicit function of the controls.
//! [`NlpProblem::reduced`] evaluates that reduced problem together with
//! forward sensitivities, which is what the solver works with.

mod qp;
mod sqp;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::{ExprError, Monomial, MtpExpression, SymbolId, SymbolTag, Valuation};
use crate::propagation::{
    basis_seeds, initial_moments, AugmentedBasis, MomentSystem, PropagationError, StepMatrix,
};
use crate::risk::{expected_poly, LinearForm, RiskError, VpConstraints};
use crate::scenario::Scenario;

pub use qp::{solve_elastic_qp, QpProblem, QpSolution};
pub use sqp::{solve, IterationLog, NlpSolver, SolveResult, SolveStatus, SolverOptions, Sqp};

#[derive(Debug, Error)]
pub enum NlpError {
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("cost term `{0}` is not expressible in the propagated moments")]
    Cost(String),
}

/// `coef(u_t, t) · m[moment]`, or `coef(u_t, t)` when `moment` is `None`.
#[derive(Debug, Clone)]
struct CostTerm {
    moment: Option<usize>,
    coef: MtpExpression,
}

/// Four VP inequalities on one region at one step.
#[derive(Debug, Clone)]
pub struct RiskBlock {
    pub name: String,
    pub step: usize,
    pub vp: VpConstraints,
    pub ep: LinearForm,
    pub ep2: LinearForm,
}

#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub name: String,
    pub basis: AugmentedBasis,
    pub system: MomentSystem,
    pub m0: Vec<f64>,
    pub horizon: usize,
    pub n_controls: usize,
    pub bounds: Vec<(f64, f64)>,
    /// Initial control guess, flattened per step.
    pub guess: Vec<f64>,
    pub risk_blocks: Vec<RiskBlock>,
    pub labels: Vec<String>,
    times: Vec<f64>,
    stage_cost: Vec<CostTerm>,
    terminal_cost: Vec<CostTerm>,
    controls: Vec<SymbolId>,
    time: Option<SymbolId>,
    n_symbols: usize,
}

/// Reduced problem at a control sequence.
#[derive(Debug, Clone)]
pub struct Reduced {
    pub f: f64,
    pub g: Vec<f64>,
    pub moments: Vec<Vec<f64>>,
    /// Present when derivatives were requested.
    pub grad: Vec<f64>,
    pub jac: DMatrix<f64>,
}

impl NlpProblem {
    pub fn assemble(s: &Scenario) -> Result<Self, NlpError> {
        let table = s.table();
        let basis = AugmentedBasis::build(&s.dynamics, &basis_seeds(&s.dynamics, s.basis_expressions()))?;
        let system = MomentSystem::build(&s.dynamics, &basis, s.max_order)?;
        let layout = &system.layout;
        let m0 = initial_moments(&s.dynamics, &basis, layout, &s.initial)?;
        let horizon = s.horizon();
        let times: Vec<f64> = (0..=horizon).map(|k| s.time_at(k)).collect();

        let mut risk_blocks = Vec::new();
        let first = if s.file.constrain_initial_step { 0 } else { 1 };
        for step in first..=horizon {
            for r in &s.obstacles {
                let (ep, ep2) = expected_poly(r, table, &s.dynamics.noises, &basis, layout, times[step])?;
                risk_blocks.push(RiskBlock {
                    name: r.name.clone(),
                    step,
                    vp: VpConstraints::obstacle(s.file.delta),
                    ep,
                    ep2,
                });
            }
        }
        if let Some(g) = &s.goal {
            let (ep, ep2) = expected_poly(g, table, &s.dynamics.noises, &basis, layout, times[horizon])?;
            risk_blocks.push(RiskBlock {
                name: g.name.clone(),
                step: horizon,
                vp: VpConstraints::goal(s.file.delta_goal),
                ep,
                ep2,
            });
        }

        let cost = |e: &MtpExpression| -> Result<Vec<CostTerm>, NlpError> {
            let e = e.expect_noise(table, &s.dynamics.noises)?;
            let mut groups: BTreeMap<Option<usize>, Vec<(Monomial, f64)>> = BTreeMap::new();
            for t in e.terms() {
                let (state, rest) = t.monomial.split(|x| table.tag(x) == SymbolTag::State);
                let moment = if state.is_one() {
                    None
                } else {
                    let label = || MtpExpression::monomial(state.clone(), 1.0).display(table).to_string();
                    let gamma = basis.express(&state).ok_or_else(|| NlpError::Cost(label()))?;
                    Some(layout.index_of(&gamma).ok_or_else(|| NlpError::Cost(label()))? - 1)
                };
                groups.entry(moment).or_default().push((rest, t.coefficient));
            }
            Ok(groups
                .into_iter()
                .map(|(moment, terms)| CostTerm {
                    moment,
                    coef: MtpExpression::from_terms(terms),
                })
                .collect())
        };
        let stage_cost = cost(&s.stage_cost)?;
        let terminal_cost = cost(&s.terminal_cost)?;

        let labels = (1..layout.len()).map(|i| layout.label(i, &basis, table)).collect();
        Ok(Self {
            name: s.file.name.clone(),
            m0,
            horizon,
            n_controls: s.dynamics.controls.len(),
            bounds: s.bounds.clone(),
            guess: (0..horizon).flat_map(|_| s.guess.iter().copied()).collect(),
            risk_blocks,
            labels,
            times,
            stage_cost,
            terminal_cost,
            controls: s.dynamics.controls.clone(),
            time: table.time(),
            n_symbols: table.len(),
            basis,
            system,
        })
    }

    pub fn n_moments(&self) -> usize {
        self.system.layout.moment_count()
    }

    pub fn n_control_vars(&self) -> usize {
        self.horizon * self.n_controls
    }

    pub fn n_vars(&self) -> usize {
        self.n_control_vars() + (self.horizon + 1) * self.n_moments()
    }

    pub fn n_eq(&self) -> usize {
        (self.horizon + 1) * self.n_moments()
    }

    pub fn n_ineq(&self) -> usize {
        self.risk_blocks.len() * VpConstraints::COUNT
    }

    pub fn n_constraints(&self) -> usize {
        self.n_eq() + self.n_ineq()
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.times[k]
    }

    fn moment_offset(&self, t: usize) -> usize {
        self.n_control_vars() + t * self.n_moments()
    }

    fn controls_at<'a>(&self, u: &'a [f64], t: usize) -> &'a [f64] {
        &u[t * self.n_controls..(t + 1) * self.n_controls]
    }

    /// Full variable vector from controls, with moments propagated forward.
    pub fn full_point(&self, u: &[f64]) -> Vec<f64> {
        let mut x = u.to_vec();
        for m in self.simulate(u) {
            x.extend(m);
        }
        x
    }

    /// Moment trajectory `m(0..=T)` under the given controls.
    pub fn simulate(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let mut ms = Vec::with_capacity(self.horizon + 1);
        ms.push(self.m0.clone());
        for t in 0..self.horizon {
            let next = self
                .system
                .propagate(&ms[t], self.controls_at(u, t), self.times[t]);
            ms.push(next);
        }
        ms
    }

    fn valuation(&self, ut: &[f64], time: f64) -> Valuation {
        let mut v = Valuation::zeros(self.n_symbols);
        for (&c, &x) in self.controls.iter().zip(ut) {
            v.set(c, x);
        }
        if let Some(t) = self.time {
            v.set(t, time);
        }
        v
    }

    /// Cost terms at one step; adds gradients into `du` and `dm` when given.
    fn cost_at(
        &self,
        terms: &[CostTerm],
        ut: &[f64],
        time: f64,
        m: &[f64],
        mut du: Option<&mut [f64]>,
        mut dm: Option<&mut [f64]>,
    ) -> f64 {
        if terms.is_empty() {
            return 0.0;
        }
        let v = self.valuation(ut, time);
        let mut total = 0.0;
        for term in terms {
            let w = term.moment.map_or(1.0, |i| m[i]);
            let c = if let Some(du) = du.as_deref_mut() {
                let mut g = vec![0.0; self.n_symbols];
                let c = term.coef.accumulate_gradient(&v, 1.0, &mut g);
                for (d, &sym) in du.iter_mut().zip(&self.controls) {
                    *d += w * g[sym as usize];
                }
                c
            } else {
                term.coef.evaluate(&v)
            };
            if let (Some(dm), Some(i)) = (dm.as_deref_mut(), term.moment) {
                dm[i] += c;
            }
            total += c * w;
        }
        total
    }

    /// Objective at a full variable vector.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let (u, ms) = self.split(x);
        let mut f = 0.0;
        for t in 0..self.horizon {
            f += self.cost_at(&self.stage_cost, self.controls_at(u, t), self.times[t], ms[t], None, None);
        }
        let none: &[f64] = &[];
        f + self.cost_at(&self.terminal_cost, none, self.times[self.horizon], ms[self.horizon], None, None)
    }

    pub fn objective_gradient(&self, x: &[f64]) -> Vec<f64> {
        let (u, ms) = self.split(x);
        let mut grad = vec![0.0; self.n_vars()];
        let nm = self.n_moments();
        let (gu, gm) = grad.split_at_mut(self.n_control_vars());
        for t in 0..self.horizon {
            let nc = self.n_controls;
            self.cost_at(
                &self.stage_cost,
                self.controls_at(u, t),
                self.times[t],
                ms[t],
                Some(&mut gu[t * nc..(t + 1) * nc]),
                Some(&mut gm[t * nm..(t + 1) * nm]),
            );
        }
        let t = self.horizon;
        self.cost_at(
            &self.terminal_cost,
            &[],
            self.times[t],
            ms[t],
            None,
            Some(&mut gm[t * nm..(t + 1) * nm]),
        );
        grad
    }

    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], Vec<&'a [f64]>) {
        let nu = self.n_control_vars();
        let nm = self.n_moments();
        let ms = (0..=self.horizon)
            .map(|t| &x[nu + t * nm..nu + (t + 1) * nm])
            .collect();
        (&x[..nu], ms)
    }

    /// Inequality values `g(m) ≤ 0` from a moment trajectory.
    pub fn inequalities(&self, ms: &[Vec<f64>]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.n_ineq());
        for b in &self.risk_blocks {
            let m = &ms[b.step];
            g.extend(b.vp.values(b.ep.eval(m), b.ep2.eval(m)));
        }
        g
    }

    /// All constraint values at a full point: equalities first, then
    /// inequalities.
    pub fn constraints(&self, x: &[f64], ev: &Evaluator) -> Vec<f64> {
        let (u, ms) = self.split(x);
        let mut c = Vec::with_capacity(self.n_constraints());
        c.extend(ms[0].iter().zip(&self.m0).map(|(a, b)| a - b));
        for t in 0..self.horizon {
            let a = ev.step(t, self.controls_at(u, t));
            let next = self.system.apply(&a, ms[t]);
            c.extend(ms[t + 1].iter().zip(&next).map(|(a, b)| a - b));
        }
        let owned: Vec<Vec<f64>> = ms.iter().map(|m| m.to_vec()).collect();
        c.extend(self.inequalities(&owned));
        c
    }

    /// Sparse constraint Jacobian as `(row, col, value)` triplets, rows in
    /// the order of [`NlpProblem::constraints`].
    pub fn jacobian(&self, x: &[f64], ev: &Evaluator) -> Vec<(usize, usize, f64)> {
        let (u, ms) = self.split(x);
        let nm = self.n_moments();
        let nc = self.n_controls;
        let mut jac = Vec::new();
        for i in 0..nm {
            jac.push((i, self.moment_offset(0) + i, 1.0));
        }
        for t in 0..self.horizon {
            let a = ev.step(t, self.controls_at(u, t));
            let row0 = (t + 1) * nm;
            let mut du: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for (k, e) in self.system.entries().iter().enumerate() {
                let w = if e.col == 0 { 1.0 } else { ms[t][e.col - 1] };
                if e.col > 0 {
                    jac.push((row0 + e.row, self.moment_offset(t) + e.col - 1, -a.values[k]));
                }
                for j in 0..nc {
                    *du.entry((e.row, j)).or_insert(0.0) -= a.grads[k * nc + j] * w;
                }
            }
            for ((r, j), v) in du {
                jac.push((row0 + r, t * nc + j, v));
            }
            for i in 0..nm {
                jac.push((row0 + i, self.moment_offset(t + 1) + i, 1.0));
            }
        }
        let mut row = self.n_eq();
        for b in &self.risk_blocks {
            let m = ms[b.step];
            let grads = b.vp.gradients(b.ep.eval(m));
            for gk in grads {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &(i, c) in &b.ep.coeffs {
                    *acc.entry(i).or_insert(0.0) += gk[0] * c;
                }
                for &(i, c) in &b.ep2.coeffs {
                    *acc.entry(i).or_insert(0.0) += gk[1] * c;
                }
                for (i, v) in acc {
                    if v != 0.0 {
                        jac.push((row, self.moment_offset(b.step) + i, v));
                    }
                }
                row += 1;
            }
        }
        jac.sort_by_key(|&(r, c, _)| (r, c));
        jac
    }

    /// Objective, inequalities and, if requested, their derivatives with
    /// respect to the controls, with moments eliminated.
    pub fn reduced(&self, u: &[f64], ev: &Evaluator, derivs: bool) -> Reduced {
        let nm = self.n_moments();
        let nc = self.n_controls;
        let nu = self.n_control_vars();
        let mut ms = vec![self.m0.clone()];
        // sens[t] is nm x nu, row-major
        let mut sens: Vec<Vec<f64>> = vec![vec![0.0; if derivs { nm * nu } else { 0 }]];
        for t in 0..self.horizon {
            let a = ev.step(t, self.controls_at(u, t));
            ms.push(self.system.apply(&a, &ms[t]));
            if derivs {
                let prev = &sens[t];
                let mut next = vec![0.0; nm * nu];
                // only the columns of u_0..u_{t-1} are nonzero in prev
                for (k, e) in self.system.entries().iter().enumerate() {
                    let r = e.row * nu;
                    if e.col > 0 {
                        let val = a.values[k];
                        let p = (e.col - 1) * nu;
                        for j in 0..t * nc {
                            next[r + j] += val * prev[p + j];
                        }
                    }
                    let w = if e.col == 0 { 1.0 } else { ms[t][e.col - 1] };
                    for j in 0..nc {
                        next[r + t * nc + j] += a.grads[k * nc + j] * w;
                    }
                }
                sens.push(next);
            }
        }

        let mut f = 0.0;
        let mut grad = vec![0.0; if derivs { nu } else { 0 }];
        let mut dm = vec![0.0; nm];
        let add_moment_grad = |grad: &mut [f64], dm: &[f64], s: &[f64]| {
            for (i, &d) in dm.iter().enumerate() {
                if d != 0.0 {
                    for (g, &x) in grad.iter_mut().zip(&s[i * nu..(i + 1) * nu]) {
                        *g += d * x;
                    }
                }
            }
        };
        for t in 0..self.horizon {
            let ut = self.controls_at(u, t);
            if derivs {
                dm.iter_mut().for_each(|d| *d = 0.0);
                f += self.cost_at(
                    &self.stage_cost,
                    ut,
                    self.times[t],
                    &ms[t],
                    Some(&mut grad[t * nc..(t + 1) * nc]),
                    Some(&mut dm),
                );
                add_moment_grad(&mut grad, &dm, &sens[t]);
            } else {
                f += self.cost_at(&self.stage_cost, ut, self.times[t], &ms[t], None, None);
            }
        }
        let t = self.horizon;
        if derivs {
            dm.iter_mut().for_each(|d| *d = 0.0);
            f += self.cost_at(&self.terminal_cost, &[], self.times[t], &ms[t], None, Some(&mut dm));
            add_moment_grad(&mut grad, &dm, &sens[t]);
        } else {
            f += self.cost_at(&self.terminal_cost, &[], self.times[t], &ms[t], None, None);
        }

        let g = self.inequalities(&ms);
        let mut jac = DMatrix::zeros(if derivs { g.len() } else { 0 }, nu);
        if derivs {
            let mut row = 0;
            for b in &self.risk_blocks {
                let s = &sens[b.step];
                let mut dep = vec![0.0; nu];
                let mut dep2 = vec![0.0; nu];
                for (forms, out) in [(&b.ep, &mut dep), (&b.ep2, &mut dep2)] {
                    for &(i, c) in &forms.coeffs {
                        for (o, &x) in out.iter_mut().zip(&s[i * nu..(i + 1) * nu]) {
                            *o += c * x;
                        }
                    }
                }
                for gk in b.vp.gradients(b.ep.eval(&ms[b.step])) {
                    for j in 0..nu {
                        jac[(row, j)] = gk[0] * dep[j] + gk[1] * dep2[j];
                    }
                    row += 1;
                }
            }
        }
        Reduced {
            f,
            g,
            moments: ms,
            grad,
            jac,
        }
    }
}

/// Control bit patterns and the matrix evaluated at them.
type CachedStep = (Vec<u64>, Rc<StepMatrix>);

/// Evaluates and caches `A(u_t, t)` and `∂A/∂u_t` per step, keyed by the
/// exact control values. Not shared between threads.
pub struct Evaluator<'a> {
    problem: &'a NlpProblem,
    cache: RefCell<Vec<Option<CachedStep>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a NlpProblem) -> Self {
        Self {
            problem,
            cache: RefCell::new(vec![None; problem.horizon]),
        }
    }

    pub fn step(&self, t: usize, ut: &[f64]) -> Rc<StepMatrix> {
        let key: Vec<u64> = ut.iter().map(|x| x.to_bits()).collect();
        if let Some((k, a)) = &self.cache.borrow()[t] {
            if *k == key {
                return a.clone();
            }
        }
        let a = Rc::new(
            self.problem
                .system
                .evaluate_step(ut, self.problem.times[t], true),
        );
        self.cache.borrow_mut()[t] = Some((key, a.clone()));
        a
    }
}
