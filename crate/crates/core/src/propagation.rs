//! Augmented basis construction and exact moment propagation.
//!
//! The dynamics `x⁺ = f(x, u, ω, t)` is lifted to an augmented state `z`
//! whose update is affine in `z` with coefficients depending on controls,
//! noise and time. Starting from the basis functions the problem needs
//! (states used by obstacles, goal and cost), every state monomial that
//! shows up in the image of a basis function is itself added to the basis
//! until the set is closed. For `x⁺ = x + v cos θ, θ⁺ = θ + ω` this yields
//! `[x, cos θ, sin θ]`. When a state multiplies a trig term, as in
//! `x⁺ = x + v cos θ` with state `v`, the product `v cos θ` becomes a basis
//! element of its own.
//!
//! Moments of `z` of all orders up to `α_max` are stacked after a leading
//! constant `1`, so one step is an affine map `m(t+1) = A(u_t, t) [1; m(t)]`.

use std::collections::HashMap;

use thiserror::Error;

use crate::expr::{
    grevlex_monomials, trig_of_linear, ExprError, Factor, Monomial, MtpExpression, NoiseEnv,
    SymbolId, SymbolTable, SymbolTag, Valuation,
};
use crate::rv::ScalarDistribution;

const MAX_BASIS: usize = 64;
const MAX_ELEMENT_DEGREE: u32 = 32;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("state `{state}` with update `{update}` does not close: {reason}")]
    Closure {
        state: String,
        update: String,
        reason: String,
    },
    #[error("augmented basis grew beyond {MAX_BASIS} elements; the dynamics has no finite mixed-trigonometric lifting")]
    BasisTooLarge,
    #[error("`{0}` is not expressible in the augmented basis")]
    NotRepresentable(String),
    #[error("no initial distribution for state `{0}`")]
    MissingInitial(String),
    #[error("moment order must be at least 1")]
    ZeroOrder,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Discrete-time stochastic dynamics `x⁺ = f(x, u, ω, t)`.
#[derive(Debug, Clone)]
pub struct DynamicsSpec {
    pub table: SymbolTable,
    pub states: Vec<SymbolId>,
    /// Right-hand sides, aligned with `states`.
    pub updates: Vec<MtpExpression>,
    pub controls: Vec<SymbolId>,
    pub noises: NoiseEnv,
}

impl DynamicsSpec {
    fn update_of(&self, sym: SymbolId) -> &MtpExpression {
        let i = self.states.iter().position(|&s| s == sym).expect("not a state");
        &self.updates[i]
    }

    fn state_pos(&self, sym: SymbolId) -> usize {
        self.states.iter().position(|&s| s == sym).expect("not a state")
    }

    fn is_state(&self, sym: SymbolId) -> bool {
        self.table.tag(sym) == SymbolTag::State
    }

    /// One exact step of the original dynamics (used by Monte Carlo).
    /// `v` holds current state, control, noise and time values.
    pub fn step(&self, v: &Valuation, out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.updates) {
            *o = f.evaluate(v);
        }
    }
}

/// Basis functions of the augmented state; each is a product of state
/// factors such as `x`, `cos θ` or `v·sin θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBasis {
    elements: Vec<Monomial>,
}

/// Basis functions needed to express the given expressions: every state used
/// polynomially contributes itself, every state used inside a trig factor
/// contributes its cosine and sine.
pub fn basis_seeds<'a>(
    dynamics: &DynamicsSpec,
    exprs: impl IntoIterator<Item = &'a MtpExpression>,
) -> Vec<Monomial> {
    let mut seeds = Vec::new();
    for e in exprs {
        for t in e.terms() {
            for f in t.monomial.factors() {
                if !dynamics.is_state(f.sym) {
                    continue;
                }
                if f.poly > 0 {
                    seeds.push(Monomial::factor(f.sym, 1, 0, 0));
                }
                if f.cos + f.sin > 0 {
                    seeds.push(Monomial::factor(f.sym, 0, 1, 0));
                    seeds.push(Monomial::factor(f.sym, 0, 0, 1));
                }
            }
        }
    }
    seeds
}

impl AugmentedBasis {
    /// Closes `seeds` under the dynamics.
    pub fn build(dynamics: &DynamicsSpec, seeds: &[Monomial]) -> Result<Self, PropagationError> {
        let mut elements: Vec<Monomial> = Vec::new();
        for s in seeds {
            if !s.is_one() && !elements.contains(s) {
                elements.push(s.clone());
            }
        }
        let mut i = 0;
        while i < elements.len() {
            let image = state_image(dynamics, &elements[i])?;
            for t in image.terms() {
                let (state_part, _) = t.monomial.split(|s| dynamics.is_state(s));
                if !state_part.is_one() && !elements.contains(&state_part) {
                    if elements.len() == MAX_BASIS || state_part.degree() > MAX_ELEMENT_DEGREE {
                        return Err(PropagationError::BasisTooLarge);
                    }
                    elements.push(state_part);
                }
            }
            i += 1;
        }
        elements.sort_by_cached_key(|m| order_key(dynamics, m));
        Ok(Self { elements })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[Monomial] {
        &self.elements
    }

    pub fn label(&self, i: usize, table: &SymbolTable) -> String {
        MtpExpression::monomial(self.elements[i].clone(), 1.0)
            .display(table)
            .to_string()
    }

    /// State monomial of a basis monomial `z^γ`.
    pub fn to_state_monomial(&self, gamma: &[u32]) -> Monomial {
        let mut m = Monomial::one();
        for (e, &g) in self.elements.iter().zip(gamma) {
            for _ in 0..g {
                m = m.mul(e);
            }
        }
        m
    }

    /// Writes a state monomial as a basis monomial `z^γ`, preferring the
    /// earliest basis elements. `None` if no decomposition exists.
    pub fn express(&self, m: &Monomial) -> Option<Vec<u32>> {
        let mut gamma = vec![0; self.len()];
        if self.decompose(m, 0, &mut gamma) {
            Some(gamma)
        } else {
            None
        }
    }

    fn decompose(&self, m: &Monomial, start: usize, gamma: &mut [u32]) -> bool {
        if m.is_one() {
            return true;
        }
        for k in start..self.len() {
            if let Some(rest) = divide(m, &self.elements[k]) {
                gamma[k] += 1;
                if self.decompose(&rest, k, gamma) {
                    return true;
                }
                gamma[k] -= 1;
            }
        }
        false
    }

    /// Values of the basis functions at a state valuation.
    pub fn evaluate(&self, v: &Valuation, out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.elements) {
            *o = e.eval(v);
        }
    }
}

fn divide(m: &Monomial, d: &Monomial) -> Option<Monomial> {
    let mut rest = Vec::new();
    for f in m.factors() {
        match d.get(f.sym) {
            Some(g) => {
                if g.poly > f.poly || g.cos > f.cos || g.sin > f.sin {
                    return None;
                }
                rest.push(Factor {
                    sym: f.sym,
                    poly: f.poly - g.poly,
                    cos: f.cos - g.cos,
                    sin: f.sin - g.sin,
                });
            }
            None => rest.push(*f),
        }
    }
    if d.factors().iter().any(|g| m.get(g.sym).is_none()) {
        return None;
    }
    Some(Monomial::from_factors(rest))
}

fn order_key(dynamics: &DynamicsSpec, m: &Monomial) -> Vec<(usize, u8)> {
    let mut key = Vec::new();
    let mut fs: Vec<&Factor> = m.factors().iter().collect();
    fs.sort_by_key(|f| dynamics.state_pos(f.sym));
    for f in fs {
        let p = dynamics.state_pos(f.sym);
        key.extend(std::iter::repeat_n((p, 0), f.poly.into()));
        key.extend(std::iter::repeat_n((p, 1), f.cos.into()));
        key.extend(std::iter::repeat_n((p, 2), f.sin.into()));
    }
    key
}

/// `g(f(x, u, ω, t))` for a basis function `g`, as an expression in states,
/// controls, noise and time.
fn state_image(dynamics: &DynamicsSpec, element: &Monomial) -> Result<MtpExpression, PropagationError> {
    let mut image = MtpExpression::constant(1.0);
    for f in element.factors() {
        let update = dynamics.update_of(f.sym);
        if f.poly > 0 {
            image = image.mul(&update.pow(f.poly.into()));
        }
        if f.cos + f.sin > 0 {
            let (c, s) = trig_of_linear(update).map_err(|e| PropagationError::Closure {
                state: dynamics.table.name(f.sym).to_string(),
                update: update.display(&dynamics.table).to_string(),
                reason: e.to_string(),
            })?;
            image = image.mul(&c.pow(f.cos.into())).mul(&s.pow(f.sin.into()));
        }
    }
    Ok(image)
}

/// Index of every basis monomial of order `0..=max_order` in the stacked
/// moment vector `[1; m_1; ...; m_max]`, grevlex-sorted within each order.
#[derive(Debug, Clone)]
pub struct MomentLayout {
    n: usize,
    max_order: u32,
    monomials: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    block_start: Vec<usize>,
}

impl MomentLayout {
    pub fn new(n: usize, max_order: u32) -> Self {
        let mut monomials = Vec::new();
        let mut block_start = Vec::new();
        for d in 0..=max_order {
            block_start.push(monomials.len());
            monomials.extend(grevlex_monomials(n, d));
        }
        block_start.push(monomials.len());
        let index = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self {
            n,
            max_order,
            monomials,
            index,
            block_start,
        }
    }

    pub fn basis_len(&self) -> usize {
        self.n
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    /// Length of the stacked vector including the leading constant.
    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    /// Number of moment variables per step (constant excluded).
    pub fn moment_count(&self) -> usize {
        self.monomials.len() - 1
    }

    pub fn index_of(&self, gamma: &[u32]) -> Option<usize> {
        self.index.get(gamma).copied()
    }

    pub fn monomial(&self, i: usize) -> &[u32] {
        &self.monomials[i]
    }

    /// Stacked index range of the order-`d` block.
    pub fn block(&self, d: u32) -> std::ops::Range<usize> {
        self.block_start[d as usize]..self.block_start[d as usize + 1]
    }

    /// Stacked index of `γ` with one unit removed from its last nonzero
    /// entry, and that entry's position. Used for product recurrences.
    pub fn parent(&self, i: usize) -> Option<(usize, usize)> {
        let g = &self.monomials[i];
        let k = g.iter().rposition(|&e| e > 0)?;
        let mut p = g.clone();
        p[k] -= 1;
        Some((self.index[&p], k))
    }

    /// Values of all stacked monomials from basis values.
    pub fn monomial_values(&self, z: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for i in 1..self.len() {
            let (p, k) = self.parent(i).unwrap();
            out[i] = out[p] * z[k];
        }
    }

    pub fn label(&self, i: usize, basis: &AugmentedBasis, table: &SymbolTable) -> String {
        let m = basis.to_state_monomial(&self.monomials[i]);
        if m.is_one() {
            return "1".into();
        }
        MtpExpression::monomial(m, 1.0).display(table).to_string()
    }
}

/// One nonzero entry of the stacked transition matrix.
#[derive(Debug, Clone)]
pub struct Entry {
    /// Moment index (stacked index minus one).
    pub row: usize,
    /// Stacked column index; `0` is the constant.
    pub col: usize,
    terms: std::ops::Range<usize>,
}

/// The affine moment map `m(t+1) = A(u_t, t)[1; m(t)]` with entries stored as
/// sparse combinations of control/time monomials.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub layout: MomentLayout,
    table: SymbolTable,
    controls: Vec<SymbolId>,
    time: Option<SymbolId>,
    coef_monomials: Vec<Monomial>,
    entries: Vec<Entry>,
    term_coef: Vec<f64>,
    term_mono: Vec<usize>,
}

/// Numeric `A(u_t, t)` and optionally `∂A/∂u_j` for each entry.
#[derive(Debug, Clone)]
pub struct StepMatrix {
    pub values: Vec<f64>,
    /// Row-major `entries × controls`; empty unless requested.
    pub grads: Vec<f64>,
}

impl MomentSystem {
    pub fn build(
        dynamics: &DynamicsSpec,
        basis: &AugmentedBasis,
        max_order: u32,
    ) -> Result<Self, PropagationError> {
        if max_order == 0 {
            return Err(PropagationError::ZeroOrder);
        }
        let layout = MomentLayout::new(basis.len(), max_order);
        let mut ext = dynamics.table.clone();
        let z: Vec<SymbolId> = (0..basis.len())
            .map(|k| ext.declare(&format!("__z{k}"), SymbolTag::Basis))
            .collect::<Result<_, _>>()?;

        // images of z_k as affine forms in z
        let mut z_images = Vec::with_capacity(basis.len());
        for e in basis.elements() {
            let image = state_image(dynamics, e)?;
            let mut terms = Vec::new();
            for t in image.terms() {
                let (state_part, rest) = t.monomial.split(|s| dynamics.is_state(s));
                let zpart = if state_part.is_one() {
                    Monomial::one()
                } else {
                    let k = basis
                        .elements()
                        .iter()
                        .position(|b| *b == state_part)
                        .ok_or_else(|| {
                            PropagationError::NotRepresentable(
                                MtpExpression::monomial(state_part.clone(), 1.0)
                                    .display(&dynamics.table)
                                    .to_string(),
                            )
                        })?;
                    Monomial::factor(z[k], 1, 0, 0)
                };
                terms.push((zpart.mul(&rest), t.coefficient));
            }
            z_images.push(MtpExpression::from_terms(terms));
        }

        let mut coef_index: HashMap<Monomial, usize> = HashMap::new();
        let mut sys = Self {
            layout: layout.clone(),
            table: dynamics.table.clone(),
            controls: dynamics.controls.clone(),
            time: dynamics.table.time(),
            coef_monomials: Vec::new(),
            entries: Vec::new(),
            term_coef: Vec::new(),
            term_mono: Vec::new(),
        };

        let mut prev: Vec<MtpExpression> = vec![MtpExpression::constant(1.0)];
        for d in 1..=max_order {
            let block = layout.block(d);
            let prev_start = layout.block(d - 1).start;
            let mut cur = Vec::with_capacity(block.len());
            for i in block.clone() {
                let (p, k) = layout.parent(i).unwrap();
                let image = prev[p - prev_start].mul(&z_images[k]);
                sys.push_row(i - 1, &image, &ext, dynamics, &z, &mut coef_index)?;
                cur.push(image);
            }
            prev = cur;
        }
        Ok(sys)
    }

    fn push_row(
        &mut self,
        row: usize,
        image: &MtpExpression,
        ext: &SymbolTable,
        dynamics: &DynamicsSpec,
        z: &[SymbolId],
        coef_index: &mut HashMap<Monomial, usize>,
    ) -> Result<(), PropagationError> {
        let expected = image.expect_noise(ext, &dynamics.noises)?;
        let is_z = |s: SymbolId| ext.tag(s) == SymbolTag::Basis;
        let mut cols: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
        for t in expected.terms() {
            let (zpart, rest) = t.monomial.split(is_z);
            let mut gamma = vec![0u32; z.len()];
            for f in zpart.factors() {
                gamma[(f.sym - z[0]) as usize] = f.poly.into();
            }
            let col = self.layout.index_of(&gamma).expect("image order exceeds row order");
            let next = coef_index.len();
            let ci = *coef_index.entry(rest.clone()).or_insert(next);
            if ci == self.coef_monomials.len() {
                self.coef_monomials.push(rest);
            }
            cols.entry(col).or_default().push((ci, t.coefficient));
        }
        let mut cols: Vec<_> = cols.into_iter().collect();
        cols.sort_by_key(|c| c.0);
        for (col, terms) in cols {
            let start = self.term_coef.len();
            for (ci, c) in terms {
                self.term_mono.push(ci);
                self.term_coef.push(c);
            }
            self.entries.push(Entry {
                row,
                col,
                terms: start..self.term_coef.len(),
            });
        }
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn controls(&self) -> &[SymbolId] {
        &self.controls
    }

    /// Symbolic form of an entry, in control and time symbols.
    pub fn entry_expression(&self, e: &Entry) -> MtpExpression {
        MtpExpression::from_terms(
            e.terms
                .clone()
                .map(|k| (self.coef_monomials[self.term_mono[k]].clone(), self.term_coef[k])),
        )
    }

    /// Symbolic matrix `A(row, col)` restricted to stacked index ranges.
    pub fn symbolic_block(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Vec<Vec<MtpExpression>> {
        let mut out = vec![vec![MtpExpression::zero(); cols.len()]; rows.len()];
        for e in &self.entries {
            let r = e.row + 1;
            if rows.contains(&r) && cols.contains(&e.col) {
                out[r - rows.start][e.col - cols.start] = self.entry_expression(e);
            }
        }
        out
    }

    fn valuation(&self, controls: &[f64], time: f64) -> Valuation {
        let mut v = Valuation::zeros(self.table.len());
        for (&c, &x) in self.controls.iter().zip(controls) {
            v.set(c, x);
        }
        if let Some(t) = self.time {
            v.set(t, time);
        }
        v
    }

    /// Evaluates all entries at the given controls and time.
    pub fn evaluate_step(&self, controls: &[f64], time: f64, with_grad: bool) -> StepMatrix {
        let v = self.valuation(controls, time);
        let mono: Vec<f64> = self.coef_monomials.iter().map(|m| m.eval(&v)).collect();
        let values = self
            .entries
            .iter()
            .map(|e| {
                e.terms
                    .clone()
                    .map(|k| self.term_coef[k] * mono[self.term_mono[k]])
                    .sum()
            })
            .collect();
        let nc = self.controls.len();
        let mut grads = Vec::new();
        if with_grad {
            let dmono: Vec<f64> = self
                .coef_monomials
                .iter()
                .flat_map(|m| self.controls.iter().map(|&c| m.partial(c, &v)).collect::<Vec<_>>())
                .collect();
            grads = vec![0.0; self.entries.len() * nc];
            for (i, e) in self.entries.iter().enumerate() {
                for k in e.terms.clone() {
                    let c = self.term_coef[k];
                    let mi = self.term_mono[k];
                    for j in 0..nc {
                        grads[i * nc + j] += c * dmono[mi * nc + j];
                    }
                }
            }
        }
        StepMatrix { values, grads }
    }

    /// `A [1; m]` for a moment vector without its constant.
    pub fn apply(&self, a: &StepMatrix, m: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.moment_count()];
        for (e, &val) in self.entries.iter().zip(&a.values) {
            let x = if e.col == 0 { 1.0 } else { m[e.col - 1] };
            out[e.row] += val * x;
        }
        out
    }

    /// One propagation step.
    pub fn propagate(&self, m: &[f64], controls: &[f64], time: f64) -> Vec<f64> {
        self.apply(&self.evaluate_step(controls, time, false), m)
    }
}

/// Moments of the basis at time zero from independent per-state
/// distributions.
pub fn initial_moments(
    dynamics: &DynamicsSpec,
    basis: &AugmentedBasis,
    layout: &MomentLayout,
    init: &HashMap<SymbolId, ScalarDistribution>,
) -> Result<Vec<f64>, PropagationError> {
    let mut out = Vec::with_capacity(layout.moment_count());
    for i in 1..layout.len() {
        let m = basis.to_state_monomial(layout.monomial(i));
        let mut val = 1.0;
        for f in m.factors() {
            let dist = init
                .get(&f.sym)
                .ok_or_else(|| PropagationError::MissingInitial(dynamics.table.name(f.sym).into()))?;
            val *= dist.mixed_trig_moment(f.key()).map_err(ExprError::from)?;
        }
        out.push(val);
    }
    Ok(out)
}
