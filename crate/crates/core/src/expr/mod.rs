//! Mixed-trigonometric-polynomial (MTP) expressions over tagged symbols.
//!
//! An [`MtpExpression`] is a canonical sum of terms
//! `c · Π_k s_k^{p_k} cos^{c_k}(s_k) sin^{d_k}(s_k)`. Trigonometric factors
//! always apply to a single symbol; `cos`/`sin` of sums are rewritten with
//! the angle-sum identities when the expression is built (see [`parse`]).

mod grevlex;
mod parse;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;

use smallvec::SmallVec;
use thiserror::Error;

use crate::rv::{RvError, ScalarDistribution, TrigMomentKey};

pub use grevlex::{grevlex_cmp, grevlex_monomials};
pub use parse::{angle_sum_expand, parse, parse_tree, ExprTree};

pub type SymbolId = u32;

/// Name of the reserved time symbol.
pub const TIME_SYMBOL: &str = "t";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("parse error at column {col}: {msg}")]
    Parse { col: usize, msg: String },
    #[error("unknown symbol `{name}` at column {col}")]
    UnknownSymbol { name: String, col: usize },
    #[error("not a mixed trigonometric polynomial: {0}")]
    NonMtp(String),
    #[error("no distribution bound for noise symbol `{0}`")]
    MissingDistribution(String),
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error(transparent)]
    Moment(#[from] RvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolTag {
    State,
    Control,
    Noise,
    Time,
    /// Coordinate of an augmented basis (see `propagation`).
    Basis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Symbol {
    pub name: String,
    pub tag: SymbolTag,
}

/// Declared symbols of a scenario. Ids are dense indices into value arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymbolTable {
    symbols: Vec<Symbol>,
    by_name: HashMap<String, SymbolId>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// A table that already holds the reserved time symbol `t`.
    pub fn with_time() -> Self {
        let mut t = Self::new();
        t.declare(TIME_SYMBOL, SymbolTag::Time).unwrap();
        t
    }

    pub fn declare(&mut self, name: &str, tag: SymbolTag) -> Result<SymbolId, ExprError> {
        if self.by_name.contains_key(name) {
            return Err(ExprError::DuplicateSymbol(name.to_string()));
        }
        let id = self.symbols.len() as SymbolId;
        self.symbols.push(Symbol {
            name: name.to_string(),
            tag,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<SymbolId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: SymbolId) -> &str {
        &self.symbols[id as usize].name
    }

    pub fn tag(&self, id: SymbolId) -> SymbolTag {
        self.symbols[id as usize].tag
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn time(&self) -> Option<SymbolId> {
        self.id(TIME_SYMBOL)
            .filter(|&id| self.tag(id) == SymbolTag::Time)
    }

    pub fn ids_with_tag(&self, tag: SymbolTag) -> Vec<SymbolId> {
        (0..self.symbols.len() as SymbolId)
            .filter(|&i| self.tag(i) == tag)
            .collect()
    }
}

/// Exponents of one symbol inside a monomial: `s^poly cos^cos(s) sin^sin(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Factor {
    pub sym: SymbolId,
    pub poly: u16,
    pub cos: u16,
    pub sin: u16,
}

impl Factor {
    pub fn degree(&self) -> u32 {
        u32::from(self.poly) + u32::from(self.cos) + u32::from(self.sin)
    }

    pub fn key(&self) -> TrigMomentKey {
        TrigMomentKey::new(self.poly.into(), self.cos.into(), self.sin.into())
    }

    #[inline]
    pub fn value(&self, v: &Valuation) -> f64 {
        let i = self.sym as usize;
        let mut r = 1.0;
        if self.poly > 0 {
            r *= v.value[i].powi(i32::from(self.poly));
        }
        if self.cos > 0 {
            r *= v.cos[i].powi(i32::from(self.cos));
        }
        if self.sin > 0 {
            r *= v.sin[i].powi(i32::from(self.sin));
        }
        r
    }

    /// d/ds of the factor.
    pub fn derivative(&self, v: &Valuation) -> f64 {
        let i = self.sym as usize;
        let (x, c, s) = (v.value[i], v.cos[i], v.sin[i]);
        let (p, a, b) = (
            i32::from(self.poly),
            i32::from(self.cos),
            i32::from(self.sin),
        );
        let mut d = 0.0;
        if p > 0 {
            d += f64::from(p) * x.powi(p - 1) * c.powi(a) * s.powi(b);
        }
        if a > 0 {
            d -= f64::from(a) * x.powi(p) * c.powi(a - 1) * s.powi(b + 1);
        }
        if b > 0 {
            d += f64::from(b) * x.powi(p) * c.powi(a + 1) * s.powi(b - 1);
        }
        d
    }
}

/// Product of factors sorted by symbol id; the empty monomial is `1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial(SmallVec<[Factor; 4]>);

impl Monomial {
    pub fn one() -> Self {
        Self::default()
    }

    pub fn factor(sym: SymbolId, poly: u16, cos: u16, sin: u16) -> Self {
        let mut m = Self::one();
        if poly + cos + sin > 0 {
            m.0.push(Factor {
                sym,
                poly,
                cos,
                sin,
            });
        }
        m
    }

    /// Builds from arbitrary factors, merging repeats and dropping empty ones.
    pub fn from_factors(factors: impl IntoIterator<Item = Factor>) -> Self {
        factors
            .into_iter()
            .fold(Self::one(), |acc, f| acc.mul(&Self::factor(f.sym, f.poly, f.cos, f.sin)))
    }

    pub fn factors(&self) -> &[Factor] {
        &self.0
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(Factor::degree).sum()
    }

    pub fn get(&self, sym: SymbolId) -> Option<Factor> {
        self.0.iter().find(|f| f.sym == sym).copied()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let (a, b) = (&self.0, &other.0);
        let mut out = SmallVec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].sym.cmp(&b[j].sym) {
                Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                Ordering::Equal => {
                    out.push(Factor {
                        sym: a[i].sym,
                        poly: a[i].poly + b[j].poly,
                        cos: a[i].cos + b[j].cos,
                        sin: a[i].sin + b[j].sin,
                    });
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        Monomial(out)
    }

    /// Splits into (factors satisfying `pred`, the rest).
    pub fn split(&self, pred: impl Fn(SymbolId) -> bool) -> (Monomial, Monomial) {
        let mut yes = SmallVec::new();
        let mut no = SmallVec::new();
        for f in &self.0 {
            if pred(f.sym) {
                yes.push(*f);
            } else {
                no.push(*f);
            }
        }
        (Monomial(yes), Monomial(no))
    }

    pub fn eval(&self, v: &Valuation) -> f64 {
        self.0.iter().map(|f| f.value(v)).product()
    }

    /// Partial derivative with respect to `sym`.
    pub fn partial(&self, sym: SymbolId, v: &Valuation) -> f64 {
        let mut hit = false;
        let mut r = 1.0;
        for f in &self.0 {
            if f.sym == sym {
                hit = true;
                r *= f.derivative(v);
            } else {
                r *= f.value(v);
            }
        }
        if hit {
            r
        } else {
            0.0
        }
    }

    /// Canonical order: total degree ascending, then grevlex-descending on
    /// polynomial exponents, then on cosine and sine exponents.
    pub fn canonical_cmp(&self, other: &Monomial) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| revlex(&self.0, &other.0, |f| f.poly).reverse())
            .then_with(|| revlex(&self.0, &other.0, |f| f.cos).reverse())
            .then_with(|| revlex(&self.0, &other.0, |f| f.sin).reverse())
    }
}

/// Reverse-lexicographic comparison of one exponent channel: the monomial
/// with the *smaller* exponent in the last differing symbol is greater.
fn revlex(a: &[Factor], b: &[Factor], chan: impl Fn(&Factor) -> u16) -> Ordering {
    let (mut i, mut j) = (a.len(), b.len());
    loop {
        let fa = if i > 0 { Some(&a[i - 1]) } else { None };
        let fb = if j > 0 { Some(&b[j - 1]) } else { None };
        let (sym, ea, eb) = match (fa, fb) {
            (None, None) => return Ordering::Equal,
            (Some(x), None) => {
                i -= 1;
                (x.sym, chan(x), 0)
            }
            (None, Some(y)) => {
                j -= 1;
                (y.sym, 0, chan(y))
            }
            (Some(x), Some(y)) => match x.sym.cmp(&y.sym) {
                Ordering::Greater => {
                    i -= 1;
                    (x.sym, chan(x), 0)
                }
                Ordering::Less => {
                    j -= 1;
                    (y.sym, 0, chan(y))
                }
                Ordering::Equal => {
                    i -= 1;
                    j -= 1;
                    (x.sym, chan(x), chan(y))
                }
            },
        };
        let _ = sym;
        if ea != eb {
            return eb.cmp(&ea);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtpTerm {
    pub coefficient: f64,
    pub monomial: Monomial,
}

/// Canonical sum of [`MtpTerm`]s: sorted, merged, no zero coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MtpExpression {
    terms: Vec<MtpTerm>,
}

/// Per-symbol values with cached `cos`/`sin`, indexed by [`SymbolId`].
#[derive(Debug, Clone)]
pub struct Valuation {
    pub value: Vec<f64>,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl Valuation {
    pub fn new(values: &[f64]) -> Self {
        Self {
            value: values.to_vec(),
            cos: values.iter().map(|x| x.cos()).collect(),
            sin: values.iter().map(|x| x.sin()).collect(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(&vec![0.0; n])
    }

    pub fn set(&mut self, id: SymbolId, x: f64) {
        let i = id as usize;
        self.value[i] = x;
        let (s, c) = x.sin_cos();
        self.cos[i] = c;
        self.sin[i] = s;
    }
}

/// Distributions bound to noise symbols.
pub type NoiseEnv = HashMap<SymbolId, ScalarDistribution>;

impl MtpExpression {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::from_terms([(Monomial::one(), c)])
    }

    pub fn symbol(id: SymbolId) -> Self {
        Self::from_terms([(Monomial::factor(id, 1, 0, 0), 1.0)])
    }

    pub fn cos(id: SymbolId) -> Self {
        Self::from_terms([(Monomial::factor(id, 0, 1, 0), 1.0)])
    }

    pub fn sin(id: SymbolId) -> Self {
        Self::from_terms([(Monomial::factor(id, 0, 0, 1), 1.0)])
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        Self::from_terms([(m, c)])
    }

    /// Canonicalizing constructor; repeated monomials are summed.
    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut acc: HashMap<Monomial, f64> = HashMap::new();
        for (m, c) in terms {
            *acc.entry(m).or_insert(0.0) += c;
        }
        Self::from_map(acc)
    }

    fn from_map(acc: HashMap<Monomial, f64>) -> Self {
        let mut terms: Vec<MtpTerm> = acc
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(monomial, coefficient)| MtpTerm {
                coefficient,
                monomial,
            })
            .collect();
        terms.sort_by(|a, b| a.monomial.canonical_cmp(&b.monomial));
        Self { terms }
    }

    pub fn terms(&self) -> &[MtpTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Coefficient of the constant monomial.
    pub fn constant_term(&self) -> f64 {
        self.terms
            .iter()
            .find(|t| t.monomial.is_one())
            .map_or(0.0, |t| t.coefficient)
    }

    /// `Some(c)` if the expression is a constant.
    pub fn as_constant(&self) -> Option<f64> {
        match self.terms.as_slice() {
            [] => Some(0.0),
            [t] if t.monomial.is_one() => Some(t.coefficient),
            _ => None,
        }
    }

    pub fn symbols(&self) -> HashSet<SymbolId> {
        self.terms
            .iter()
            .flat_map(|t| t.monomial.factors().iter().map(|f| f.sym))
            .collect()
    }

    /// Symbols that occur inside a `cos` or `sin` factor.
    pub fn trig_symbols(&self) -> HashSet<SymbolId> {
        self.terms
            .iter()
            .flat_map(|t| t.monomial.factors().iter())
            .filter(|f| f.cos + f.sin > 0)
            .map(|f| f.sym)
            .collect()
    }

    /// Maximum total degree over the factors of symbols satisfying `pred`.
    pub fn degree_in(&self, pred: impl Fn(SymbolId) -> bool) -> u32 {
        self.terms
            .iter()
            .map(|t| {
                t.monomial
                    .factors()
                    .iter()
                    .filter(|f| pred(f.sym))
                    .map(Factor::degree)
                    .sum()
            })
            .max()
            .unwrap_or(0)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_terms(
            self.terms
                .iter()
                .chain(&other.terms)
                .map(|t| (t.monomial.clone(), t.coefficient)),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn scale(&self, k: f64) -> Self {
        if k == 0.0 {
            return Self::zero();
        }
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| MtpTerm {
                    coefficient: t.coefficient * k,
                    monomial: t.monomial.clone(),
                })
                .collect(),
        }
    }

    /// Distributes and merges; trig powers accumulate as exponents.
    pub fn mul(&self, other: &Self) -> Self {
        let mut acc: HashMap<Monomial, f64> =
            HashMap::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                *acc.entry(a.monomial.mul(&b.monomial)).or_insert(0.0) +=
                    a.coefficient * b.coefficient;
            }
        }
        Self::from_map(acc)
    }

    pub fn pow(&self, n: u32) -> Self {
        let mut result = Self::constant(1.0);
        let mut base = self.clone();
        let mut n = n;
        while n > 0 {
            if n & 1 == 1 {
                result = result.mul(&base);
            }
            n >>= 1;
            if n > 0 {
                base = base.mul(&base);
            }
        }
        result
    }

    pub fn evaluate(&self, v: &Valuation) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coefficient * t.monomial.eval(v))
            .sum()
    }

    /// Value and gradient; the gradient is indexed by [`SymbolId`] and has
    /// the length of `v`.
    pub fn evaluate_with_gradient(&self, v: &Valuation) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; v.value.len()];
        let value = self.accumulate_gradient(v, 1.0, &mut grad);
        (value, grad)
    }

    /// Adds `weight · ∇self` into `grad` and returns the value.
    pub fn accumulate_gradient(&self, v: &Valuation, weight: f64, grad: &mut [f64]) -> f64 {
        let mut value = 0.0;
        let mut vals: SmallVec<[f64; 8]> = SmallVec::new();
        for t in &self.terms {
            let fs = t.monomial.factors();
            vals.clear();
            vals.extend(fs.iter().map(|f| f.value(v)));
            let prod: f64 = vals.iter().product();
            value += t.coefficient * prod;
            for (k, f) in fs.iter().enumerate() {
                let others: f64 = vals
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .map(|(_, x)| x)
                    .product();
                grad[f.sym as usize] += weight * t.coefficient * f.derivative(v) * others;
            }
        }
        value
    }

    /// Replaces the listed symbols by numbers.
    pub fn substitute(&self, assign: &HashMap<SymbolId, f64>) -> Self {
        if assign.is_empty() {
            return self.clone();
        }
        Self::from_terms(self.terms.iter().map(|t| {
            let mut c = t.coefficient;
            let mut kept: SmallVec<[Factor; 4]> = SmallVec::new();
            for f in t.monomial.factors() {
                match assign.get(&f.sym) {
                    Some(&x) => {
                        c *= x.powi(f.poly.into())
                            * x.cos().powi(f.cos.into())
                            * x.sin().powi(f.sin.into());
                    }
                    None => kept.push(*f),
                }
            }
            (Monomial(kept), c)
        }))
    }

    /// Expectation over the noise symbols of `table`: each noise factor
    /// `ω^a cos^c(ω) sin^s(ω)` becomes its mixed trigonometric moment.
    /// Distinct noise symbols are independent of each other and of every
    /// other symbol.
    pub fn expect_noise(&self, table: &SymbolTable, env: &NoiseEnv) -> Result<Self, ExprError> {
        let is_noise = |s: SymbolId| table.tag(s) == SymbolTag::Noise;
        let mut out = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let (noise, rest) = t.monomial.split(is_noise);
            let mut c = t.coefficient;
            for f in noise.factors() {
                let dist = env
                    .get(&f.sym)
                    .ok_or_else(|| ExprError::MissingDistribution(table.name(f.sym).into()))?;
                c *= dist.mixed_trig_moment(f.key())?;
            }
            out.push((rest, c));
        }
        Ok(Self::from_terms(out))
    }

    pub fn display<'a>(&'a self, table: &'a SymbolTable) -> DisplayExpr<'a> {
        DisplayExpr { expr: self, table }
    }
}

/// Human-readable rendering with symbol names.
pub struct DisplayExpr<'a> {
    expr: &'a MtpExpression,
    table: &'a SymbolTable,
}

impl fmt::Display for DisplayExpr<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.expr.is_zero() {
            return write!(f, "0");
        }
        for (i, t) in self.expr.terms.iter().enumerate() {
            let c = t.coefficient;
            if i > 0 {
                write!(f, "{}", if c < 0.0 { " - " } else { " + " })?;
            } else if c < 0.0 {
                write!(f, "-")?;
            }
            let mut parts: Vec<String> = Vec::new();
            if c.abs() != 1.0 || t.monomial.is_one() {
                parts.push(format!("{}", c.abs()));
            }
            for fac in t.monomial.factors() {
                let name = self.table.name(fac.sym);
                let mut push = |base: String, p: u16| {
                    if p == 1 {
                        parts.push(base);
                    } else if p > 1 {
                        parts.push(format!("{base}^{p}"));
                    }
                };
                push(name.to_string(), fac.poly);
                push(format!("cos({name})"), fac.cos);
                push(format!("sin({name})"), fac.sin);
            }
            write!(f, "{}", parts.join("*"))?;
        }
        Ok(())
    }
}

impl std::ops::Add for &MtpExpression {
    type Output = MtpExpression;
    fn add(self, rhs: Self) -> MtpExpression {
        MtpExpression::add(self, rhs)
    }
}

impl std::ops::Sub for &MtpExpression {
    type Output = MtpExpression;
    fn sub(self, rhs: Self) -> MtpExpression {
        MtpExpression::sub(self, rhs)
    }
}

impl std::ops::Mul for &MtpExpression {
    type Output = MtpExpression;
    fn mul(self, rhs: Self) -> MtpExpression {
        MtpExpression::mul(self, rhs)
    }
}

impl std::ops::Neg for &MtpExpression {
    type Output = MtpExpression;
    fn neg(self) -> MtpExpression {
        MtpExpression::neg(self)
    }
}

const MAX_ANGLE_MULTIPLE: f64 = 16.0;

/// `(cos(arg), sin(arg))` for an argument that is a constant plus an integer
/// combination of symbols, expanded with the angle-sum
/// identities so every trig factor applies to a single symbol.
pub fn trig_of_linear(arg: &MtpExpression) -> Result<(MtpExpression, MtpExpression), ExprError> {
    let mut offset = 0.0;
    let mut parts: Vec<(SymbolId, f64)> = Vec::new();
    for t in arg.terms() {
        let fs = t.monomial.factors();
        match fs {
            [] => offset += t.coefficient,
            [f] if f.poly == 1 && f.cos == 0 && f.sin == 0 => {
                let c = t.coefficient;
                let k = c.round();
                if (c - k).abs() > 1e-12 || k.abs() > MAX_ANGLE_MULTIPLE {
                    return Err(ExprError::NonMtp(format!(
                        "trigonometric argument has coefficient {c} (only small integers supported)"
                    )));
                }
                // k·s is expanded as the sum s + s + ... (|k| times)
                for _ in 0..k.abs() as usize {
                    parts.push((f.sym, k.signum()));
                }
            }
            _ => {
                return Err(ExprError::NonMtp(
                    "trigonometric argument is not a sum of symbols".into(),
                ))
            }
        }
    }
    let mut c = MtpExpression::constant(offset.cos());
    let mut s = MtpExpression::constant(offset.sin());
    for (sym, sign) in parts {
        let cs = MtpExpression::cos(sym);
        let ss = MtpExpression::sin(sym).scale(sign);
        // cos(A + B) = cosA cosB - sinA sinB; sin(A + B) = sinA cosB + cosA sinB
        let c_new = c.mul(&cs).sub(&s.mul(&ss));
        let s_new = s.mul(&cs).add(&c.mul(&ss));
        c = c_new;
        s = s_new;
    }
    Ok((c, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SymbolTable {
        let mut t = SymbolTable::with_time();
        for n in ["x1", "x2"] {
            t.declare(n, SymbolTag::State).unwrap();
        }
        t.declare("th", SymbolTag::State).unwrap();
        t.declare("v", SymbolTag::Control).unwrap();
        t.declare("w", SymbolTag::Noise).unwrap();
        t.declare("wth", SymbolTag::Noise).unwrap();
        t
    }

    #[test]
    fn example_one_polynomial_has_three_terms() {
        let t = table();
        let e = parse("x1^2 + x2^2 - w^2", &t).unwrap();
        assert_eq!(e.len(), 3);
        assert!(parse("0", &t).unwrap().is_zero());
    }

    #[test]
    fn add_negation_is_zero_and_one_is_identity() {
        let t = table();
        let e = parse("3*x1*cos(th) - v^2 + 0.5", &t).unwrap();
        assert!(e.add(&e.neg()).is_zero());
        assert_eq!(e.mul(&MtpExpression::constant(1.0)), e);
    }

    #[test]
    fn square_of_example_one() {
        let t = table();
        let p = parse("x1^2 + x2^2 - w^2", &t).unwrap();
        let sq = p.mul(&p);
        // x1^4, x2^4, w^4, and the three cross terms
        assert_eq!(sq.len(), 6);
        let x1 = t.id("x1").unwrap();
        let top = sq
            .terms()
            .iter()
            .find(|m| m.monomial == Monomial::factor(x1, 4, 0, 0))
            .unwrap();
        assert_eq!(top.coefficient, 1.0);
    }

    #[test]
    fn expect_noise_example_one() {
        let t = table();
        let w = t.id("w").unwrap();
        let mut env = NoiseEnv::new();
        env.insert(w, ScalarDistribution::uniform(0.3, 0.4).unwrap());
        let e = parse("x1^2 + x2^2 - w^2", &t).unwrap().expect_noise(&t, &env).unwrap();
        assert!((e.constant_term() + 0.123_333_333_333_333_3).abs() < 1e-15);
        assert_eq!(e.len(), 3);
        // untouched without noise
        let q = parse("x1 + v", &t).unwrap();
        assert_eq!(q.expect_noise(&t, &env).unwrap(), q);
    }

    #[test]
    fn expect_noise_odd_trig_is_zero() {
        let t = table();
        let wth = t.id("wth").unwrap();
        let mut env = NoiseEnv::new();
        env.insert(wth, ScalarDistribution::uniform(-0.1, 0.1).unwrap());
        let e = parse("cos(wth)*sin(wth)", &t).unwrap().expect_noise(&t, &env).unwrap();
        assert!(e.constant_term().abs() < 1e-15);
    }

    #[test]
    fn missing_distribution() {
        let t = table();
        let e = parse("w*x1", &t).unwrap();
        assert!(matches!(
            e.expect_noise(&t, &NoiseEnv::new()),
            Err(ExprError::MissingDistribution(_))
        ));
    }

    #[test]
    fn gradient_of_trig_factor() {
        let t = table();
        let e = parse("x1^2*cos(th)^2*sin(th)", &t).unwrap();
        let mut vals = vec![0.0; t.len()];
        vals[t.id("x1").unwrap() as usize] = 0.7;
        vals[t.id("th").unwrap() as usize] = 0.4;
        let v = Valuation::new(&vals);
        let (f, g) = e.evaluate_with_gradient(&v);
        let h = 1e-6;
        for name in ["x1", "th"] {
            let i = t.id(name).unwrap() as usize;
            let mut a = vals.clone();
            let mut b = vals.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (e.evaluate(&Valuation::new(&a)) - e.evaluate(&Valuation::new(&b))) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{name}");
        }
        assert!((f - 0.49 * 0.4f64.cos().powi(2) * 0.4f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn substitute_partial() {
        let t = table();
        let e = parse("v*cos(th) + t^2", &t).unwrap();
        let mut a = HashMap::new();
        a.insert(t.id("t").unwrap(), 2.0);
        a.insert(t.id("th").unwrap(), 0.0);
        let s = e.substitute(&a);
        assert_eq!(s, parse("v + 4", &t).unwrap());
    }

    #[test]
    fn trig_of_linear_rejects_scaled_argument() {
        let t = table();
        let arg = parse("0.5*th", &t).unwrap();
        assert!(matches!(trig_of_linear(&arg), Err(ExprError::NonMtp(_))));
        let (c, _) = trig_of_linear(&parse("2*th", &t).unwrap()).unwrap();
        assert_eq!(c, parse("cos(th)^2 - sin(th)^2", &t).unwrap());
    }

    #[test]
    fn canonical_order_is_graded_grevlex() {
        let t = table();
        let e = parse("x2^2 + x1*x2 + x1^2 + x1 + 1", &t).unwrap();
        let x1 = t.id("x1").unwrap();
        let x2 = t.id("x2").unwrap();
        let order: Vec<Monomial> = e.terms().iter().map(|m| m.monomial.clone()).collect();
        assert_eq!(
            order,
            vec![
                Monomial::one(),
                Monomial::factor(x1, 1, 0, 0),
                Monomial::factor(x1, 2, 0, 0),
                Monomial::from_factors([
                    Factor { sym: x1, poly: 1, cos: 0, sin: 0 },
                    Factor { sym: x2, poly: 1, cos: 0, sin: 0 }
                ]),
                Monomial::factor(x2, 2, 0, 0),
            ]
        );
    }

    #[test]
    fn display_roundtrips_through_parse() {
        let t = table();
        let e = parse("-2*x1*cos(th)^2 + 0.5*v*sin(wth) - 3", &t).unwrap();
        let s = e.display(&t).to_string();
        assert_eq!(parse(&s, &t).unwrap(), e);
    }
}
