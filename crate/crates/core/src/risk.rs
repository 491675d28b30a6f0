//! Moment-based risk contours from the one-sided Vysochanskij–Petunin bound.
//!
//! For a region `{x : p(x, ω̃, t) ≤ 0}` the collision probability is at most
//! `Δ` whenever
//!
//! ```text
//! 4 (E[p²] - E[p]²) ≤ 9 Δ E[p²],   E[p]² ≥ 5/8 E[p²],   E[p] ≥ 0
//! ```
//!
//! with `E[p²] ≥ ε` guarding the cleared denominator. The goal constraint
//! bounds `Prob(p_g > 0)` by applying the same inequality to `-p_g`, which
//! flips only the sign condition to `E[p_g] ≤ 0`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, MtpExpression, NoiseEnv, SymbolId, SymbolTable, SymbolTag, Valuation};
use crate::propagation::{AugmentedBasis, MomentLayout};
use crate::rv::Sampler;

/// Denominator guard for `E[p²]`.
pub const EP2_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("region `{region}` needs moments of order {needed} but only {available} are propagated")]
    Degree {
        region: String,
        needed: u32,
        available: u32,
    },
    #[error("region `{region}` uses `{symbol}`, which is not a state, noise or time symbol")]
    InvalidSymbol { region: String, symbol: String },
    #[error("region `{region}`: `{monomial}` is not expressible in the augmented basis")]
    NotRepresentable { region: String, monomial: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionRole {
    Obstacle,
    Goal,
}

/// `{x : p(x, ω̃, t) ≤ 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainRegion {
    pub name: String,
    pub polynomial: MtpExpression,
    pub role: RegionRole,
}

impl UncertainRegion {
    pub fn check_symbols(&self, table: &SymbolTable) -> Result<(), RiskError> {
        for s in self.polynomial.symbols() {
            if !matches!(
                table.tag(s),
                SymbolTag::State | SymbolTag::Noise | SymbolTag::Time
            ) {
                return Err(RiskError::InvalidSymbol {
                    region: self.name.clone(),
                    symbol: table.name(s).into(),
                });
            }
        }
        Ok(())
    }

    /// Highest total degree in state symbols.
    pub fn state_degree(&self, table: &SymbolTable) -> u32 {
        self.polynomial
            .degree_in(|s| table.tag(s) == SymbolTag::State)
    }
}

/// `constant + Σ coeff · m[index]` over a moment vector without its constant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearForm {
    pub constant: f64,
    pub coeffs: Vec<(usize, f64)>,
}

impl LinearForm {
    pub fn eval(&self, m: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|&(i, c)| c * m[i]).sum::<f64>()
    }
}

/// `E[p]` and `E[p²]` as linear forms in the moments, with noise moments
/// and the time value substituted.
pub fn expected_poly(
    region: &UncertainRegion,
    table: &SymbolTable,
    noises: &NoiseEnv,
    basis: &AugmentedBasis,
    layout: &MomentLayout,
    time: f64,
) -> Result<(LinearForm, LinearForm), RiskError> {
    region.check_symbols(table)?;
    let needed = 2 * region.state_degree(table);
    if needed > layout.max_order() {
        return Err(RiskError::Degree {
            region: region.name.clone(),
            needed,
            available: layout.max_order(),
        });
    }
    let mut assign = HashMap::new();
    if let Some(t) = table.time() {
        assign.insert(t, time);
    }
    let p = region.polynomial.substitute(&assign);
    let ep = to_linear_form(&p.expect_noise(table, noises)?, region, table, basis, layout)?;
    let ep2 = to_linear_form(&p.mul(&p).expect_noise(table, noises)?, region, table, basis, layout)?;
    Ok((ep, ep2))
}

fn to_linear_form(
    e: &MtpExpression,
    region: &UncertainRegion,
    table: &SymbolTable,
    basis: &AugmentedBasis,
    layout: &MomentLayout,
) -> Result<LinearForm, RiskError> {
    let mut acc: HashMap<usize, f64> = HashMap::new();
    let mut constant = 0.0;
    for t in e.terms() {
        if t.monomial.is_one() {
            constant += t.coefficient;
            continue;
        }
        let not_representable = || RiskError::NotRepresentable {
            region: region.name.clone(),
            monomial: MtpExpression::monomial(t.monomial.clone(), 1.0)
                .display(table)
                .to_string(),
        };
        let gamma = basis.express(&t.monomial).ok_or_else(not_representable)?;
        let idx = layout.index_of(&gamma).ok_or_else(not_representable)?;
        *acc.entry(idx - 1).or_insert(0.0) += t.coefficient;
    }
    let mut coeffs: Vec<(usize, f64)> = acc.into_iter().filter(|(_, c)| *c != 0.0).collect();
    coeffs.sort_by_key(|c| c.0);
    Ok(LinearForm { constant, coeffs })
}

/// Deterministic VP constraint set, written as `g_k(E[p], E[p²]) ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpConstraints {
    pub role: RegionRole,
    pub delta: f64,
}

impl VpConstraints {
    pub const COUNT: usize = 4;

    pub fn obstacle(delta: f64) -> Self {
        Self {
            role: RegionRole::Obstacle,
            delta,
        }
    }

    pub fn goal(delta: f64) -> Self {
        Self {
            role: RegionRole::Goal,
            delta,
        }
    }

    /// Ratio bound, unimodality tail condition, sign condition, guard.
    pub fn values(&self, ep: f64, ep2: f64) -> [f64; 4] {
        let sign = match self.role {
            RegionRole::Obstacle => -ep,
            RegionRole::Goal => ep,
        };
        [
            4.0 * (ep2 - ep * ep) - 9.0 * self.delta * ep2,
            0.625 * ep2 - ep * ep,
            sign,
            EP2_GUARD - ep2,
        ]
    }

    /// `∂g_k/∂(E[p], E[p²])`.
    pub fn gradients(&self, ep: f64) -> [[f64; 2]; 4] {
        let dsign = match self.role {
            RegionRole::Obstacle => -1.0,
            RegionRole::Goal => 1.0,
        };
        [
            [-8.0 * ep, 4.0 - 9.0 * self.delta],
            [-2.0 * ep, 0.625],
            [dsign, 0.0],
            [0.0, -1.0],
        ]
    }

    pub fn accepts(&self, ep: f64, ep2: f64) -> bool {
        self.values(ep, ep2).iter().all(|&g| g <= 0.0)
    }
}

/// Rectangular grid over two state symbols.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn points(&self) -> Vec<(f64, f64)> {
        let lin = |(lo, hi): (f64, f64), n: usize, i: usize| {
            if n == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| (lin(self.x, self.nx, i), lin(self.y, self.ny, j))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContourPoint {
    pub x1: f64,
    pub x2: f64,
    pub mc_risk: f64,
    pub stderr: f64,
    /// VP acceptance per requested risk level.
    pub vp_safe: Vec<bool>,
}

/// Classifies deterministic grid states: Monte Carlo estimate of
/// `Prob(p ≤ 0)` over the region noise, and VP acceptance at each level in
/// `deltas`.
/// Each grid point uses its own random stream, so results do not depend on
/// the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn mc_risk_contour(
    region: &UncertainRegion,
    table: &SymbolTable,
    noises: &NoiseEnv,
    axes: (SymbolId, SymbolId),
    deltas: &[f64],
    grid: &Grid,
    samples: usize,
    seed: u64,
) -> Result<Vec<ContourPoint>, RiskError> {
    region.check_symbols(table)?;
    let p = &region.polynomial;
    let ep_expr = p.expect_noise(table, noises)?;
    let ep2_expr = p.mul(p).expect_noise(table, noises)?;
    let mut noise_syms: Vec<SymbolId> = p
        .symbols()
        .into_iter()
        .filter(|&s| table.tag(s) == SymbolTag::Noise)
        .collect();
    noise_syms.sort_unstable();
    let samplers: Vec<(SymbolId, Sampler)> = noise_syms
        .iter()
        .map(|s| {
            noises
                .get(s)
                .map(|d| (*s, d.sampler()))
                .ok_or_else(|| ExprError::MissingDistribution(table.name(*s).into()))
        })
        .collect::<Result<_, _>>()?;
    let vps: Vec<VpConstraints> = deltas.iter().map(|&d| VpConstraints::obstacle(d)).collect();
    let points = grid.points();
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(k, &(x1, x2))| {
            let mut v = Valuation::zeros(table.len());
            v.set(axes.0, x1);
            v.set(axes.1, x2);
            let (ep, ep2) = (ep_expr.evaluate(&v), ep2_expr.evaluate(&v));
            let vp_safe = vps.iter().map(|vp| vp.accepts(ep, ep2)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut hits = 0usize;
            for _ in 0..samples {
                for (s, sampler) in &samplers {
                    v.set(*s, sampler.draw(&mut rng));
                }
                if p.evaluate(&v) <= 0.0 {
                    hits += 1;
                }
            }
            let risk = hits as f64 / samples as f64;
            ContourPoint {
                x1,
                x2,
                mc_risk: risk,
                stderr: (risk * (1.0 - risk) / samples as f64).sqrt(),
                vp_safe,
            }
        })
        .collect())
}
