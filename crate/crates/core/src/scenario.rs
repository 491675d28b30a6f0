//! Scenario files: a TOML description of a planning problem and its
//! compiled form.
//!
//! ```toml
//! name = "example"
//! horizon = 10
//! time_step = 0.1
//! delta = 0.1
//! delta_goal = 0.1
//!
//! [[state]]
//! name = "x"
//! update = "x + 0.1*v*cos(th)"
//! initial = { kind = "uniform", lo = -0.1, hi = 0.1 }
//!
//! [[control]]
//! name = "v"
//! bounds = [-2.0, 2.0]
//!
//! [[noise]]
//! name = "w"
//! dist = { kind = "gaussian", mean = 0.0, variance = 0.001 }
//!
//! [[obstacle]]
//! name = "disk"
//! poly = "(x - 0.5)^2 + (y - w)^2 - 0.3^2"
//!
//! [goal]
//! poly = "(x - 1)^2 + (y - 1)^2 - 0.1"
//!
//! [cost]
//! stage = "v^2"
//! ```
//!
//! Expressions may use the reserved time symbol `t`, which takes the value
//! `k * time_step` at step `k`. Noise symbols appearing in state updates are
//! redrawn independently at every step; noise symbols appearing in regions
//! describe the obstacle or goal uncertainty.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse, ExprError, MtpExpression, NoiseEnv, SymbolId, SymbolTable, SymbolTag};
use crate::propagation::DynamicsSpec;
use crate::risk::{RegionRole, UncertainRegion};
use crate::rv::{RvError, ScalarDistribution};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("{context} (line {line}, column {col}): {error}")]
    Expr {
        context: String,
        line: usize,
        col: usize,
        error: ExprError,
    },
    #[error("{context}: {error}")]
    Distribution { context: String, error: RvError },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn default_time_step() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDecl {
    pub name: String,
    pub update: String,
    pub initial: ScalarDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    /// Initial guess; defaults to zero or the midpoint of the bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseDecl {
    pub name: String,
    pub dist: ScalarDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDecl {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub poly: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostDecl {
    /// Stage cost `l(x_t, u_t, ω_t, t)`, summed over `t = 0..T-1`.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stage: String,
    /// Terminal cost `l_f(x_T)`.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub terminal: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverDecl {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_radius: Option<f64>,
}

/// On-disk scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub horizon: usize,
    #[serde(default = "default_time_step")]
    pub time_step: f64,
    pub delta: f64,
    pub delta_goal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_order: Option<u32>,
    /// Also impose obstacle constraints at `t = 0`, where the moments are
    /// fixed by the initial distribution.
    #[serde(default, skip_serializing_if = "is_false")]
    pub constrain_initial_step: bool,
    #[serde(rename = "state")]
    pub states: Vec<StateDecl>,
    #[serde(rename = "control", default)]
    pub controls: Vec<ControlDecl>,
    #[serde(rename = "noise", default)]
    pub noises: Vec<NoiseDecl>,
    #[serde(rename = "obstacle", default)]
    pub obstacles: Vec<RegionDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<RegionDecl>,
    #[serde(default)]
    pub cost: CostDecl,
    /// Extra state expressions whose moments should be propagated, for
    /// scenarios without regions or cost.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub track: Vec<String>,
    #[serde(default)]
    pub solver: SolverDecl,
}

impl ScenarioFile {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

/// Compiled scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub dynamics: DynamicsSpec,
    pub initial: HashMap<SymbolId, ScalarDistribution>,
    pub obstacles: Vec<UncertainRegion>,
    pub goal: Option<UncertainRegion>,
    pub stage_cost: MtpExpression,
    pub terminal_cost: MtpExpression,
    pub tracked: Vec<MtpExpression>,
    pub bounds: Vec<(f64, f64)>,
    pub guess: Vec<f64>,
    /// Noise symbols of the dynamics, in declaration order.
    pub dynamics_noises: Vec<SymbolId>,
    /// Noise symbols of the regions, in declaration order.
    pub region_noises: Vec<SymbolId>,
    pub max_order: u32,
}

impl PartialEq for Scenario {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
            && self.dynamics.table == other.dynamics.table
            && self.dynamics.updates == other.dynamics.updates
            && self.initial == other.initial
            && self.obstacles == other.obstacles
            && self.goal == other.goal
            && self.stage_cost == other.stage_cost
            && self.terminal_cost == other.terminal_cost
            && self.tracked == other.tracked
            && self.bounds == other.bounds
            && self.guess == other.guess
            && self.max_order == other.max_order
    }
}

/// 1-based line and column of byte offset `pos` in `text`.
fn line_col(text: &str, pos: usize) -> (usize, usize) {
    let before = &text[..pos.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

struct Compiler<'a> {
    text: Option<&'a str>,
    table: SymbolTable,
}

impl Compiler<'_> {
    fn expr(&self, src: &str, context: impl Into<String>) -> Result<MtpExpression, ScenarioError> {
        parse(src, &self.table).map_err(|source| {
            let col_in = match &source {
                ExprError::Parse { col, .. } | ExprError::UnknownSymbol { col, .. } => *col,
                _ => 1,
            };
            // locate the literal in the document; fall back to the expression itself
            let (line, col) = self
                .text
                .and_then(|t| t.find(src).map(|p| line_col(t, p)))
                .map_or((0, col_in), |(l, c)| (l, c + col_in - 1));
            ScenarioError::Expr {
                context: context.into(),
                line,
                col,
                error: source,
            }
        })
    }
}

impl Scenario {
    /// Parses and compiles TOML text.
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)?;
        Self::compile_with_source(file, Some(text))
    }

    pub fn compile(file: ScenarioFile) -> Result<Self, ScenarioError> {
        Self::compile_with_source(file, None)
    }

    fn compile_with_source(file: ScenarioFile, text: Option<&str>) -> Result<Self, ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if file.horizon == 0 {
            return invalid("horizon must be at least 1".into());
        }
        for (k, d) in [("delta", file.delta), ("delta_goal", file.delta_goal)] {
            if !(d > 0.0 && d <= 1.0) {
                return invalid(format!("{k} must lie in (0, 1], got {d}"));
            }
        }
        if !(file.time_step.is_finite() && file.time_step > 0.0) {
            return invalid("time_step must be positive".into());
        }
        if file.states.is_empty() {
            return invalid("at least one state is required".into());
        }

        let mut table = SymbolTable::with_time();
        let declare = |table: &mut SymbolTable, name: &str, tag| {
            let valid = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid || matches!(name, "cos" | "sin" | "pi") {
                return Err(ScenarioError::Invalid(format!("`{name}` is not a valid symbol name")));
            }
            table.declare(name, tag).map_err(|_| {
                ScenarioError::Invalid(if name == crate::expr::TIME_SYMBOL {
                    "`t` is reserved for time".into()
                } else {
                    format!("symbol `{name}` declared twice")
                })
            })
        };
        let states: Vec<SymbolId> = file
            .states
            .iter()
            .map(|s| declare(&mut table, &s.name, SymbolTag::State))
            .collect::<Result<_, _>>()?;
        let controls: Vec<SymbolId> = file
            .controls
            .iter()
            .map(|c| declare(&mut table, &c.name, SymbolTag::Control))
            .collect::<Result<_, _>>()?;
        let noise_ids: Vec<SymbolId> = file
            .noises
            .iter()
            .map(|n| declare(&mut table, &n.name, SymbolTag::Noise))
            .collect::<Result<_, _>>()?;

        let mut noises = NoiseEnv::new();
        for (n, &id) in file.noises.iter().zip(&noise_ids) {
            let d = n.dist.validated().map_err(|source| ScenarioError::Distribution {
                context: format!("noise `{}`", n.name),
                error: source,
            })?;
            noises.insert(id, d);
        }
        let mut initial = HashMap::new();
        for (s, &id) in file.states.iter().zip(&states) {
            let d = s.initial.validated().map_err(|source| ScenarioError::Distribution {
                context: format!("initial distribution of `{}`", s.name),
                error: source,
            })?;
            initial.insert(id, d);
        }

        let c = Compiler { text, table };
        let updates: Vec<MtpExpression> = file
            .states
            .iter()
            .map(|s| c.expr(&s.update, format!("update of `{}`", s.name)))
            .collect::<Result<_, _>>()?;
        let region = |d: &RegionDecl, role: RegionRole, idx: usize| -> Result<UncertainRegion, ScenarioError> {
            let name = if d.name.is_empty() {
                match role {
                    RegionRole::Obstacle => format!("obstacle{}", idx + 1),
                    RegionRole::Goal => "goal".into(),
                }
            } else {
                d.name.clone()
            };
            let polynomial = c.expr(&d.poly, format!("region `{name}`"))?;
            let r = UncertainRegion {
                name,
                polynomial,
                role,
            };
            r.check_symbols(&c.table)
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            if r.state_degree(&c.table) == 0 {
                return Err(ScenarioError::Invalid(format!(
                    "region `{}` does not depend on any state",
                    r.name
                )));
            }
            Ok(r)
        };
        let obstacles: Vec<UncertainRegion> = file
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, d)| region(d, RegionRole::Obstacle, i))
            .collect::<Result<_, _>>()?;
        let goal = file
            .goal
            .as_ref()
            .map(|d| region(d, RegionRole::Goal, 0))
            .transpose()?;
        let opt_expr = |s: &str, ctx: &str| {
            if s.trim().is_empty() {
                Ok(MtpExpression::zero())
            } else {
                c.expr(s, ctx)
            }
        };
        let stage_cost = opt_expr(&file.cost.stage, "stage cost")?;
        let terminal_cost = opt_expr(&file.cost.terminal, "terminal cost")?;
        let tracked = file
            .track
            .iter()
            .enumerate()
            .map(|(i, t)| c.expr(t, format!("tracked expression {}", i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let table = c.table;
        if let Some(e) = tracked
            .iter()
            .find(|e| e.symbols().iter().any(|&s| table.tag(s) != SymbolTag::State))
        {
            return invalid(format!(
                "tracked expression `{}` may only depend on states",
                e.display(&table)
            ));
        }
        if terminal_cost
            .symbols()
            .iter()
            .any(|&s| table.tag(s) == SymbolTag::Control)
        {
            return invalid("terminal cost may not depend on controls".into());
        }
        let used_in = |exprs: &[&MtpExpression]| -> HashSet<SymbolId> {
            exprs.iter().flat_map(|e| e.symbols()).collect()
        };
        let dyn_syms = used_in(&updates.iter().collect::<Vec<_>>());
        let mut region_exprs: Vec<&MtpExpression> = obstacles.iter().map(|r| &r.polynomial).collect();
        if let Some(g) = &goal {
            region_exprs.push(&g.polynomial);
        }
        let region_syms = used_in(&region_exprs);
        let cost_syms = used_in(&[&stage_cost, &terminal_cost]);
        let mut dynamics_noises = Vec::new();
        let mut region_noises = Vec::new();
        for &id in &noise_ids {
            let (a, b) = (dyn_syms.contains(&id), region_syms.contains(&id));
            if a && b {
                return invalid(format!(
                    "noise `{}` is used both in the dynamics and in a region",
                    table.name(id)
                ));
            }
            if a || cost_syms.contains(&id) {
                dynamics_noises.push(id);
            }
            if b {
                region_noises.push(id);
            }
        }

        let mut bounds = Vec::new();
        let mut guess = Vec::new();
        for ctl in &file.controls {
            let (lo, hi) = ctl
                .bounds
                .map_or((f64::NEG_INFINITY, f64::INFINITY), |[a, b]| (a, b));
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return invalid(format!("control `{}` has empty bounds", ctl.name));
            }
            let g = ctl.guess.unwrap_or(if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                0.0f64.clamp(lo, hi)
            });
            bounds.push((lo, hi));
            guess.push(g.clamp(lo, hi));
        }

        let state_deg = |e: &MtpExpression| e.degree_in(|s| table.tag(s) == SymbolTag::State);
        let region_order = region_exprs.iter().map(|e| 2 * state_deg(e)).max().unwrap_or(0);
        let cost_order = tracked
            .iter()
            .chain([&stage_cost, &terminal_cost])
            .map(state_deg)
            .max()
            .unwrap_or(0);
        let needed = region_order.max(cost_order).max(1);
        let max_order = match file.max_order {
            Some(m) if m < needed => {
                return invalid(format!(
                    "max_order = {m} is below the order {needed} required by the regions and cost"
                ))
            }
            Some(m) => m,
            None => needed,
        };

        let dynamics = DynamicsSpec {
            table,
            states,
            updates,
            controls,
            noises,
        };
        Ok(Self {
            file,
            dynamics,
            initial,
            obstacles,
            goal,
            stage_cost,
            terminal_cost,
            tracked,
            bounds,
            guess,
            dynamics_noises,
            region_noises,
            max_order,
        })
    }

    pub fn table(&self) -> &SymbolTable {
        &self.dynamics.table
    }

    pub fn horizon(&self) -> usize {
        self.file.horizon
    }

    /// Value of the time symbol at step `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        k as f64 * self.file.time_step
    }

    pub fn to_toml(&self) -> String {
        self.file.to_toml()
    }

    /// Region expressions whose state usage seeds the augmented basis.
    pub fn basis_expressions(&self) -> Vec<&MtpExpression> {
        let mut v: Vec<&MtpExpression> = self.obstacles.iter().map(|r| &r.polynomial).collect();
        if let Some(g) = &self.goal {
            v.push(&g.polynomial);
        }
        v.push(&self.stage_cost);
        v.push(&self.terminal_cost);
        v.extend(&self.tracked);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = r#"
name = "unicycle"
horizon = 3
time_step = 0.1
delta = 0.1
delta_goal = 0.2

[[state]]
name = "x"
update = "x + v*cos(th)"
initial = { kind = "uniform", lo = -0.1, hi = 0.1 }

[[state]]
name = "th"
update = "th + w"
initial = { kind = "point", value = 0.0 }

[[control]]
name = "v"
bounds = [-1.0, 3.0]

[[noise]]
name = "w"
dist = { kind = "beta", a = 2.0, b = 3.0, lo = -0.1, hi = 0.1 }

[[noise]]
name = "r"
dist = { kind = "gaussian", mean = 0.3, variance = 0.01 }

[[obstacle]]
name = "wall"
poly = "(x - 1 - t)^2 - r^2"

[goal]
poly = "(x - 2)^2 - 0.04"

[cost]
stage = "v^2"
"#;

    #[test]
    fn compiles() {
        let s = Scenario::from_toml(SRC).unwrap();
        assert_eq!(s.max_order, 4);
        assert_eq!(s.bounds, vec![(-1.0, 3.0)]);
        assert_eq!(s.guess, vec![1.0]);
        assert_eq!(s.dynamics_noises.len(), 1);
        assert_eq!(s.region_noises.len(), 1);
        assert!((s.time_at(3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn round_trip_is_identity() {
        let s = Scenario::from_toml(SRC).unwrap();
        let again = Scenario::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, again);
        assert_eq!(again.to_toml(), s.to_toml());
    }

    #[test]
    fn located_expression_error() {
        let bad = SRC.replace("th + w\"", "th + w +\"");
        match Scenario::from_toml(&bad) {
            Err(ScenarioError::Expr { line, col, .. }) => {
                assert_eq!(line, 15);
                assert_eq!(col, 19);
            }
            other => panic!("{other:?}"),
        }
        let bad = SRC.replace("x + v*cos(th)", "x + q*cos(th)");
        assert!(matches!(
            Scenario::from_toml(&bad),
            Err(ScenarioError::Expr {
                error: ExprError::UnknownSymbol { .. },
                ..
            })
        ));
    }

    #[test]
    fn toml_errors_carry_location() {
        let e = Scenario::from_toml("name = \"a\"\nhorizon = [").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn invalid_values() {
        assert!(Scenario::from_toml(&SRC.replace("delta = 0.1", "delta = 0.0")).is_err());
        assert!(Scenario::from_toml(&SRC.replace("name = \"x\"", "name = \"t\"")).is_err());
        assert!(Scenario::from_toml(&SRC.replace("hi = 0.1 }\n\n[[noise]]", "hi = -0.2 }\n\n[[noise]]")).is_err());
        let shared = SRC.replace("th + w\"", "th + r\"");
        assert!(Scenario::from_toml(&shared).is_err());
        let low = SRC.replace("delta_goal = 0.2", "delta_goal = 0.2\nmax_order = 3");
        assert!(Scenario::from_toml(&low).is_err());
    }
}
