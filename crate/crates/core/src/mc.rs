//! Monte Carlo verification of a control sequence against the original
//! stochastic dynamics.
//!
//! Sample `i` draws from its own ChaCha stream (`seed`, stream `i`) in a
//! fixed order: initial states, then per step the region noises (unless
//! persistent), the indicators, and the dynamics noises. Samples are grouped
//! in fixed-size batches whose partial sums are combined pairwise in index
//! order, so reports do not depend on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{SymbolId, Valuation};
use crate::propagation::{basis_seeds, AugmentedBasis, MomentLayout, PropagationError};
use crate::rv::Sampler;
use crate::scenario::Scenario;

const BATCH: usize = 4096;

#[derive(Debug, Error)]
pub enum McError {
    #[error("expected {expected} control steps, got {got}")]
    ControlLength { expected: usize, got: usize },
    #[error("step {step} has {got} control values, expected {expected}")]
    ControlWidth { step: usize, expected: usize, got: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Fresh obstacle noise at every step.
    #[default]
    Redraw,
    /// One obstacle noise draw per trajectory.
    Persistent,
}

impl std::str::FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "redraw" => Ok(Self::Redraw),
            "persistent" => Ok(Self::Persistent),
            _ => Err(format!("unknown noise mode `{s}` (expected redraw or persistent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    pub samples: usize,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    /// Highest empirical moment order; defaults to the scenario's `α_max`.
    pub moment_order: Option<u32>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            seed: 0,
            noise_mode: NoiseMode::Redraw,
            moment_order: None,
        }
    }
}

/// Bernoulli frequency with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub p: f64,
    pub stderr: f64,
}

impl Estimate {
    fn from_count(hits: u64, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            p,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    /// Whether the planner constrains obstacle risk at this step.
    pub constrained: bool,
    /// Per obstacle, in scenario order.
    pub risk: Vec<Estimate>,
    /// Empirical stacked moments without the constant, grevlex layout.
    pub moments: Vec<f64>,
    pub moment_stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub scenario: String,
    pub samples: usize,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    pub delta: f64,
    pub delta_goal: f64,
    pub obstacles: Vec<String>,
    pub moment_labels: Vec<String>,
    pub goal: Option<Estimate>,
    pub steps: Vec<StepReport>,
}

/// Outcome of checking a report against the scenario's risk bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub worst_risk: f64,
    pub worst_step: usize,
    pub worst_obstacle: Option<String>,
    pub goal: Option<f64>,
}

impl McReport {
    /// Largest risk over constrained steps and obstacles.
    pub fn max_risk(&self) -> (f64, usize, Option<usize>) {
        let mut best = (0.0, 0, None);
        for s in self.steps.iter().filter(|s| s.constrained) {
            for (i, e) in s.risk.iter().enumerate() {
                if best.2.is_none() || e.p > best.0 {
                    best = (e.p, s.step, Some(i));
                }
            }
        }
        best
    }

    /// Risk bounds hold within `k` standard errors at every constrained step,
    /// and the goal is reached with probability at least `1 - Δ_goal` within
    /// `k` standard errors.
    pub fn verdict(&self, k: f64) -> Verdict {
        let mut pass = true;
        for s in self.steps.iter().filter(|s| s.constrained) {
            for e in &s.risk {
                if e.p > self.delta + k * e.stderr {
                    pass = false;
                }
            }
        }
        if let Some(g) = &self.goal {
            if g.p < 1.0 - self.delta_goal - k * g.stderr {
                pass = false;
            }
        }
        let (worst_risk, worst_step, i) = self.max_risk();
        Verdict {
            pass,
            worst_risk,
            worst_step,
            worst_obstacle: i.map(|i| self.obstacles[i].clone()),
            goal: self.goal.map(|g| g.p),
        }
    }

    /// Structured-text serialization.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report is serializable")
    }
}

/// Running sums over a group of samples.
#[derive(Debug, Clone)]
struct Acc {
    hits: Vec<u64>,
    goal: u64,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Acc {
    fn new(n_hits: usize, n_moments: usize) -> Self {
        Self {
            hits: vec![0; n_hits],
            goal: 0,
            sum: vec![0.0; n_moments],
            sq: vec![0.0; n_moments],
        }
    }

    fn merge(mut self, other: Acc) -> Acc {
        self.hits.iter_mut().zip(other.hits).for_each(|(a, b)| *a += b);
        self.goal += other.goal;
        self.sum.iter_mut().zip(other.sum).for_each(|(a, b)| *a += b);
        self.sq.iter_mut().zip(other.sq).for_each(|(a, b)| *a += b);
        self
    }
}

/// Combines partial results pairwise, preserving index order.
fn pairwise(mut parts: Vec<Acc>) -> Acc {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("nonempty")
}

/// Parent index and basis position of every stacked monomial but the
/// constant, for fast product evaluation.
fn parents(layout: &MomentLayout) -> Vec<(usize, usize)> {
    (1..layout.len()).map(|i| layout.parent(i).unwrap()).collect()
}

fn monomial_values(parents: &[(usize, usize)], z: &[f64], out: &mut [f64]) {
    out[0] = 1.0;
    for (i, &(p, k)) in parents.iter().enumerate() {
        out[i + 1] = out[p] * z[k];
    }
}

/// Sample means and standard errors of the stacked basis monomials (constant
/// excluded) over basis values `samples[i]`.
pub fn empirical_moments(samples: &[Vec<f64>], layout: &MomentLayout) -> (Vec<f64>, Vec<f64>) {
    assert!(!samples.is_empty(), "empirical moments need samples");
    let par = parents(layout);
    let mut vals = vec![0.0; layout.len()];
    let mut acc = Acc::new(0, layout.moment_count());
    for z in samples {
        monomial_values(&par, z, &mut vals);
        for (i, v) in vals[1..].iter().enumerate() {
            acc.sum[i] += v;
            acc.sq[i] += v * v;
        }
    }
    finish_moments(&acc.sum, &acc.sq, samples.len())
}

fn finish_moments(sum: &[f64], sq: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let stderr = mean
        .iter()
        .zip(sq)
        .map(|(m, q)| ((q / nf - m * m).max(0.0) / nf).sqrt())
        .collect();
    (mean, stderr)
}

struct Setup<'a> {
    s: &'a Scenario,
    controls: &'a [Vec<f64>],
    basis: AugmentedBasis,
    layout: MomentLayout,
    parents: Vec<(usize, usize)>,
    initial: Vec<(SymbolId, Sampler)>,
    dyn_noise: Vec<(SymbolId, Sampler)>,
    region_noise: Vec<(SymbolId, Sampler)>,
    first_constrained: usize,
    mode: NoiseMode,
}

impl Setup<'_> {
    fn n_obstacles(&self) -> usize {
        self.s.obstacles.len()
    }

    fn run_batch(&self, base: &ChaCha8Rng, range: std::ops::Range<usize>) -> Acc {
        let s = self.s;
        let horizon = s.horizon();
        let n_obs = self.n_obstacles();
        let nm = self.layout.moment_count();
        let mut acc = Acc::new((horizon + 1) * n_obs, (horizon + 1) * nm);
        let table = s.table();
        let mut v = Valuation::zeros(table.len());
        let mut next = vec![0.0; s.dynamics.states.len()];
        let mut z = vec![0.0; self.basis.len()];
        let mut vals = vec![0.0; self.layout.len()];
        let time = table.time();
        for i in range {
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            for (sym, d) in &self.initial {
                v.set(*sym, d.draw(&mut rng));
            }
            if self.mode == NoiseMode::Persistent {
                for (sym, d) in &self.region_noise {
                    v.set(*sym, d.draw(&mut rng));
                }
            }
            for k in 0..=horizon {
                if let Some(t) = time {
                    v.set(t, s.time_at(k));
                }
                if self.mode == NoiseMode::Redraw {
                    for (sym, d) in &self.region_noise {
                        v.set(*sym, d.draw(&mut rng));
                    }
                }
                for (j, o) in s.obstacles.iter().enumerate() {
                    if o.polynomial.evaluate(&v) <= 0.0 {
                        acc.hits[k * n_obs + j] += 1;
                    }
                }
                self.basis.evaluate(&v, &mut z);
                monomial_values(&self.parents, &z, &mut vals);
                let (sum, sq) = (&mut acc.sum[k * nm..(k + 1) * nm], &mut acc.sq[k * nm..(k + 1) * nm]);
                for (j, x) in vals[1..].iter().enumerate() {
                    sum[j] += x;
                    sq[j] += x * x;
                }
                if k == horizon {
                    if let Some(g) = &s.goal {
                        if g.polynomial.evaluate(&v) <= 0.0 {
                            acc.goal += 1;
                        }
                    }
                    break;
                }
                for (c, x) in s.dynamics.controls.iter().zip(&self.controls[k]) {
                    v.set(*c, *x);
                }
                for (sym, d) in &self.dyn_noise {
                    v.set(*sym, d.draw(&mut rng));
                }
                s.dynamics.step(&v, &mut next);
                for (st, x) in s.dynamics.states.iter().zip(&next) {
                    v.set(*st, *x);
                }
            }
        }
        acc
    }
}

/// Simulates `opts.samples` trajectories of the scenario under `controls`
/// (one vector per step).
pub fn simulate(s: &Scenario, controls: &[Vec<f64>], opts: &McOptions) -> Result<McReport, McError> {
    let horizon = s.horizon();
    if controls.len() != horizon {
        return Err(McError::ControlLength {
            expected: horizon,
            got: controls.len(),
        });
    }
    let nc = s.dynamics.controls.len();
    if let Some((step, c)) = controls.iter().enumerate().find(|(_, c)| c.len() != nc) {
        return Err(McError::ControlWidth {
            step,
            expected: nc,
            got: c.len(),
        });
    }
    if opts.samples == 0 {
        return Err(McError::NoSamples);
    }
    let basis = AugmentedBasis::build(&s.dynamics, &basis_seeds(&s.dynamics, s.basis_expressions()))?;
    let layout = MomentLayout::new(basis.len(), opts.moment_order.unwrap_or(s.max_order));
    let samplers = |ids: &[SymbolId]| -> Vec<(SymbolId, Sampler)> {
        ids.iter().map(|id| (*id, s.dynamics.noises[id].sampler())).collect()
    };
    let initial = s
        .dynamics
        .states
        .iter()
        .map(|id| (*id, s.initial[id].sampler()))
        .collect();
    let setup = Setup {
        s,
        controls,
        parents: parents(&layout),
        basis,
        layout,
        initial,
        dyn_noise: samplers(&s.dynamics_noises),
        region_noise: samplers(&s.region_noises),
        first_constrained: if s.file.constrain_initial_step { 0 } else { 1 },
        mode: opts.noise_mode,
    };

    let base = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.samples;
    let batches: Vec<Acc> = (0..n.div_ceil(BATCH))
        .into_par_iter()
        .map(|b| setup.run_batch(&base, b * BATCH..((b + 1) * BATCH).min(n)))
        .collect();
    let acc = pairwise(batches);

    let n_obs = setup.n_obstacles();
    let nm = setup.layout.moment_count();
    let steps = (0..=horizon)
        .map(|k| {
            let (moments, moment_stderr) =
                finish_moments(&acc.sum[k * nm..(k + 1) * nm], &acc.sq[k * nm..(k + 1) * nm], n);
            StepReport {
                step: k,
                time: s.time_at(k),
                constrained: k >= setup.first_constrained,
                risk: (0..n_obs)
                    .map(|j| Estimate::from_count(acc.hits[k * n_obs + j], n))
                    .collect(),
                moments,
                moment_stderr,
            }
        })
        .collect();
    let table = s.table();
    Ok(McReport {
        scenario: s.file.name.clone(),
        samples: n,
        seed: opts.seed,
        noise_mode: opts.noise_mode,
        delta: s.file.delta,
        delta_goal: s.file.delta_goal,
        obstacles: s.obstacles.iter().map(|o| o.name.clone()).collect(),
        moment_labels: (1..setup.layout.len())
            .map(|i| setup.layout.label(i, &setup.basis, table))
            .collect(),
        goal: s.goal.as_ref().map(|_| Estimate::from_count(acc.goal, n)),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(update: &str, obstacle: &str) -> Scenario {
        Scenario::from_toml(&format!(
            r#"
name = "mc"
horizon = 3
delta = 0.1
delta_goal = 0.1

[[state]]
name = "x"
update = "{update}"
initial = {{ kind = "point", value = 0.0 }}

[[control]]
name = "u"
bounds = [-1.0, 1.0]

[[noise]]
name = "w"
dist = {{ kind = "uniform", lo = -0.1, hi = 0.1 }}

[[noise]]
name = "r"
dist = {{ kind = "uniform", lo = 0.0, hi = 0.1 }}

[[obstacle]]
name = "o"
poly = "{obstacle}"

[goal]
poly = "(x - 0.3)^2 - 0.01"
"#
        ))
        .unwrap()
    }

    #[test]
    fn far_obstacle_has_zero_risk_and_inside_has_one() {
        let s = scenario("x + u", "(x - 5)^2 - 0.1 - r");
        let u = vec![vec![0.1]; 3];
        let rep = simulate(&s, &u, &McOptions { samples: 1000, ..Default::default() }).unwrap();
        assert!(rep.steps.iter().all(|st| st.risk[0].p == 0.0));
        assert_eq!(rep.goal.unwrap().p, 1.0);
        assert!(rep.verdict(3.0).pass);

        let s = scenario("x + u", "(x - 0.1)^2 - 0.5 - r");
        let rep = simulate(&s, &u, &McOptions { samples: 1000, ..Default::default() }).unwrap();
        assert!(rep.steps.iter().all(|st| st.risk[0].p == 1.0));
        assert!(!rep.verdict(3.0).pass);
    }

    #[test]
    fn independent_of_thread_count() {
        let s = scenario("x + u + w", "(x - 0.2)^2 - 0.01 - r");
        let u = vec![vec![0.1]; 3];
        let opts = McOptions {
            samples: 3 * BATCH + 17,
            seed: 11,
            ..Default::default()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate(&s, &u, &opts).unwrap());
        let b = four.install(|| simulate(&s, &u, &opts).unwrap());
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn persistent_noise_differs_from_redraw() {
        let s = scenario("x + u + w", "(x - 0.2)^2 - 0.01 - r");
        let u = vec![vec![0.1]; 3];
        let opts = McOptions {
            samples: 2000,
            seed: 3,
            ..Default::default()
        };
        let a = simulate(&s, &u, &opts).unwrap();
        let b = simulate(&s, &u, &McOptions { noise_mode: NoiseMode::Persistent, ..opts }).unwrap();
        assert_ne!(a.steps[2].risk, b.steps[2].risk);
    }

    #[test]
    fn empirical_moments_of_a_single_sample_are_powers() {
        let layout = MomentLayout::new(2, 2);
        let (m, se) = empirical_moments(&[vec![2.0, 3.0]], &layout);
        assert_eq!(m, vec![2.0, 3.0, 4.0, 6.0, 9.0]);
        assert!(se.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_wrong_control_length() {
        let s = scenario("x + u", "x - 10");
        assert!(matches!(
            simulate(&s, &[vec![0.0]], &McOptions::default()),
            Err(McError::ControlLength { expected: 3, got: 1 })
        ));
    }
}
