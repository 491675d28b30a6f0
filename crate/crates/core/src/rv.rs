//! Univariate distributions and their polynomial, trigonometric and
//! mixed-trigonometric-polynomial moments.
//!
//! Trigonometric moments are assembled from the characteristic function
//! `Φ(t) = E[exp(i t ω)]` and its derivatives: writing `cos` and `sin` as
//! complex exponentials turns `E[ω^a cos^c(ω) sin^s(ω)]` into a finite
//! binomial sum of `Φ^{(a)}` evaluated at integer arguments.

use std::collections::HashMap;
use std::fmt;
use std::sync::{OnceLock, RwLock};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{gauss_jacobi, gauss_legendre};

/// Default node count of the Beta characteristic-function quadrature.
pub const DEFAULT_BETA_NODES: u32 = 128;

/// Imaginary residue allowed in an assembled trigonometric moment, relative
/// to the magnitude of the sum (floored at one).
pub const RESIDUE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RvError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("trigonometric moment {key} has imaginary residue {residue:e}")]
    Residue { key: TrigMomentKey, residue: f64 },
    #[error("trigonometric moment needs cos_pow + sin_pow >= 1")]
    ZeroTrigOrder,
}

/// A univariate distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScalarDistribution {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gaussian {
        mean: f64,
        variance: f64,
    },
    Beta {
        a: f64,
        b: f64,
        #[serde(default)]
        lo: f64,
        #[serde(default = "one")]
        hi: f64,
        #[serde(default = "default_nodes", skip_serializing_if = "is_default_nodes")]
        nodes: u32,
    },
    #[serde(rename = "point")]
    PointMass {
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_nodes() -> u32 {
    DEFAULT_BETA_NODES
}

fn is_default_nodes(n: &u32) -> bool {
    *n == DEFAULT_BETA_NODES
}

/// Exponents of `ω^poly cos^cos(ω) sin^sin(ω)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TrigMomentKey {
    pub poly_pow: u32,
    pub cos_pow: u32,
    pub sin_pow: u32,
}

impl TrigMomentKey {
    pub const fn new(poly_pow: u32, cos_pow: u32, sin_pow: u32) -> Self {
        Self {
            poly_pow,
            cos_pow,
            sin_pow,
        }
    }

    pub fn order(&self) -> u32 {
        self.poly_pow + self.cos_pow + self.sin_pow
    }
}

impl fmt::Display for TrigMomentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.poly_pow, self.cos_pow, self.sin_pow)
    }
}

impl ScalarDistribution {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self, RvError> {
        Self::Uniform { lo, hi }.validated()
    }

    pub fn gaussian(mean: f64, variance: f64) -> Result<Self, RvError> {
        Self::Gaussian { mean, variance }.validated()
    }

    pub fn beta(a: f64, b: f64, lo: f64, hi: f64) -> Result<Self, RvError> {
        Self::Beta {
            a,
            b,
            lo,
            hi,
            nodes: DEFAULT_BETA_NODES,
        }
        .validated()
    }

    pub fn point(value: f64) -> Self {
        Self::PointMass { value }
    }

    /// Returns `self` if the type invariants hold.
    pub fn validated(self) -> Result<Self, RvError> {
        self.validate().map(|_| self)
    }

    pub fn validate(&self) -> Result<(), RvError> {
        let bad = |msg: String| Err(RvError::InvalidDistribution(msg));
        match *self {
            Self::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("uniform needs finite lo < hi, got [{lo}, {hi}]"));
                }
            }
            Self::Gaussian { mean, variance } => {
                if !(mean.is_finite() && variance.is_finite() && variance >= 0.0) {
                    return bad(format!(
                        "gaussian needs finite mean and variance >= 0, got ({mean}, {variance})"
                    ));
                }
            }
            Self::Beta {
                a,
                b,
                lo,
                hi,
                nodes,
            } => {
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return bad(format!("beta needs a, b > 0, got ({a}, {b})"));
                }
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("beta support needs lo < hi, got [{lo}, {hi}]"));
                }
                if nodes == 0 {
                    return bad("beta quadrature needs at least one node".into());
                }
            }
            Self::PointMass { value } => {
                if !value.is_finite() {
                    return bad(format!("point mass must be finite, got {value}"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (self.raw_moment(2) - m * m).max(0.0)
    }

    /// `true` when all mass sits on one point.
    pub fn is_deterministic(&self) -> bool {
        match *self {
            Self::PointMass { .. } => true,
            Self::Gaussian { variance, .. } => variance == 0.0,
            _ => false,
        }
    }

    /// Closed interval containing all mass, or `None` when unbounded.
    pub fn support(&self) -> Option<(f64, f64)> {
        match *self {
            Self::Uniform { lo, hi } | Self::Beta { lo, hi, .. } => Some((lo, hi)),
            Self::PointMass { value } => Some((value, value)),
            Self::Gaussian { mean, variance: 0.0 } => Some((mean, mean)),
            Self::Gaussian { .. } => None,
        }
    }

    /// Probability density (not defined for degenerate kinds, which return 0).
    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            Self::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Self::Gaussian { mean, variance } => {
                if variance == 0.0 {
                    return 0.0;
                }
                let z = x - mean;
                (-0.5 * z * z / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
            }
            Self::Beta { a, b, lo, hi, .. } => {
                let w = hi - lo;
                let u = (x - lo) / w;
                if u <= 0.0 || u >= 1.0 {
                    return 0.0;
                }
                let ln_b = statrs::function::gamma::ln_gamma(a)
                    + statrs::function::gamma::ln_gamma(b)
                    - statrs::function::gamma::ln_gamma(a + b);
                ((a - 1.0) * u.ln() + (b - 1.0) * (1.0 - u).ln() - ln_b).exp() / w
            }
            Self::PointMass { .. } => 0.0,
        }
    }

    /// `E[ω^order]`.
    pub fn raw_moment(&self, order: u32) -> f64 {
        if order == 0 {
            return 1.0;
        }
        let n = order as i32;
        match *self {
            Self::Uniform { lo, hi } => {
                // Expand around the midpoint; avoids cancellation for narrow intervals.
                let c = 0.5 * (lo + hi);
                let h = 0.5 * (hi - lo);
                (0..=order)
                    .step_by(2)
                    .map(|k| {
                        binomial(order, k) * c.powi(n - k as i32) * h.powi(k as i32)
                            / (k as f64 + 1.0)
                    })
                    .sum()
            }
            Self::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                (0..=order)
                    .step_by(2)
                    .map(|k| {
                        binomial(order, k)
                            * mean.powi(n - k as i32)
                            * sd.powi(k as i32)
                            * double_factorial_odd(k)
                    })
                    .sum()
            }
            Self::Beta { a, b, lo, hi, .. } => {
                let w = hi - lo;
                let mut unit = 1.0; // E[U^k] for U ~ Beta(a, b) on [0, 1]
                let mut total = 0.0;
                for k in 0..=order {
                    if k > 0 {
                        let j = (k - 1) as f64;
                        unit *= (a + j) / (a + b + j);
                    }
                    total += binomial(order, k) * lo.powi(n - k as i32) * w.powi(k as i32) * unit;
                }
                total
            }
            Self::PointMass { value } => value.powi(n),
        }
    }

    /// Characteristic function `Φ(t) = E[exp(i t ω)]`.
    pub fn char_fn(&self, t: f64) -> Complex64 {
        self.char_fn_derivative(0, t)
    }

    /// `d^n Φ / dt^n` at `t`, i.e. `E[(i ω)^n exp(i t ω)]`.
    pub fn char_fn_derivative(&self, n: u32, t: f64) -> Complex64 {
        match *self {
            Self::Uniform { lo, hi } => {
                let c = 0.5 * (lo + hi);
                let h = 0.5 * (hi - lo);
                let tau = t * h;
                let shift = Complex64::from_polar(1.0, t * c);
                let ic = Complex64::new(0.0, c);
                let ih = Complex64::new(0.0, h);
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..=n {
                    acc += binomial(n, k) * ic.powu(n - k) * ih.powu(k) * symmetric_unit_moment(k, tau);
                }
                shift * acc
            }
            Self::Gaussian { mean, variance } => {
                // Exponential tilting: E[f(ω) e^{itω}] = Φ(t) E[f(ω + i σ² t)].
                let phi = Complex64::from_polar((-0.5 * variance * t * t).exp(), mean * t);
                if n == 0 {
                    return phi;
                }
                let shifted = Complex64::new(mean, variance * t);
                let sd = variance.sqrt();
                let mut poly = Complex64::new(0.0, 0.0);
                for k in (0..=n).step_by(2) {
                    poly += binomial(n, k)
                        * shifted.powu(n - k)
                        * sd.powi(k as i32)
                        * double_factorial_odd(k);
                }
                phi * Complex64::i().powu(n) * poly
            }
            Self::Beta {
                a,
                b,
                lo,
                hi,
                nodes,
            } => {
                let rule = gauss_jacobi(nodes as usize, b - 1.0, a - 1.0);
                let w = hi - lo;
                let i = Complex64::i();
                rule.nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(s, wt)| {
                        let x = lo + w * 0.5 * (1.0 + s);
                        wt * (i * x).powu(n) * Complex64::from_polar(1.0, t * x)
                    })
                    .sum()
            }
            Self::PointMass { value } => {
                Complex64::new(0.0, value).powu(n) * Complex64::from_polar(1.0, t * value)
            }
        }
    }

    /// `E[cos^cos_pow(ω) sin^sin_pow(ω)]`.
    pub fn trig_moment(&self, cos_pow: u32, sin_pow: u32) -> Result<f64, RvError> {
        if cos_pow + sin_pow == 0 {
            return Err(RvError::ZeroTrigOrder);
        }
        self.mixed_trig_moment(TrigMomentKey::new(0, cos_pow, sin_pow))
    }

    /// `E[ω^a cos^c(ω) sin^s(ω)]` for `key = (a, c, s)`, memoized.
    pub fn mixed_trig_moment(&self, key: TrigMomentKey) -> Result<f64, RvError> {
        if key.cos_pow == 0 && key.sin_pow == 0 {
            return Ok(self.raw_moment(key.poly_pow));
        }
        let cache_key = (DistKey::of(self), key);
        if let Some(v) = moment_cache().read().unwrap().get(&cache_key) {
            return Ok(*v);
        }
        let v = self.mixed_trig_moment_uncached(key)?;
        moment_cache().write().unwrap().insert(cache_key, v);
        Ok(v)
    }

    fn mixed_trig_moment_uncached(&self, key: TrigMomentKey) -> Result<f64, RvError> {
        let TrigMomentKey {
            poly_pow: a1,
            cos_pow: a2,
            sin_pow: a3,
        } = key;
        let mut sum = Complex64::new(0.0, 0.0);
        let mut magnitude = 0.0;
        for k1 in 0..=a2 {
            for k2 in 0..=a3 {
                let sign = if (a3 - k2) % 2 == 0 { 1.0 } else { -1.0 };
                let arg = 2.0 * f64::from(k1 + k2) - f64::from(a2) - f64::from(a3);
                let term = binomial(a2, k1)
                    * binomial(a3, k2)
                    * sign
                    * self.char_fn_derivative(a1, arg);
                magnitude += term.norm();
                sum += term;
            }
        }
        // 1 / (i^{a1+a3} 2^{a2+a3})
        let prefactor = Complex64::i().powu(a1 + a3).inv() / 2f64.powi((a2 + a3) as i32);
        let value = prefactor * sum;
        let scale = magnitude / 2f64.powi((a2 + a3) as i32);
        if value.im.abs() > RESIDUE_TOL * scale.max(1.0) {
            return Err(RvError::Residue {
                key,
                residue: value.im,
            });
        }
        Ok(value.re)
    }

    /// A draw-ready sampler for Monte Carlo use.
    pub fn sampler(&self) -> Sampler {
        match *self {
            Self::Uniform { lo, hi } => Sampler::Uniform { lo, width: hi - lo },
            Self::Gaussian { mean, variance } => {
                if variance == 0.0 {
                    Sampler::Point(mean)
                } else {
                    Sampler::Gaussian(rand_distr::Normal::new(mean, variance.sqrt()).unwrap())
                }
            }
            Self::Beta { a, b, lo, hi, .. } => Sampler::Beta {
                dist: rand_distr::Beta::new(a, b).unwrap(),
                lo,
                width: hi - lo,
            },
            Self::PointMass { value } => Sampler::Point(value),
        }
    }
}

/// Prepared sampling state for one distribution.
#[derive(Debug, Clone, Copy)]
pub enum Sampler {
    Uniform {
        lo: f64,
        width: f64,
    },
    Gaussian(rand_distr::Normal<f64>),
    Beta {
        dist: rand_distr::Beta<f64>,
        lo: f64,
        width: f64,
    },
    Point(f64),
}

impl Sampler {
    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Uniform { lo, width } => lo + width * rng.random::<f64>(),
            Sampler::Gaussian(n) => n.sample(rng),
            Sampler::Beta { dist, lo, width } => lo + width * dist.sample(rng),
            Sampler::Point(v) => *v,
        }
    }
}

/// `½ ∫_{-1}^{1} s^k e^{iτs} ds`.
fn symmetric_unit_moment(k: u32, tau: f64) -> Complex64 {
    if tau.abs() <= 4.0 {
        // Power series; terms are bounded by 4^j / j! so there is no blow-up.
        let mut acc = Complex64::new(0.0, 0.0);
        let mut coef = Complex64::new(1.0, 0.0); // (iτ)^j / j!
        let itau = Complex64::new(0.0, tau);
        for j in 0..200u32 {
            let q = k + j;
            if q.is_multiple_of(2) {
                let term = coef / (f64::from(q) + 1.0);
                acc += term;
                if j > 8 && term.norm() < 1e-18 * acc.norm().max(1e-300) {
                    break;
                }
            }
            coef = coef * itau / f64::from(j + 1);
            if coef.norm() == 0.0 {
                break;
            }
        }
        acc
    } else {
        let n = 40 + k as usize / 2 + (2.0 * tau.abs()).ceil() as usize;
        let rule = gauss_legendre(n);
        rule.nodes
            .iter()
            .zip(&rule.weights)
            .map(|(s, w)| w * s.powi(k as i32) * Complex64::from_polar(1.0, tau * s))
            .sum()
    }
}

pub(crate) fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for j in 0..k {
        r = r * f64::from(n - j) / f64::from(j + 1);
    }
    r.round()
}

/// `(k - 1)!!` for even `k` (moments of the standard normal), 0 for odd `k`.
fn double_factorial_odd(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut r = 1.0;
    let mut j = 1;
    while j < k {
        r *= f64::from(j);
        j += 2;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct DistKey {
    tag: u8,
    bits: [u64; 5],
}

impl DistKey {
    fn of(d: &ScalarDistribution) -> Self {
        match *d {
            ScalarDistribution::Uniform { lo, hi } => Self {
                tag: 0,
                bits: [lo.to_bits(), hi.to_bits(), 0, 0, 0],
            },
            ScalarDistribution::Gaussian { mean, variance } => Self {
                tag: 1,
                bits: [mean.to_bits(), variance.to_bits(), 0, 0, 0],
            },
            ScalarDistribution::Beta {
                a,
                b,
                lo,
                hi,
                nodes,
            } => Self {
                tag: 2,
                bits: [a.to_bits(), b.to_bits(), lo.to_bits(), hi.to_bits(), u64::from(nodes)],
            },
            ScalarDistribution::PointMass { value } => Self {
                tag: 3,
                bits: [value.to_bits(), 0, 0, 0, 0],
            },
        }
    }
}

type MomentCache = RwLock<HashMap<(DistKey, TrigMomentKey), f64>>;

fn moment_cache() -> &'static MomentCache {
    static CACHE: OnceLock<MomentCache> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}
