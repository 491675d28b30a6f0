//! Fixed-node Gauss quadrature rules.
//!
//! Nodes and weights come from the Golub–Welsch eigenvalue formulation of the
//! Jacobi three-term recurrence. Weights are normalized to sum to one, so a
//! rule integrates against the *probability* measure proportional to
//! `(1 - s)^alpha (1 + s)^beta` on `[-1, 1]`.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes on `[-1, 1]` with weights summing to one.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

type RuleKey = (usize, u64, u64);

fn rule_cache() -> &'static RwLock<HashMap<RuleKey, Arc<GaussRule>>> {
    static CACHE: OnceLock<RwLock<HashMap<RuleKey, Arc<GaussRule>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Gauss–Legendre rule (uniform weight) with `n` nodes.
pub fn gauss_legendre(n: usize) -> Arc<GaussRule> {
    gauss_jacobi(n, 0.0, 0.0)
}

/// Gauss–Jacobi rule for the weight `(1 - s)^alpha (1 + s)^beta`, `alpha, beta > -1`.
pub fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> Arc<GaussRule> {
    assert!(n >= 1, "quadrature rule needs at least one node");
    assert!(alpha > -1.0 && beta > -1.0, "Jacobi exponents must exceed -1");
    let key = (n, alpha.to_bits(), beta.to_bits());
    if let Some(rule) = rule_cache().read().unwrap().get(&key) {
        return rule.clone();
    }
    let rule = Arc::new(build_jacobi(n, alpha, beta));
    rule_cache().write().unwrap().insert(key, rule.clone());
    rule
}

fn build_jacobi(n: usize, alpha: f64, beta: f64) -> GaussRule {
    let ab = alpha + beta;
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];
    for (k, d) in diag.iter_mut().enumerate() {
        let k = k as f64;
        let denom = (2.0 * k + ab) * (2.0 * k + ab + 2.0);
        *d = if denom.abs() < 1e-300 {
            (beta - alpha) / (ab + 2.0)
        } else {
            (beta * beta - alpha * alpha) / denom
        };
    }
    for (j, o) in off.iter_mut().enumerate() {
        let k = (j + 1) as f64;
        let b = if j == 0 {
            // k = 1 written with the (2k + ab - 1) factor cancelled, valid for ab = -1
            4.0 * (1.0 + alpha) * (1.0 + beta) / ((2.0 + ab).powi(2) * (3.0 + ab))
        } else {
            let s = 2.0 * k + ab;
            4.0 * k * (k + alpha) * (k + beta) * (k + ab) / (s * s * (s + 1.0) * (s - 1.0))
        };
        *o = b.sqrt();
    }
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jm[(i, i)] = diag[i];
        if i + 1 < n {
            jm[(i, i + 1)] = off[i];
            jm[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(jm);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    GaussRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(8);
        // E[s^k] under uniform on [-1, 1] is 1/(k+1) for even k.
        for k in 0..16 {
            let q: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(s, w)| w * s.powi(k))
                .sum();
            let exact = if k % 2 == 0 { 1.0 / (k as f64 + 1.0) } else { 0.0 };
            assert!((q - exact).abs() < 1e-14, "k={k} q={q}");
        }
    }

    #[test]
    fn jacobi_matches_beta_moments() {
        // Beta(a, b) on [0, 1] maps to Jacobi(alpha = b - 1, beta = a - 1).
        let (a, b) = (9.0, 0.5);
        let rule = gauss_jacobi(64, b - 1.0, a - 1.0);
        let mean: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(s, w)| w * 0.5 * (1.0 + s))
            .sum();
        assert!((mean - a / (a + b)).abs() < 1e-13);
    }

    #[test]
    fn single_node_rule() {
        let rule = gauss_jacobi(1, 0.0, 0.0);
        assert_eq!(rule.nodes.len(), 1);
        assert!(rule.nodes[0].abs() < 1e-15);
        assert!((rule.weights[0] - 1.0).abs() < 1e-15);
    }
}
