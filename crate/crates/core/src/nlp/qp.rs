//! Dense primal-dual interior-point method for the elastic QP subproblem
//!
//! ```text
//! min  ½ dᵀHd + gᵀd + μ Σ tᵢ
//! s.t. c + G d ≤ t,  t ≥ 0,  lo ≤ d ≤ hi
//! ```
//!
//! with Mehrotra predictor-corrector steps. The elastic variables `t` make
//! the problem feasible for any data; `lo`/`hi` must be finite.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub mu: f64,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: DVector<f64>,
    /// Elastic violations of the linearized rows.
    pub t: DVector<f64>,
    /// Row multipliers, in `[0, μ]`.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const MAX_ITER: usize = 200;
const FRACTION: f64 = 0.995;

struct State {
    d: DVector<f64>,
    t: DVector<f64>,
    s: DVector<f64>,
    p: DVector<f64>,
    q: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
}

struct Residuals {
    rd: DVector<f64>,
    rt: DVector<f64>,
    rp1: DVector<f64>,
    rp3: DVector<f64>,
    rp4: DVector<f64>,
}

struct Step {
    d: DVector<f64>,
    t: DVector<f64>,
    s: DVector<f64>,
    p: DVector<f64>,
    q: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
}

fn residuals(qp: &QpProblem, x: &State) -> Residuals {
    Residuals {
        rd: &qp.h * &x.d + &qp.g + qp.a.tr_mul(&x.y) - &x.a + &x.b,
        rt: x.y.map(|y| qp.mu - y) - &x.z,
        rp1: &qp.c + &qp.a * &x.d - &x.t + &x.s,
        rp3: &x.d - &qp.lo - &x.p,
        rp4: &qp.hi - &x.d - &x.q,
    }
}

fn complementarity(x: &State) -> f64 {
    let total = x.s.dot(&x.y) + x.t.dot(&x.z) + x.p.dot(&x.a) + x.q.dot(&x.b);
    total / (2 * x.s.len() + 2 * x.p.len()).max(1) as f64
}

/// Largest `α ≤ 1` keeping `v + α dv ≥ 0` (scaled by the boundary fraction).
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for (x, dx) in v.iter().zip(dv.iter()) {
        if *dx < 0.0 {
            alpha = alpha.min(-x / dx);
        }
    }
    alpha
}

impl Step {
    fn length(&self, x: &State) -> f64 {
        [
            max_step(&x.t, &self.t),
            max_step(&x.s, &self.s),
            max_step(&x.p, &self.p),
            max_step(&x.q, &self.q),
            max_step(&x.y, &self.y),
            max_step(&x.z, &self.z),
            max_step(&x.a, &self.a),
            max_step(&x.b, &self.b),
        ]
        .into_iter()
        .fold(1.0, f64::min)
    }
}

/// Complementarity right-hand sides `s∘y - target`, etc.
struct Comp {
    c1: DVector<f64>,
    ct: DVector<f64>,
    ca: DVector<f64>,
    cb: DVector<f64>,
}

fn solve_newton(qp: &QpProblem, x: &State, r: &Residuals, k: &Comp) -> Option<Step> {
    let n = x.d.len();
    let w1 = x.y.component_div(&x.s);
    let w2 = x.z.component_div(&x.t);
    let wsum = &w1 + &w2;
    let dmat = w1.component_mul(&w2).component_div(&wsum);
    let e1 = &r.rp1 - k.c1.component_div(&x.y);
    let f2 = &r.rt + k.ct.component_div(&x.t);
    let h = w1.component_mul(&f2).component_div(&wsum);

    let mut m = qp.h.clone();
    // Gᵀ D G
    let mut scaled = qp.a.clone();
    for (mut row, dv) in scaled.row_iter_mut().zip(dmat.iter()) {
        row *= *dv;
    }
    m += qp.a.tr_mul(&scaled);
    let box_w = x.a.component_div(&x.p) + x.b.component_div(&x.q);
    for i in 0..n {
        m[(i, i)] += box_w[i];
    }
    let rhs = -&r.rd - qp.a.tr_mul(&(dmat.component_mul(&e1) + &h))
        - (&k.ca + x.a.component_mul(&r.rp3)).component_div(&x.p)
        + (&k.cb + x.b.component_mul(&r.rp4)).component_div(&x.q);

    if !m.iter().all(|v| v.is_finite()) || !rhs.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut reg = 0.0;
    let dd = loop {
        let mut mm = m.clone();
        if reg > 0.0 {
            for i in 0..n {
                mm[(i, i)] += reg;
            }
        }
        if let Some(ch) = Cholesky::new(mm) {
            break ch.solve(&rhs);
        }
        let scale = m.diagonal().amax().max(1.0);
        reg = if reg == 0.0 { 1e-12 * scale } else { reg * 100.0 };
        if reg > 1e6 * scale {
            return None;
        }
    };

    let gd = &qp.a * &dd;
    let dy = dmat.component_mul(&(&gd + &e1)) + &h;
    let dt = (&dy - &f2).component_div(&w2);
    let dz = &r.rt - &dy;
    let ds = (-&k.c1 - x.s.component_mul(&dy)).component_div(&x.y);
    let dp = &dd + &r.rp3;
    let dq = &r.rp4 - &dd;
    let da = (-&k.ca - x.a.component_mul(&dp)).component_div(&x.p);
    let db = (-&k.cb - x.b.component_mul(&dq)).component_div(&x.q);
    Some(Step {
        d: dd,
        t: dt,
        s: ds,
        p: dp,
        q: dq,
        y: dy,
        z: dz,
        a: da,
        b: db,
    })
}

pub fn solve_elastic_qp(qp: &QpProblem) -> QpSolution {
    let n = qp.g.len();
    let m = qp.c.len();
    let d0 = DVector::from_fn(n, |i, _| {
        let (lo, hi) = (qp.lo[i], qp.hi[i]);
        if lo < 0.0 && hi > 0.0 {
            0.0
        } else {
            0.5 * (lo + hi)
        }
    });
    let width = (&qp.hi - &qp.lo).map(|w| w.max(1e-12));
    let row = &qp.c + &qp.a * &d0;
    let t0 = row.map(|r| r.max(0.0) + 1.0);
    let s0 = &t0 - &row;
    let half = (0.5 * qp.mu).max(1e-8);
    let mut x = State {
        p: DVector::from_fn(n, |i, _| (d0[i] - qp.lo[i]).max(0.1 * width[i])),
        q: DVector::from_fn(n, |i, _| (qp.hi[i] - d0[i]).max(0.1 * width[i])),
        d: d0,
        t: t0,
        s: s0,
        y: DVector::from_element(m, half),
        z: DVector::from_element(m, half),
        a: DVector::from_element(n, 1.0),
        b: DVector::from_element(n, 1.0),
    };

    let scale_d = 1.0 + qp.g.amax() + qp.h.amax();
    let scale_p = 1.0 + qp.c.amax();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_ITER {
        iterations = it + 1;
        let r = residuals(qp, &x);
        let nu = complementarity(&x);
        let dual_inf = r.rd.amax().max(r.rt.amax() / (1.0 + qp.mu));
        let primal_inf = r.rp1.amax().max(r.rp3.amax()).max(r.rp4.amax());
        if dual_inf <= 1e-10 * scale_d && primal_inf <= 1e-10 * scale_p && nu <= 1e-12 * (1.0 + qp.mu) {
            converged = true;
            break;
        }

        // predictor
        let aff = Comp {
            c1: x.s.component_mul(&x.y),
            ct: x.t.component_mul(&x.z),
            ca: x.p.component_mul(&x.a),
            cb: x.q.component_mul(&x.b),
        };
        let Some(step) = solve_newton(qp, &x, &r, &aff) else {
            break;
        };
        let alpha = step.length(&x);
        let mu_aff = {
            let f = |v: &DVector<f64>, dv: &DVector<f64>, w: &DVector<f64>, dw: &DVector<f64>| {
                (v + dv * alpha).dot(&(w + dw * alpha))
            };
            (f(&x.s, &step.s, &x.y, &step.y)
                + f(&x.t, &step.t, &x.z, &step.z)
                + f(&x.p, &step.p, &x.a, &step.a)
                + f(&x.q, &step.q, &x.b, &step.b))
                / (2 * m + 2 * n).max(1) as f64
        };
        let sigma = (mu_aff / nu).clamp(0.0, 1.0).powi(3);
        let target = sigma * nu;

        // corrector
        let cor = Comp {
            c1: aff.c1 + step.s.component_mul(&step.y) - DVector::from_element(m, target),
            ct: aff.ct + step.t.component_mul(&step.z) - DVector::from_element(m, target),
            ca: aff.ca + step.p.component_mul(&step.a) - DVector::from_element(n, target),
            cb: aff.cb + step.q.component_mul(&step.b) - DVector::from_element(n, target),
        };
        let Some(step) = solve_newton(qp, &x, &r, &cor) else {
            break;
        };
        let alpha = (FRACTION * step.length(&x)).min(1.0);
        x.d += &step.d * alpha;
        x.t += &step.t * alpha;
        x.s += &step.s * alpha;
        x.p += &step.p * alpha;
        x.q += &step.q * alpha;
        x.y += &step.y * alpha;
        x.z += &step.z * alpha;
        x.a += &step.a * alpha;
        x.b += &step.b * alpha;
    }
    // Snap to the box; interior iterates sit strictly inside it.
    for i in 0..n {
        x.d[i] = x.d[i].clamp(qp.lo[i], qp.hi[i]);
    }
    let row = &qp.c + &qp.a * &x.d;
    let t = row.map(|r| r.max(0.0));
    QpSolution {
        d: x.d,
        t,
        y: x.y.map(|y| y.clamp(0.0, qp.mu)),
        iterations,
        converged,
    }
}
