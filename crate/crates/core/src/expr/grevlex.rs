//! Graded reverse-lexicographic enumeration of exponent vectors.

use std::cmp::Ordering;

/// Compares exponent vectors of equal length by total degree, then grevlex:
/// among equal degrees, `a > b` when the last nonzero entry of `a - b` is
/// negative.
pub fn grevlex_cmp(a: &[u32], b: &[u32]) -> Ordering {
    let da: u32 = a.iter().sum();
    let db: u32 = b.iter().sum();
    da.cmp(&db).then_with(|| {
        for (x, y) in a.iter().zip(b).rev() {
            if x != y {
                return y.cmp(x);
            }
        }
        Ordering::Equal
    })
}

/// All exponent vectors in `n` variables of total degree exactly `degree`,
/// from grevlex-largest to smallest. For `n = 2, degree = 2` this gives
/// `x1^2, x1 x2, x2^2`.
pub fn grevlex_monomials(n: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if n == 0 {
        if degree == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    let mut cur = vec![0; n];
    fill(&mut cur, 0, degree, &mut out);
    out.sort_by(|a, b| grevlex_cmp(b, a));
    out
}

fn fill(cur: &mut Vec<u32>, i: usize, left: u32, out: &mut Vec<Vec<u32>>) {
    if i + 1 == cur.len() {
        cur[i] = left;
        out.push(cur.clone());
        return;
    }
    for e in 0..=left {
        cur[i] = e;
        fill(cur, i + 1, left - e, out);
    }
}
