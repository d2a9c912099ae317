//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

/// Largest pairwise difference.
pub fn oracle_delta(u: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for a in u {
        for b in u {
            best = best.max(a - b);
        }
    }
    best
}

/// Largest pairwise error ratio, denominators floored at `eps`.
pub fn oracle_ser(u: &[f64], eps: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in u {
        for b in u {
            best = best.max((1.0 - a) / (1.0 - b).max(eps));
        }
    }
    best
}

/// Standard deviation from the pairwise-difference identity
/// `Σ_{i<j} (x_i − x_j)² = K · Σ (x_i − x̄)²`.
pub fn oracle_std(u: &[f64], sample: bool) -> f64 {
    let k = u.len() as f64;
    let mut pairs = 0.0;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            pairs += (u[i] - u[j]).powi(2);
        }
    }
    let ss = pairs / k;
    (ss / if sample { k - 1.0 } else { k }).sqrt()
}

/// Dice by explicit set counting.
pub fn oracle_dice(p: &[u8], g: &[u8]) -> f64 {
    let pi: Vec<usize> = (0..p.len()).filter(|&i| p[i] != 0).collect();
    let gi: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0).collect();
    if pi.is_empty() && gi.is_empty() {
        return 1.0;
    }
    let inter = pi.iter().filter(|i| gi.contains(i)).count();
    2.0 * inter as f64 / (pi.len() + gi.len()) as f64
}
