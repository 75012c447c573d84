//! Weighted sampling helpers shared by the trace generator.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;

/// Unnormalised Zipf weights `1 / r^s` for popularity ranks `r = 1..=n`.
pub(crate) fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / libm::pow(r as f64, exponent)).collect()
}

/// First-order inclusion probabilities for a fixed-size sample of `m` units
/// drawn proportionally to `weights`, capped at 1 (units that would exceed 1 are
/// taken with certainty and the remainder is rescaled).
pub(crate) fn inclusion_probabilities(weights: &[f64], m: usize) -> Vec<f64> {
    let n = weights.len();
    debug_assert!(m <= n);
    let mut pi = alloc::vec![0.0; n];
    let mut certain = alloc::vec![false; n];
    let mut slots = m as f64;
    loop {
        let total: f64 = (0..n).filter(|&j| !certain[j]).map(|j| weights[j]).sum();
        if slots <= 0.0 || total <= 0.0 {
            break;
        }
        let mut capped = false;
        for j in 0..n {
            if certain[j] {
                continue;
            }
            let p = slots * weights[j] / total;
            if p >= 1.0 {
                certain[j] = true;
                pi[j] = 1.0;
                slots -= 1.0;
                capped = true;
            } else {
                pi[j] = p;
            }
        }
        if !capped {
            break;
        }
    }
    pi
}

/// Draws exactly `m` distinct units from `candidates` with inclusion
/// probability proportional to `weight(unit)` (Madow systematic sampling over a
/// randomly shuffled order). Falls back to uniform selection when all weights
/// vanish.
pub(crate) fn sample_without_replacement<R: Rng>(
    rng: &mut R,
    candidates: &mut Vec<usize>,
    weight: impl Fn(usize) -> f64,
    m: usize,
) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    assert!(m <= candidates.len(), "sample larger than population");
    candidates.shuffle(rng);
    let weights: Vec<f64> = candidates.iter().map(|&c| weight(c)).collect();
    let pi = if weights.iter().all(|&w| w <= 0.0) {
        alloc::vec![m as f64 / candidates.len() as f64; candidates.len()]
    } else {
        inclusion_probabilities(&weights, m)
    };
    let start: f64 = rng.gen();
    let mut picked = Vec::with_capacity(m);
    let mut cumulative = 0.0;
    let mut next_point = start;
    for (idx, &p) in pi.iter().enumerate() {
        cumulative += p;
        while picked.len() < m && next_point < cumulative {
            if picked.last() != Some(&candidates[idx]) {
                picked.push(candidates[idx]);
            }
            next_point += 1.0;
        }
    }
    // Floating-point shortfall at the tail: top up with unpicked units.
    let mut idx = candidates.len();
    while picked.len() < m && idx > 0 {
        idx -= 1;
        if !picked.contains(&candidates[idx]) {
            picked.push(candidates[idx]);
        }
    }
    picked
}

/// One draw proportional to `weight` among `candidates`; `None` if empty.
pub(crate) fn weighted_choice<R: Rng>(
    rng: &mut R,
    candidates: &[usize],
    weight: impl Fn(usize) -> f64,
) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let total: f64 = candidates.iter().map(|&c| weight(c)).sum();
    if total <= 0.0 {
        return candidates.get(rng.gen_range(0..candidates.len())).copied();
    }
    let mut target = rng.gen::<f64>() * total;
    for &c in candidates {
        let w = weight(c);
        if target < w {
            return Some(c);
        }
        target -= w;
    }
    candidates.last().copied()
}
