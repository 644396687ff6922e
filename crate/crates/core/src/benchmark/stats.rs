//! Summary statistics over solved-problem samples.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
pub fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() == 1 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linearly interpolated quantile of sorted data at `p ∈ [0, 1]`.
fn at(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(xs: &[f64]) -> Option<Quantiles> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    Some(Quantiles {
        min: s[0],
        q1: at(&s, 0.25),
        median: at(&s, 0.5),
        q3: at(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// One-sided paired sign test for `a < b`. Ties are dropped; returns
/// `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`, or 1 with no informative pairs.
pub fn sign_test_p(a: &[f64], b: &[f64]) -> f64 {
    let (mut wins, mut n) = (0u32, 0u32);
    for (x, y) in a.iter().zip(b) {
        if x < y {
            wins += 1;
            n += 1;
        } else if x > y {
            n += 1;
        }
    }
    if n == 0 {
        return 1.0;
    }
    // Σ_{k ≥ wins} C(n, k) / 2^n, accumulated in log space.
    let ln_choose = |k: u32| -> f64 { ln_fact(n) - ln_fact(k) - ln_fact(n - k) };
    (wins..=n).map(|k| (ln_choose(k) - f64::from(n) * std::f64::consts::LN_2).exp()).sum::<f64>().min(1.0)
}

fn ln_fact(n: u32) -> f64 {
    (2..=n).map(|k| f64::from(k).ln()).sum()
}
