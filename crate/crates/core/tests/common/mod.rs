//! Reference implementations used as oracles by the integration tests.
//! They are written from the textbook definitions and share no code with
//! the library.

#![allow(dead_code)]

use std::collections::HashMap;

/// Tau-b from the tie-group formula `S / sqrt((n0 - n1)(n0 - n2))`, with `S`
/// the sum of sign products. `None` when the denominator is zero.
pub fn tau_b_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let sgn = |x: f64, y: f64| (x > y) as i64 - (x < y) as i64;
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            s += sgn(a[i], a[j]) * sgn(b[i], b[j]);
        }
    }
    let tied_pairs = |v: &[f64]| -> f64 {
        let mut groups: HashMap<u64, u64> = HashMap::new();
        for x in v {
            *groups.entry(x.to_bits()).or_default() += 1;
        }
        groups.values().map(|&t| (t * (t - 1) / 2) as f64).sum()
    };
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = ((n0 - tied_pairs(a)) * (n0 - tied_pairs(b))).sqrt();
    (denom > 0.0).then(|| s as f64 / denom)
}

/// Hyndman-Fan type 7 quantile using 1-based order statistics.
pub fn quantile_oracle(samples: &[f64], p: f64) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = x.len();
    let h = (n as f64 - 1.0) * p + 1.0;
    let lo = h.floor() as usize;
    if lo >= n {
        return x[n - 1];
    }
    x[lo - 1] + (h - lo as f64) * (x[lo] - x[lo - 1])
}

pub fn median_oracle(samples: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

/// AUC as the fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half.
pub fn auc_pairwise_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &q in neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Straight-line anchor loop: trigger on the first frame and whenever the
/// cosine similarity to the current anchor drops below `gamma`; a trigger
/// makes the frame the new anchor.
pub fn reference_triggers(observations: &[Vec<f64>], gamma: f64) -> Vec<bool> {
    let mut anchor: Option<&Vec<f64>> = None;
    let mut out = Vec::with_capacity(observations.len());
    for obs in observations {
        let trig = match anchor {
            None => true,
            Some(a) => cosine(obs, a) < gamma,
        };
        if trig {
            anchor = Some(obs);
        }
        out.push(trig);
    }
    out
}

pub fn as_set(v: &[usize]) -> std::collections::BTreeSet<usize> {
    v.iter().copied().collect()
}
