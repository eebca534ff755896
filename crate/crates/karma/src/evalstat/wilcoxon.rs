//! Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are dropped; |differences| are ranked with midranks
//! for ties; W is the rank sum of the positive differences. For up to 25
//! effective pairs the two-sided p-value is exact over all 2^n sign
//! assignments (tabulated by a subset-sum count over doubled ranks, which
//! is the same distribution without materializing every mask). Larger
//! samples use the normal approximation with tie-corrected variance and a
//! continuity correction.

use crate::KarmaError;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest n for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 25;

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs with a nonzero difference.
    pub n_effective: usize,
    /// Rank sum of positive differences.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: WilcoxonMethod,
    pub alpha: f64,
}

impl WilcoxonResult {
    pub fn significant(&self) -> bool {
        self.p_value < self.alpha
    }
}

pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, KarmaError> {
    let mut diffs: Vec<f64> = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if !a.is_finite() || !b.is_finite() {
            return Err(KarmaError::Degenerate {
                detail: "pairs must be finite".to_string(),
            });
        }
        let d = a - b;
        if d != 0.0 {
            diffs.push(d);
        }
    }
    if diffs.is_empty() {
        return Err(KarmaError::Degenerate {
            detail: "all differences are zero".to_string(),
        });
    }
    let n = diffs.len();
    if n < 5 {
        return Err(KarmaError::TooFewPairs { n_effective: n });
    }

    // Midranks over |d|, kept doubled so everything stays integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| diffs[x].abs().partial_cmp(&diffs[y].abs()).unwrap());
    let mut doubled_rank = vec![0u64; n];
    let mut tie_sizes: Vec<u64> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // midrank = (i+1 + j+1) / 2, so the doubled midrank is i + j + 2
        for &idx in &order[i..=j] {
            doubled_rank[idx] = (i + j + 2) as u64;
        }
        tie_sizes.push((j - i + 1) as u64);
        i = j + 1;
    }

    let w2: u64 = diffs
        .iter()
        .zip(doubled_rank.iter())
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let statistic = w2 as f64 / 2.0;

    let (p_value, method) = if n <= EXACT_LIMIT {
        (exact_two_sided(&doubled_rank, w2), WilcoxonMethod::Exact)
    } else {
        (
            normal_two_sided(n as f64, statistic, &tie_sizes),
            WilcoxonMethod::NormalApproximation,
        )
    };

    Ok(WilcoxonResult {
        n_effective: n,
        statistic,
        p_value: p_value.clamp(0.0, 1.0),
        method,
        alpha: DEFAULT_ALPHA,
    })
}

/// P(|W - mu| >= |w_obs - mu|) under uniformly random signs, computed from
/// the exact distribution of the doubled statistic. The sign-flip symmetry
/// of the null makes this identical to doubling the smaller tail.
fn exact_two_sided(doubled_rank: &[u64], w2_obs: u64) -> f64 {
    let total: u64 = doubled_rank.iter().sum();
    // counts[s] = number of sign assignments whose positive doubled-rank
    // sum is s; a subset-sum table over the ranks.
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_rank {
        let r = r as usize;
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    // total is n(n+1), always even, so mu2 is integral
    let mu2 = total / 2;
    let obs_dist = w2_obs.abs_diff(mu2);
    let mut extreme = 0u64;
    for (s, &c) in counts.iter().enumerate() {
        if (s as u64).abs_diff(mu2) >= obs_dist {
            extreme += c;
        }
    }
    extreme as f64 / 2f64.powi(doubled_rank.len() as i32)
}

fn normal_two_sided(n: f64, w: f64, tie_sizes: &[u64]) -> f64 {
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let variance = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if variance <= 0.0 {
        return 1.0;
    }
    let centered = w - mean;
    let corrected = centered - 0.5 * centered.signum();
    let z = corrected / variance.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0)
}
