//! Wall-clock cost of the selection stage.
//!
//! Only the policy computation is timed, on states that are already in
//! memory. Warmup iterations are discarded and medians reported.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::policy::{
    build_window, compute_redundancy_scores, select_confidence, window_saliency, VrcdPolicy,
};
use crate::saliency::{OverlapTable, SaliencyVector};
use crate::state::DecodingState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingOptions {
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            warmup: 3,
            repetitions: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverheadReport {
    pub states: usize,
    pub commit_size: usize,
    pub mean_window: f64,
    pub num_image_tokens: usize,
    /// Median time per state.
    pub confidence_ns: f64,
    pub policy_ns: f64,
    /// `policy_ns / confidence_ns`.
    pub ratio: f64,
    pub saliency_ns: f64,
    pub pair_ns: f64,
    pub scoring_ns: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

fn time_per_item<F: FnMut()>(items: usize, opts: TimingOptions, mut f: F) -> f64 {
    for _ in 0..opts.warmup {
        f();
    }
    let samples = (0..opts.repetitions.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as f64 / items.max(1) as f64
        })
        .collect();
    median(samples)
}

/// Times the redundancy-controlled policy against confidence selection on
/// identical states, with a per-stage breakdown.
pub fn selection_overhead(
    policy: &VrcdPolicy,
    states: &[DecodingState],
    k: usize,
    opts: TimingOptions,
) -> Result<OverheadReport> {
    let config = *policy.config();
    let n = states.len();
    // fail early rather than inside a timing loop
    for s in states {
        policy.explain(s, k)?;
    }

    let confidence_ns = time_per_item(n, opts, || {
        for s in states {
            black_box(select_confidence(black_box(s), k));
        }
    });
    let policy_ns = time_per_item(n, opts, || {
        for s in states {
            black_box(policy.explain(black_box(s), k).ok());
        }
    });

    let windows: Vec<_> = states.iter().map(|s| build_window(s, k, config.lambda)).collect();
    let saliency_ns = time_per_item(n, opts, || {
        for (s, w) in states.iter().zip(&windows) {
            black_box(window_saliency(s, w, &config).ok());
        }
    });
    let saliency: Vec<Vec<SaliencyVector>> = states
        .iter()
        .zip(&windows)
        .map(|(s, w)| window_saliency(s, w, &config))
        .collect::<Result<_>>()?;
    let pair_ns = time_per_item(n, opts, || {
        for q in &saliency {
            black_box(OverlapTable::compute(q).ok());
        }
    });
    let scoring_ns = time_per_item(n, opts, || {
        for (w, q) in windows.iter().zip(&saliency) {
            black_box(compute_redundancy_scores(w, q, &config).ok());
        }
    }) - pair_ns;

    Ok(OverheadReport {
        states: n,
        commit_size: k,
        mean_window: windows.iter().map(|w| w.len() as f64).sum::<f64>() / n.max(1) as f64,
        num_image_tokens: states.first().map_or(0, DecodingState::num_image_tokens),
        confidence_ns,
        policy_ns,
        ratio: if confidence_ns > 0.0 { policy_ns / confidence_ns } else { f64::INFINITY },
        saliency_ns,
        pair_ns,
        scoring_ns: scoring_ns.max(0.0),
    })
}

/// Random visual saliency vectors for `window` candidates over
/// `num_image_tokens` image tokens.
pub fn random_saliency(window: usize, num_image_tokens: usize, seed: u64) -> Vec<SaliencyVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..window)
        .map(|position| {
            let raw: Vec<f64> = (0..num_image_tokens).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            SaliencyVector {
                position,
                values: raw.into_iter().map(|x| x / total).collect(),
                is_visual: true,
            }
        })
        .collect()
}

/// Median time of one full pairwise overlap pass over a window of
/// `window` candidates with `num_image_tokens` image tokens.
pub fn pair_stage_cost(window: usize, num_image_tokens: usize, opts: TimingOptions, seed: u64) -> Duration {
    let saliency = random_saliency(window, num_image_tokens, seed);
    let ns = time_per_item(1, opts, || {
        black_box(OverlapTable::compute(black_box(&saliency)).ok());
    });
    Duration::from_nanos(ns as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StateSource;
    use crate::oracle::{OracleConfig, SyntheticOracle};
    use crate::policy::VrcdConfig;

    #[test]
    fn report_on_oracle_states() {
        let o = SyntheticOracle::new(OracleConfig::planted(1)).unwrap();
        let states = vec![o.current().unwrap().clone()];
        let policy = VrcdPolicy::new(VrcdConfig::default()).unwrap();
        let r = selection_overhead(&policy, &states, 4, TimingOptions { warmup: 1, repetitions: 3 }).unwrap();
        assert_eq!(r.states, 1);
        assert_eq!(r.mean_window, 8.0);
        assert_eq!(r.num_image_tokens, 192);
        assert!(r.policy_ns > 0.0 && r.ratio.is_finite());
    }

    #[test]
    fn single_member_window_has_no_pairs() {
        let q = random_saliency(1, 32, 0);
        assert!(OverlapTable::compute(&q).unwrap().is_empty());
        let q = random_saliency(5, 32, 0);
        assert_eq!(OverlapTable::compute(&q).unwrap().pairs().len(), 10);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }
}
