//! Step-level analysis quantities and their aggregation across runs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::state::{DecodingState, Position};

/// Visual Redundancy Index of the attention vectors committed together.
///
/// `sum_u (sum_i v_i(u) - max_i v_i(u)) / (m - 1)`, zero for `m <= 1`.
/// Inputs are raw normalized attention, not extracted saliency.
pub fn vri<V: AsRef<[f64]>>(vectors: &[V]) -> Result<f64> {
    let m = vectors.len();
    if m <= 1 {
        return Ok(0.0);
    }
    let n = vectors[0].as_ref().len();
    if let Some(bad) = vectors.iter().find(|v| v.as_ref().len() != n) {
        return Err(Error::Dimension {
            expected: n,
            actual: bad.as_ref().len(),
        });
    }
    let mut numerator = 0.0;
    for u in 0..n {
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        for v in vectors {
            let x = v.as_ref()[u];
            sum += x;
            max = max.max(x);
        }
        numerator += sum - max;
    }
    Ok((numerator / (m - 1) as f64).clamp(0.0, 1.0))
}

/// Mean normalized entropy over the still-masked positions; `None` when
/// nothing remains.
pub fn remaining_entropy(state: &DecodingState) -> Option<f64> {
    let n = state.num_masked();
    (n > 0).then(|| state.candidates().iter().map(|c| c.entropy_norm).sum::<f64>() / n as f64)
}

/// Number of positions picked by `policy_selection` that the confidence
/// selection did not pick: `k - |intersection|`.
pub fn position_change(policy_selection: &[Position], confidence_selection: &[Position], k: usize) -> usize {
    let conf: BTreeSet<_> = confidence_selection.iter().collect();
    let shared = policy_selection.iter().filter(|p| conf.contains(p)).count();
    k.saturating_sub(shared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step_index: usize,
    /// `|C_t|` before the commit.
    pub masked_count: usize,
    /// `m = |S_t|`.
    pub committed_count: usize,
    pub vri: f64,
    /// Set when fewer than `m` committed tokens carried attention; VRI was
    /// then computed over the ones that did.
    pub vri_partial: bool,
    /// Mean entropy of the positions left masked; `None` on the terminal step.
    pub remaining_entropy: Option<f64>,
    /// Changed positions against the confidence selection on the same state,
    /// when the shadow selection was computed.
    pub position_change_count: Option<usize>,
}

impl StepMetrics {
    /// Whether the step belongs to the analyzed set: `0 < K < |C_t|`.
    pub fn is_analyzed(&self) -> bool {
        self.committed_count > 0 && self.committed_count < self.masked_count
    }
}

/// Mean of one metric at one step index across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step_index: usize,
    pub runs: usize,
    pub mean_vri: f64,
    pub entropy_runs: usize,
    pub mean_remaining_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub committed_steps: usize,
    /// Mean VRI over every committed step of every run.
    pub mean_vri_micro: Option<f64>,
    /// Mean over runs of each run's mean VRI.
    pub mean_vri_macro: Option<f64>,
    pub curve: Vec<CurvePoint>,
    /// `|T|`: steps with `0 < K < |C_t|` and a shadow selection.
    pub analyzed_step_count: usize,
    pub total_changed: usize,
    pub total_committed_analyzed: usize,
    /// `D-bar`.
    pub mean_change_count: Option<f64>,
    /// `rho = sum D / sum K`.
    pub change_rate: Option<f64>,
}

pub fn aggregate<R: AsRef<[StepMetrics]>>(runs: &[R]) -> RunAggregate {
    let mut committed_steps = 0usize;
    let mut vri_total = 0.0;
    let mut run_means = Vec::new();
    let mut analyzed = 0usize;
    let mut changed = 0usize;
    let mut committed_analyzed = 0usize;
    // step -> (runs, vri sum, entropy runs, entropy sum)
    let mut by_step: BTreeMap<usize, (usize, f64, usize, f64)> = BTreeMap::new();

    for run in runs {
        let steps = run.as_ref();
        if !steps.is_empty() {
            run_means.push(steps.iter().map(|s| s.vri).sum::<f64>() / steps.len() as f64);
        }
        for s in steps {
            committed_steps += 1;
            vri_total += s.vri;
            let slot = by_step.entry(s.step_index).or_default();
            slot.0 += 1;
            slot.1 += s.vri;
            if let Some(e) = s.remaining_entropy {
                slot.2 += 1;
                slot.3 += e;
            }
            if let (true, Some(d)) = (s.is_analyzed(), s.position_change_count) {
                analyzed += 1;
                changed += d;
                committed_analyzed += s.committed_count;
            }
        }
    }

    let curve = by_step
        .into_iter()
        .map(|(step_index, (n, vri, en, e))| CurvePoint {
            step_index,
            runs: n,
            mean_vri: vri / n as f64,
            entropy_runs: en,
            mean_remaining_entropy: (en > 0).then(|| e / en as f64),
        })
        .collect();

    RunAggregate {
        runs: runs.len(),
        committed_steps,
        mean_vri_micro: (committed_steps > 0).then(|| vri_total / committed_steps as f64),
        mean_vri_macro: (!run_means.is_empty())
            .then(|| run_means.iter().sum::<f64>() / run_means.len() as f64),
        curve,
        analyzed_step_count: analyzed,
        total_changed: changed,
        total_committed_analyzed: committed_analyzed,
        mean_change_count: (analyzed > 0).then(|| changed as f64 / analyzed as f64),
        change_rate: (committed_analyzed > 0).then(|| changed as f64 / committed_analyzed as f64),
    }
}

/// Outcome of a paired sign test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where the first sample is strictly smaller.
    pub below: usize,
    pub above: usize,
    pub ties: usize,
    /// One-sided p-value for "first is smaller".
    pub p_less: f64,
    pub p_two_sided: f64,
}

/// Paired sign test of `first` against `second`; ties are dropped.
pub fn sign_test(first: &[f64], second: &[f64]) -> SignTest {
    let mut below = 0;
    let mut above = 0;
    let mut ties = 0;
    for (a, b) in first.iter().zip(second) {
        match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Less) => below += 1,
            Some(std::cmp::Ordering::Greater) => above += 1,
            _ => ties += 1,
        }
    }
    let n = (below + above) as u64;
    let (p_less, p_two_sided) = if n == 0 {
        (1.0, 1.0)
    } else {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        // P(X >= below)
        let upper = |k: u64| if k == 0 { 1.0 } else { 1.0 - dist.cdf(k - 1) };
        let p_less = upper(below as u64);
        let extreme = below.max(above) as u64;
        (p_less, (2.0 * upper(extreme)).min(1.0))
    };
    SignTest {
        below,
        above,
        ties,
        p_less,
        p_two_sided,
    }
}
