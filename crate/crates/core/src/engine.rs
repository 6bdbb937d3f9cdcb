//! The decoding loop: ask the policy for a commit set, hand it to the state
//! source, repeat until nothing is masked.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{position_change, remaining_entropy, vri, StepMetrics};
use crate::policy::{select_confidence, SelectionPolicy};
use crate::schedule::Schedule;
use crate::state::{DecodingState, Position, TokenId};

/// Anything that yields decoding states and accepts commits: the synthetic
/// oracle, a trace being replayed, or a recorder wrapping either.
///
/// The model context behind the states is owned by the source; the engine
/// and policies only see [`DecodingState`]s.
pub trait StateSource {
    /// State for the current step, or `None` once the source is exhausted.
    fn current(&self) -> Option<&DecodingState>;

    /// Applies `commit` and moves to the next step.
    fn advance(&mut self, commit: &CommitRecord) -> Result<()>;
}

impl<S: StateSource + ?Sized> StateSource for &mut S {
    fn current(&self) -> Option<&DecodingState> {
        (**self).current()
    }

    fn advance(&mut self, commit: &CommitRecord) -> Result<()> {
        (**self).advance(commit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub step_index: usize,
    /// Ascending.
    pub committed_positions: Vec<Position>,
    /// Predicted tokens, parallel to `committed_positions`.
    pub committed_tokens: Vec<TokenId>,
    /// What confidence decoding would have committed on the same state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow_confidence_positions: Option<Vec<Position>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Also compute the confidence selection on every state and count
    /// position changes against it.
    pub shadow_confidence: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            shadow_confidence: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub commits: Vec<CommitRecord>,
    pub metrics: Vec<StepMetrics>,
    /// Number of `advance` calls, one per model forward.
    pub forwards: usize,
}

pub fn run_decoding<S: StateSource + ?Sized>(
    source: &mut S,
    policy: &dyn SelectionPolicy,
    schedule: &Schedule,
    options: &RunOptions,
) -> Result<RunOutput> {
    let mut commits = Vec::new();
    let mut metrics = Vec::new();
    let mut expected: Option<BTreeSet<Position>> = None;
    let mut num_image_tokens = None;

    for step in 0.. {
        let remaining = expected.as_ref().map_or(usize::MAX, BTreeSet::len);
        if remaining == 0 {
            break;
        }
        let state = source.current().ok_or(Error::TruncatedRun {
            step,
            remaining: expected.as_ref().map_or(0, BTreeSet::len),
        })?;
        check_source_state(state, step, expected.as_ref(), &mut num_image_tokens)?;
        let masked = state.num_masked();
        if masked == 0 {
            break;
        }
        let k = schedule.commit_size(step).ok_or(Error::ScheduleExhausted {
            steps: schedule.steps(),
            remaining: masked,
        })?;
        let k_eff = k.min(masked);

        let selected = policy.select(state, k)?;
        check_selection(state, &selected, k_eff, step)?;

        let shadow = options
            .shadow_confidence
            .then(|| select_confidence(state, k));
        let position_change_count = shadow
            .as_ref()
            .map(|conf| position_change(&selected, conf, k_eff));

        let mut committed_positions = selected;
        committed_positions.sort_unstable();
        let attentions: Vec<&[f64]> = committed_positions
            .iter()
            .filter_map(|&p| state.get(p).and_then(|c| c.attention.as_deref()))
            .collect();
        let step_vri = vri(&attentions)?;
        let vri_partial = attentions.len() < committed_positions.len();
        if vri_partial && committed_positions.len() > 1 {
            log::debug!(
                "step {step}: {} of {} committed tokens carry attention",
                attentions.len(),
                committed_positions.len()
            );
        }
        let committed_tokens = committed_positions
            .iter()
            .map(|&p| state.get(p).map_or(0, |c| c.predicted_token))
            .collect();

        let mut next_masked: BTreeSet<Position> = state.masked_positions().collect();
        for p in &committed_positions {
            next_masked.remove(p);
        }

        let commit = CommitRecord {
            step_index: step,
            committed_positions,
            committed_tokens,
            shadow_confidence_positions: shadow,
        };
        source.advance(&commit)?;

        let remaining_entropy = if next_masked.is_empty() {
            None
        } else {
            let next = source.current().ok_or(Error::TruncatedRun {
                step: step + 1,
                remaining: next_masked.len(),
            })?;
            check_source_state(next, step + 1, Some(&next_masked), &mut num_image_tokens)?;
            remaining_entropy(next)
        };

        metrics.push(StepMetrics {
            step_index: step,
            masked_count: masked,
            committed_count: k_eff,
            vri: step_vri,
            vri_partial,
            remaining_entropy,
            position_change_count,
        });
        commits.push(commit);
        expected = Some(next_masked);
    }

    Ok(RunOutput {
        forwards: commits.len(),
        commits,
        metrics,
    })
}

fn check_source_state(
    state: &DecodingState,
    step: usize,
    expected: Option<&BTreeSet<Position>>,
    num_image_tokens: &mut Option<usize>,
) -> Result<()> {
    let fail = |reason: String| Error::SourceContract { step, reason };
    if state.step_index() != step {
        return Err(fail(format!("state reports step {}", state.step_index())));
    }
    match num_image_tokens {
        Some(n) if *n != state.num_image_tokens() => {
            return Err(fail(format!(
                "image token count changed from {n} to {}",
                state.num_image_tokens()
            )))
        }
        _ => *num_image_tokens = Some(state.num_image_tokens()),
    }
    if let Some(expected) = expected {
        if !state.masked_positions().eq(expected.iter().copied()) {
            return Err(fail(
                "masked positions differ from previous mask minus committed".into(),
            ));
        }
    }
    Ok(())
}

fn check_selection(
    state: &DecodingState,
    selected: &[Position],
    expected_len: usize,
    step: usize,
) -> Result<()> {
    let fail = |reason: String| Error::PolicyContract { step, reason };
    if selected.len() != expected_len {
        return Err(fail(format!(
            "returned {} positions, expected {expected_len}",
            selected.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for &p in selected {
        if !state.is_masked(p) {
            return Err(fail(format!("position {p} is not masked")));
        }
        if !seen.insert(p) {
            return Err(fail(format!("position {p} selected twice")));
        }
    }
    Ok(())
}
