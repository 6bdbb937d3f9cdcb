//! Per-step decoding snapshot: the masked positions and what the model
//! currently predicts for each of them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a text position in the generated sequence, in `[0, L)`.
pub type Position = usize;

/// Vocabulary token id.
pub type TokenId = u32;

/// Tolerance on `sum(attention) == 1` for attention carried by a state.
pub const ATTENTION_SUM_TOLERANCE: f64 = 1e-6;

const SCALAR_TOLERANCE: f64 = 1e-9;

/// What the model predicts for one masked position at the current step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrediction {
    pub position: Position,
    pub predicted_token: TokenId,
    /// Probability of the most likely token.
    pub confidence: f64,
    /// Gap between the two most likely token probabilities.
    pub margin: f64,
    /// Predictive entropy divided by `ln |V|`.
    pub entropy_norm: f64,
    /// Head-averaged token-to-image attention over the `N` image tokens,
    /// normalized to sum to one. Absent when it was not captured.
    pub attention: Option<Arc<[f64]>>,
    /// Largest token probabilities in descending order, when the source has them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_probabilities: Vec<f64>,
}

impl CandidatePrediction {
    /// Derives token, confidence, margin and normalized entropy from a full
    /// predictive distribution over the vocabulary.
    ///
    /// Ties for the top token resolve to the lowest token id. A one-token
    /// vocabulary has zero normalized entropy.
    pub fn from_distribution(
        position: Position,
        probs: &[f64],
        attention: Option<Arc<[f64]>>,
    ) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidState(format!(
                "position {position}: empty token distribution"
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidState(format!(
                "position {position}: token probabilities must be finite and nonnegative"
            )));
        }
        let mut best = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        let second = probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &p)| p)
            .fold(0.0_f64, f64::max);
        let confidence = probs[best];
        let entropy_norm = if probs.len() < 2 {
            0.0
        } else {
            let h: f64 = probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            h / (probs.len() as f64).ln()
        };
        let mut top: Vec<f64> = probs.to_vec();
        top.sort_by(|a, b| b.total_cmp(a));
        top.truncate(8);
        Ok(Self {
            position,
            predicted_token: best as TokenId,
            confidence,
            margin: confidence - second,
            entropy_norm,
            attention,
            top_probabilities: top,
        })
    }

    fn validate(&self, num_image_tokens: usize) -> Result<()> {
        let p = self.position;
        for (name, v) in [
            ("confidence", self.confidence),
            ("margin", self.margin),
            ("entropy_norm", self.entropy_norm),
        ] {
            if !(-SCALAR_TOLERANCE..=1.0 + SCALAR_TOLERANCE).contains(&v) {
                return Err(Error::InvalidState(format!(
                    "position {p}: {name} {v} outside [0, 1]"
                )));
            }
        }
        if self.margin > self.confidence + SCALAR_TOLERANCE {
            return Err(Error::InvalidState(format!(
                "position {p}: margin {} exceeds confidence {}",
                self.margin, self.confidence
            )));
        }
        if let Some(att) = &self.attention {
            if att.len() != num_image_tokens {
                return Err(Error::Dimension {
                    expected: num_image_tokens,
                    actual: att.len(),
                });
            }
            check_distribution(att, ATTENTION_SUM_TOLERANCE)
                .map_err(|e| Error::InvalidState(format!("position {p}: attention {e}")))?;
        }
        Ok(())
    }
}

/// Checks that `values` is a nonnegative vector summing to one within `tol`.
pub(crate) fn check_distribution(values: &[f64], tol: f64) -> std::result::Result<(), String> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("has negative or non-finite entries".into());
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(format!("sums to {sum}, not 1"));
    }
    Ok(())
}

/// Snapshot of one decoding step.
///
/// Predictions are kept sorted by position, one per masked position, so the
/// masked set is exactly the set of positions with a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingState {
    step_index: usize,
    length: usize,
    num_image_tokens: usize,
    candidates: Vec<CandidatePrediction>,
}

impl DecodingState {
    pub fn new(
        step_index: usize,
        length: usize,
        num_image_tokens: usize,
        mut candidates: Vec<CandidatePrediction>,
    ) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidState("length must be positive".into()));
        }
        if num_image_tokens == 0 {
            return Err(Error::InvalidState(
                "num_image_tokens must be positive".into(),
            ));
        }
        candidates.sort_by_key(|c| c.position);
        for pair in candidates.windows(2) {
            if pair[0].position == pair[1].position {
                return Err(Error::InvalidState(format!(
                    "position {} has more than one prediction",
                    pair[0].position
                )));
            }
        }
        for c in &candidates {
            if c.position >= length {
                return Err(Error::InvalidState(format!(
                    "position {} outside [0, {length})",
                    c.position
                )));
            }
            c.validate(num_image_tokens)?;
        }
        Ok(Self {
            step_index,
            length,
            num_image_tokens,
            candidates,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn num_image_tokens(&self) -> usize {
        self.num_image_tokens
    }

    /// Predictions for every masked position, in ascending position order.
    pub fn candidates(&self) -> &[CandidatePrediction] {
        &self.candidates
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = Position> + '_ {
        self.candidates.iter().map(|c| c.position)
    }

    pub fn num_masked(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_masked(&self, position: Position) -> bool {
        self.get(position).is_some()
    }

    pub fn get(&self, position: Position) -> Option<&CandidatePrediction> {
        self.candidates
            .binary_search_by_key(&position, |c| c.position)
            .ok()
            .map(|i| &self.candidates[i])
    }
}
