//! Selection policies: which masked positions to commit at a step.
//!
//! Every top-K in this module orders by score (descending, or ascending for
//! entropy) and breaks ties by ascending position, so a policy is a pure,
//! deterministic function of the state and its configuration.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{extract_saliency, raw_saliency, OverlapTable, SaliencyVector};
use crate::state::{DecodingState, Position};

/// Chooses positions to commit at one decoding step.
pub trait SelectionPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns `min(k, |C_t|)` distinct masked positions, in selection order.
    fn select(&self, state: &DecodingState, k: usize) -> Result<Vec<Position>>;
}

fn top_k_by(mut scored: Vec<(Position, f64)>, k: usize, descending: bool) -> Vec<Position> {
    scored.sort_by(|a, b| {
        let by_score = if descending {
            b.1.partial_cmp(&a.1)
        } else {
            a.1.partial_cmp(&b.1)
        };
        by_score.unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored.into_iter().map(|(p, _)| p).collect()
}

/// The `k` highest-confidence masked positions.
pub fn select_confidence(state: &DecodingState, k: usize) -> Vec<Position> {
    top_k_by(
        state
            .candidates()
            .iter()
            .map(|c| (c.position, c.confidence))
            .collect(),
        k,
        true,
    )
}

/// The `k` masked positions with the largest top-1/top-2 margin.
pub fn select_margin(state: &DecodingState, k: usize) -> Vec<Position> {
    top_k_by(
        state
            .candidates()
            .iter()
            .map(|c| (c.position, c.margin))
            .collect(),
        k,
        true,
    )
}

/// The `k` masked positions with the smallest normalized entropy.
pub fn select_entropy(state: &DecodingState, k: usize) -> Vec<Position> {
    top_k_by(
        state
            .candidates()
            .iter()
            .map(|c| (c.position, c.entropy_norm))
            .collect(),
        k,
        false,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfidencePolicy;

impl SelectionPolicy for ConfidencePolicy {
    fn name(&self) -> &'static str {
        "confidence"
    }

    fn select(&self, state: &DecodingState, k: usize) -> Result<Vec<Position>> {
        Ok(select_confidence(state, k))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MarginPolicy;

impl SelectionPolicy for MarginPolicy {
    fn name(&self) -> &'static str {
        "margin"
    }

    fn select(&self, state: &DecodingState, k: usize) -> Result<Vec<Position>> {
        Ok(select_margin(state, k))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntropyPolicy;

impl SelectionPolicy for EntropyPolicy {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn select(&self, state: &DecodingState, k: usize) -> Result<Vec<Position>> {
        Ok(select_entropy(state, k))
    }
}

/// How `r_i` combines the ranks of a candidate's neighbours.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Neighbour ranks weighted by neighbour confidence.
    #[default]
    ConfidenceWeighted,
    /// Plain mean of neighbour ranks.
    UniformAverage,
}

/// Whether saliency subtracts the uniform attention level before overlap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyExtraction {
    #[default]
    Enabled,
    /// Overlap is computed on the raw normalized attention.
    Disabled,
}

/// Which window members count as neighbours of a candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSet {
    /// Only other visual candidates (zero-saliency members excluded).
    #[default]
    Visual,
    /// Every other window member; non-visual neighbours contribute rank 0
    /// but still add their confidence to the normalizer.
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrcdConfig {
    /// Strength of the redundancy penalty, `>= 0`.
    pub alpha: f64,
    /// Window multiplier, `>= 1`.
    pub lambda: f64,
    pub aggregation: Aggregation,
    pub saliency_extraction: SaliencyExtraction,
    pub neighbor_set: NeighborSet,
    /// Fail instead of treating a window member without attention as non-visual.
    pub strict_attention: bool,
}

impl Default for VrcdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            lambda: 2.0,
            aggregation: Aggregation::default(),
            saliency_extraction: SaliencyExtraction::default(),
            neighbor_set: NeighborSet::default(),
            strict_attention: false,
        }
    }
}

impl VrcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 1.0) {
            return Err(Error::Config(format!(
                "lambda {} must be >= 1",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `min(|C_t|, max(k, ceil(lambda * k)))`.
pub fn window_size(num_masked: usize, k: usize, lambda: f64) -> usize {
    // absorb representation error so e.g. 1.1 * 10 stays 11
    let scaled = (lambda * k as f64 - 1e-9).ceil().max(0.0) as usize;
    num_masked.min(k.max(scaled))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowMember {
    pub position: Position,
    pub confidence: f64,
}

/// The highest-confidence masked positions considered for reranking.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateWindow {
    pub commit_size: usize,
    /// Members in confidence order (ties by position).
    pub members: Vec<WindowMember>,
}

impl CandidateWindow {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        self.members.iter().map(|m| m.position)
    }
}

pub fn build_window(state: &DecodingState, k: usize, lambda: f64) -> CandidateWindow {
    let size = window_size(state.num_masked(), k, lambda);
    let members = select_confidence(state, size)
        .into_iter()
        .map(|position| WindowMember {
            position,
            confidence: state.get(position).map_or(0.0, |c| c.confidence),
        })
        .collect();
    CandidateWindow {
        commit_size: k,
        members,
    }
}

/// Saliency for every window member, in window order.
pub fn window_saliency(
    state: &DecodingState,
    window: &CandidateWindow,
    config: &VrcdConfig,
) -> Result<Vec<SaliencyVector>> {
    let n = state.num_image_tokens();
    window
        .members
        .iter()
        .map(|m| {
            let attention = state.get(m.position).and_then(|c| c.attention.as_deref());
            match attention {
                Some(a) => match config.saliency_extraction {
                    SaliencyExtraction::Enabled => extract_saliency(m.position, a, n),
                    SaliencyExtraction::Disabled => raw_saliency(m.position, a, n),
                },
                None if config.strict_attention => Err(Error::MissingAttention {
                    position: m.position,
                }),
                None => {
                    log::warn!(
                        "step {}: position {} has no attention, treating as non-visual",
                        state.step_index(),
                        m.position
                    );
                    Ok(SaliencyVector::non_visual(m.position, n))
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub position: Position,
    pub confidence: f64,
    /// `r_i` in `[0, 1]`.
    pub redundancy: f64,
    /// `c_i * (1 + r_i)^-alpha`.
    pub score: f64,
}

/// Redundancy score and redundancy-controlled score for every window member.
///
/// `saliency` must be parallel to `window.members`.
pub fn compute_redundancy_scores(
    window: &CandidateWindow,
    saliency: &[SaliencyVector],
    config: &VrcdConfig,
) -> Result<Vec<ScoredCandidate>> {
    if saliency.len() != window.len() {
        return Err(Error::Dimension {
            expected: window.len(),
            actual: saliency.len(),
        });
    }
    let table = OverlapTable::compute(saliency)?.rank_all();
    Ok(score_with_table(window, saliency, &table, config))
}

fn score_with_table(
    window: &CandidateWindow,
    saliency: &[SaliencyVector],
    table: &OverlapTable,
    config: &VrcdConfig,
) -> Vec<ScoredCandidate> {
    let members = &window.members;
    members
        .iter()
        .enumerate()
        .map(|(i, member)| {
            let redundancy = if saliency[i].is_visual {
                let neighbours = (0..members.len()).filter(|&j| {
                    j != i
                        && match config.neighbor_set {
                            NeighborSet::Visual => saliency[j].is_visual,
                            NeighborSet::Window => true,
                        }
                });
                redundancy_of(i, neighbours, members, table, config.aggregation)
            } else {
                0.0
            };
            ScoredCandidate {
                position: member.position,
                confidence: member.confidence,
                redundancy,
                score: member.confidence * (1.0 + redundancy).powf(-config.alpha),
            }
        })
        .collect()
}

fn redundancy_of(
    i: usize,
    neighbours: impl Iterator<Item = usize>,
    members: &[WindowMember],
    table: &OverlapTable,
    aggregation: Aggregation,
) -> f64 {
    let mut count = 0usize;
    let mut weight_total = 0.0;
    let mut weighted = 0.0;
    let mut plain = 0.0;
    for j in neighbours {
        let rank = table.rank(i, j).unwrap_or(0.0);
        count += 1;
        weight_total += members[j].confidence;
        weighted += members[j].confidence * rank;
        plain += rank;
    }
    match aggregation {
        _ if count == 0 => 0.0,
        Aggregation::ConfidenceWeighted if weight_total > 0.0 => {
            (weighted / weight_total).clamp(0.0, 1.0)
        }
        Aggregation::ConfidenceWeighted => 0.0,
        Aggregation::UniformAverage => (plain / count as f64).clamp(0.0, 1.0),
    }
}

/// Full redundancy-controlled reranking of one step, kept for inspection.
#[derive(Debug, Clone)]
pub struct VrcdStep {
    pub window: CandidateWindow,
    pub saliency: Vec<SaliencyVector>,
    pub scored: Vec<ScoredCandidate>,
    pub selected: Vec<Position>,
}

/// Redundancy-controlled decoding: rerank the confidence window by
/// `c_i (1 + r_i)^-alpha` and commit the top `k`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VrcdPolicy {
    config: VrcdConfig,
}

impl VrcdPolicy {
    pub fn new(config: VrcdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &VrcdConfig {
        &self.config
    }

    pub fn explain(&self, state: &DecodingState, k: usize) -> Result<VrcdStep> {
        let window = build_window(state, k, self.config.lambda);
        let saliency = window_saliency(state, &window, &self.config)?;
        let scored = compute_redundancy_scores(&window, &saliency, &self.config)?;
        let selected = top_k_by(
            scored.iter().map(|s| (s.position, s.score)).collect(),
            k,
            true,
        );
        Ok(VrcdStep {
            window,
            saliency,
            scored,
            selected,
        })
    }
}

pub fn select_vrcd(state: &DecodingState, k: usize, config: &VrcdConfig) -> Result<Vec<Position>> {
    Ok(VrcdPolicy::new(*config)?.explain(state, k)?.selected)
}

impl SelectionPolicy for VrcdPolicy {
    fn name(&self) -> &'static str {
        "vrcd"
    }

    fn select(&self, state: &DecodingState, k: usize) -> Result<Vec<Position>> {
        Ok(self.explain(state, k)?.selected)
    }
}

/// Policy identifier as used on the command line and in output tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Confidence,
    Margin,
    Entropy,
    Vrcd,
}

impl PolicyKind {
    pub fn build(self, config: VrcdConfig) -> Result<Box<dyn SelectionPolicy>> {
        Ok(match self {
            Self::Confidence => Box::new(ConfidencePolicy),
            Self::Margin => Box::new(MarginPolicy),
            Self::Entropy => Box::new(EntropyPolicy),
            Self::Vrcd => Box::new(VrcdPolicy::new(config)?),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Confidence => "confidence",
            Self::Margin => "margin",
            Self::Entropy => "entropy",
            Self::Vrcd => "vrcd",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Self::Confidence),
            "margin" => Ok(Self::Margin),
            "entropy" => Ok(Self::Entropy),
            "vrcd" => Ok(Self::Vrcd),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }
}
