//! Line-delimited JSON decoding traces.
//!
//! A trace is one header object followed by one object per decoding step,
//! each on its own line and tagged by `"kind"`. Floats are written with
//! 9 significant digits. Attention is written either dense (`N` weights)
//! or sparse (`[index, weight]` pairs above a threshold, renormalized);
//! readers always densify.
//!
//! ```text
//! {"kind":"header","schema_version":1,"run_id":"...","length":4,"num_image_tokens":4,...}
//! {"kind":"step","step":0,"masked":[0,1,2,3],"commit_size":2,"candidates":[...],"committed":[0,2]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::engine::{CommitRecord, StateSource};
use crate::error::Error;
use crate::policy::select_confidence;
use crate::schedule::Schedule;
use crate::state::{CandidatePrediction, DecodingState, Position, TokenId};

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance on the attention sum of a stored record.
pub const TRACE_ATTENTION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported trace schema version {found} (supported: {SCHEMA_VERSION})")]
    UnsupportedSchema { found: u32 },

    #[error("trace has no header line")]
    MissingHeader,

    #[error("refusing to write step {step}: {reason}")]
    Refused { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSourceKind {
    Synthetic,
    Captured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub run_id: String,
    pub length: usize,
    pub num_image_tokens: usize,
    pub vocab_size: usize,
    #[serde(serialize_with = "sig9")]
    pub forward_ratio: f64,
    /// Number of top-confidence positions whose attention is stored per step.
    pub attention_window: usize,
    pub source: TraceSourceKind,
    /// Opaque identifiers of the image and prompt the run was conditioned on.
    #[serde(default)]
    pub conditioning_note: String,
}

/// Default attention window for commit size `k`: `ceil(2.5 k)`, enough to
/// replay any window multiplier up to 2.5 losslessly.
pub fn default_attention_window(k: usize) -> usize {
    (5 * k).div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub position: Position,
    pub token: TokenId,
    pub confidence: f64,
    pub margin: f64,
    pub entropy_norm: f64,
    pub top_probabilities: Vec<f64>,
    /// Dense attention over the image tokens, when recorded.
    pub attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub masked: Vec<Position>,
    pub commit_size: usize,
    pub candidates: Vec<CandidateRecord>,
    pub committed: Option<Vec<Position>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionEncoding {
    Dense,
    /// Drop weights below `threshold` (default `1/(4N)`) and renormalize.
    Sparse { threshold: Option<f64> },
}

impl Default for AttentionEncoding {
    fn default() -> Self {
        Self::Sparse { threshold: None }
    }
}

fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn sig9<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig9(*x))
}

fn sig9_vec<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(xs.iter().map(|&x| round_sig9(x)))
}

fn sig9_pairs<S: Serializer>(xs: &[(usize, f64)], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(xs.iter().map(|&(i, w)| (i, round_sig9(w))))
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AttentionWire {
    Dense(#[serde(serialize_with = "sig9_vec")] Vec<f64>),
    Sparse(#[serde(serialize_with = "sig9_pairs")] Vec<(usize, f64)>),
}

#[derive(Serialize, Deserialize)]
struct CandidateWire {
    position: Position,
    token: TokenId,
    #[serde(serialize_with = "sig9")]
    confidence: f64,
    #[serde(serialize_with = "sig9")]
    margin: f64,
    #[serde(serialize_with = "sig9")]
    entropy_norm: f64,
    #[serde(default, serialize_with = "sig9_vec", skip_serializing_if = "Vec::is_empty")]
    top_probabilities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention: Option<AttentionWire>,
}

#[derive(Serialize, Deserialize)]
struct StepWire {
    step: usize,
    masked: Vec<Position>,
    commit_size: usize,
    candidates: Vec<CandidateWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    committed: Option<Vec<Position>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(TraceHeader),
    Step(StepWire),
}

fn encode_attention(weights: &[f64], encoding: AttentionEncoding) -> AttentionWire {
    match encoding {
        AttentionEncoding::Dense => AttentionWire::Dense(weights.to_vec()),
        AttentionEncoding::Sparse { threshold } => {
            let threshold = threshold.unwrap_or(0.25 / weights.len() as f64);
            let kept: Vec<(usize, f64)> = weights
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, w)| w >= threshold && w > 0.0)
                .collect();
            let total: f64 = kept.iter().map(|&(_, w)| w).sum();
            let kept = if total > 0.0 {
                kept.into_iter().map(|(i, w)| (i, w / total)).collect()
            } else {
                kept
            };
            AttentionWire::Sparse(kept)
        }
    }
}

fn check_record(header: &TraceHeader, step: &StepRecord) -> Result<(), String> {
    let l = header.length;
    if let Some(p) = step.masked.iter().find(|&&p| p >= l) {
        return Err(format!("masked position {p} outside [0, {l})"));
    }
    if let Some(p) = step.committed.iter().flatten().find(|&&p| p >= l) {
        return Err(format!("committed position {p} outside [0, {l})"));
    }
    for c in &step.candidates {
        if c.position >= l {
            return Err(format!("candidate position {} outside [0, {l})", c.position));
        }
        if let Some(a) = &c.attention {
            if a.len() != header.num_image_tokens {
                return Err(format!(
                    "position {}: attention has {} entries, header says N = {}",
                    c.position,
                    a.len(),
                    header.num_image_tokens
                ));
            }
        }
    }
    Ok(())
}

/// Writes `trace` as line-delimited JSON, header first.
pub fn write_trace<W: Write>(
    mut writer: W,
    trace: &Trace,
    encoding: AttentionEncoding,
) -> Result<(), TraceError> {
    if trace.header.attention_window == 0 {
        return Err(TraceError::Refused {
            step: 0,
            reason: "attention_window must be at least 1".into(),
        });
    }
    serde_json::to_writer(&mut writer, &Line::Header(trace.header.clone()))
        .map_err(std::io::Error::from)?;
    writer.write_all(b"\n")?;
    let mut previous: Option<usize> = None;
    for step in &trace.steps {
        if previous.is_some_and(|p| step.step <= p) {
            return Err(TraceError::Refused {
                step: step.step,
                reason: "step indices must increase".into(),
            });
        }
        previous = Some(step.step);
        check_record(&trace.header, step).map_err(|reason| TraceError::Refused {
            step: step.step,
            reason,
        })?;
        let wire = StepWire {
            step: step.step,
            masked: step.masked.clone(),
            commit_size: step.commit_size,
            candidates: step
                .candidates
                .iter()
                .map(|c| CandidateWire {
                    position: c.position,
                    token: c.token,
                    confidence: c.confidence,
                    margin: c.margin,
                    entropy_norm: c.entropy_norm,
                    top_probabilities: c.top_probabilities.clone(),
                    attention: c.attention.as_deref().map(|a| encode_attention(a, encoding)),
                })
                .collect(),
            committed: step.committed.clone(),
        };
        serde_json::to_writer(&mut writer, &Line::Step(wire)).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a trace, densifying sparse attention. Unknown fields are ignored.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut header: Option<TraceHeader> = None;
    let mut steps = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let parse_err = |message: String| TraceError::Parse {
            line: line_no,
            message,
        };
        match (parsed, &header) {
            (Line::Header(h), None) => {
                if h.schema_version != SCHEMA_VERSION {
                    return Err(TraceError::UnsupportedSchema {
                        found: h.schema_version,
                    });
                }
                header = Some(h);
            }
            (Line::Header(_), Some(_)) => return Err(parse_err("second header line".into())),
            (Line::Step(_), None) => return Err(parse_err("step line before header".into())),
            (Line::Step(wire), Some(h)) => {
                let n = h.num_image_tokens;
                let candidates = wire
                    .candidates
                    .into_iter()
                    .map(|c| {
                        let attention = match c.attention {
                            None => None,
                            Some(AttentionWire::Dense(v)) => Some(v),
                            Some(AttentionWire::Sparse(pairs)) => {
                                let mut dense = vec![0.0; n];
                                for (i, w) in pairs {
                                    let slot = dense.get_mut(i).ok_or_else(|| {
                                        parse_err(format!(
                                            "position {}: sparse attention index {i} >= N = {n}",
                                            c.position
                                        ))
                                    })?;
                                    *slot = w;
                                }
                                Some(dense)
                            }
                        };
                        Ok(CandidateRecord {
                            position: c.position,
                            token: c.token,
                            confidence: c.confidence,
                            margin: c.margin,
                            entropy_norm: c.entropy_norm,
                            top_probabilities: c.top_probabilities,
                            attention,
                        })
                    })
                    .collect::<Result<_, TraceError>>()?;
                steps.push(StepRecord {
                    step: wire.step,
                    masked: wire.masked,
                    commit_size: wire.commit_size,
                    candidates,
                    committed: wire.committed,
                });
            }
        }
    }
    let header = header.ok_or(TraceError::MissingHeader)?;
    Ok(Trace { header, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    StepOrder,
    PositionRange,
    DuplicatePosition,
    MissingCandidate,
    UnexpectedCandidate,
    ProbabilityRange,
    AttentionDimension,
    AttentionNormalization,
    AttentionCoverage,
    CommitSize,
    CommittedNotMasked,
    NonMonotoneUnmasking,
    ScheduleMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub step: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

pub fn validate_trace(trace: &Trace) -> ValidationReport {
    let h = &trace.header;
    let mut out = Vec::new();
    let mut push = |step: Option<usize>, kind, detail: String| {
        out.push(Violation { step, kind, detail });
    };

    let mut previous: Option<(&StepRecord, BTreeSet<Position>)> = None;
    for (idx, rec) in trace.steps.iter().enumerate() {
        let t = Some(rec.step);
        if rec.step != idx {
            push(t, ViolationKind::StepOrder, format!("record {idx} has step index {}", rec.step));
        }
        let masked: BTreeSet<Position> = rec.masked.iter().copied().collect();
        if masked.len() != rec.masked.len() {
            push(t, ViolationKind::DuplicatePosition, "masked list repeats a position".into());
        }
        for &p in masked.iter().filter(|&&p| p >= h.length) {
            push(t, ViolationKind::PositionRange, format!("masked position {p} >= L = {}", h.length));
        }

        let mut seen = BTreeSet::new();
        for c in &rec.candidates {
            let p = c.position;
            if !seen.insert(p) {
                push(t, ViolationKind::DuplicatePosition, format!("position {p} has two entries"));
            }
            if !masked.contains(&p) {
                push(t, ViolationKind::UnexpectedCandidate, format!("position {p} is not masked"));
            }
            let in_unit = |x: f64| (0.0..=1.0).contains(&x);
            if !(in_unit(c.confidence) && in_unit(c.margin) && in_unit(c.entropy_norm))
                || c.margin > c.confidence + 1e-6
                || !c.top_probabilities.iter().all(|&x| in_unit(x))
            {
                push(t, ViolationKind::ProbabilityRange, format!("position {p}: probabilities out of range"));
            }
            if let Some(a) = &c.attention {
                if a.len() != h.num_image_tokens {
                    push(
                        t,
                        ViolationKind::AttentionDimension,
                        format!("position {p}: {} attention entries, N = {}", a.len(), h.num_image_tokens),
                    );
                } else {
                    let sum: f64 = a.iter().sum();
                    if a.iter().any(|&w| w.is_nan() || w < 0.0) || (sum - 1.0).abs() > TRACE_ATTENTION_TOLERANCE {
                        push(
                            t,
                            ViolationKind::AttentionNormalization,
                            format!("position {p}: attention sums to {sum}"),
                        );
                    }
                }
            }
        }
        for p in masked.difference(&seen) {
            push(t, ViolationKind::MissingCandidate, format!("masked position {p} has no entry"));
        }

        // coverage: the top-W confidence positions must carry attention
        let candidates: Vec<CandidatePrediction> = rec
            .candidates
            .iter()
            .filter(|c| c.position < h.length)
            .map(|c| CandidatePrediction {
                position: c.position,
                predicted_token: c.token,
                confidence: c.confidence.clamp(0.0, 1.0),
                margin: 0.0,
                entropy_norm: 0.0,
                attention: None,
                top_probabilities: Vec::new(),
            })
            .collect();
        if let Ok(view) = DecodingState::new(rec.step, h.length, h.num_image_tokens.max(1), candidates) {
            for p in select_confidence(&view, h.attention_window) {
                let has = rec.candidates.iter().any(|c| c.position == p && c.attention.is_some());
                if !has {
                    push(
                        t,
                        ViolationKind::AttentionCoverage,
                        format!("position {p} is within the top-{} but has no attention", h.attention_window),
                    );
                }
            }
        }

        if rec.commit_size == 0 {
            push(t, ViolationKind::CommitSize, "commit_size is zero".into());
        }
        if let Some(committed) = &rec.committed {
            let set: BTreeSet<Position> = committed.iter().copied().collect();
            if set.len() != rec.commit_size.min(masked.len()) || set.len() != committed.len() {
                push(
                    t,
                    ViolationKind::CommitSize,
                    format!("{} committed, expected min({}, {})", committed.len(), rec.commit_size, masked.len()),
                );
            }
            for p in set.difference(&masked) {
                push(t, ViolationKind::CommittedNotMasked, format!("committed position {p} is not masked"));
            }
        }

        if let Some((prev, prev_masked)) = &previous {
            for p in masked.difference(prev_masked) {
                push(t, ViolationKind::NonMonotoneUnmasking, format!("position {p} was unmasked and is masked again"));
            }
            if let Some(prev_committed) = &prev.committed {
                for p in prev_committed.iter().filter(|p| masked.contains(p)) {
                    push(
                        t,
                        ViolationKind::NonMonotoneUnmasking,
                        format!("position {p} was committed at step {} but is still masked", prev.step),
                    );
                }
                let expected: BTreeSet<Position> = prev_masked
                    .iter()
                    .filter(|p| !prev_committed.contains(p))
                    .copied()
                    .collect();
                for p in expected.difference(&masked) {
                    push(
                        t,
                        ViolationKind::NonMonotoneUnmasking,
                        format!("position {p} disappeared without being committed"),
                    );
                }
            }
        }
        previous = Some((rec, masked));
    }

    match Schedule::uniform(h.length, h.forward_ratio) {
        Ok(schedule) => {
            let sizes: Vec<usize> = trace.steps.iter().map(|s| s.commit_size).collect();
            if !trace.steps.is_empty() && sizes != schedule.commit_sizes() {
                push(
                    None,
                    ViolationKind::ScheduleMismatch,
                    format!(
                        "commit sizes do not follow the uniform schedule for L = {}, FR = {} ({} steps recorded, {} expected)",
                        h.length,
                        h.forward_ratio,
                        sizes.len(),
                        schedule.steps()
                    ),
                );
            }
        }
        Err(e) => push(None, ViolationKind::ScheduleMismatch, e.to_string()),
    }

    ValidationReport { violations: out }
}

impl CandidateRecord {
    pub fn from_prediction(c: &CandidatePrediction, with_attention: bool) -> Self {
        Self {
            position: c.position,
            token: c.predicted_token,
            confidence: c.confidence,
            margin: c.margin,
            entropy_norm: c.entropy_norm,
            top_probabilities: c.top_probabilities.clone(),
            attention: with_attention.then(|| c.attention.as_deref().map(<[f64]>::to_vec)).flatten(),
        }
    }

    /// Converts back to a prediction, renormalizing stored attention.
    pub fn to_prediction(&self) -> CandidatePrediction {
        let attention = self.attention.as_ref().and_then(|a| {
            let sum: f64 = a.iter().sum();
            (sum > 0.0).then(|| a.iter().map(|w| w / sum).collect::<Vec<_>>().into())
        });
        CandidatePrediction {
            position: self.position,
            predicted_token: self.token,
            confidence: self.confidence.clamp(0.0, 1.0),
            margin: self.margin.clamp(0.0, 1.0).min(self.confidence.clamp(0.0, 1.0)),
            entropy_norm: self.entropy_norm.clamp(0.0, 1.0),
            attention,
            top_probabilities: self.top_probabilities.clone(),
        }
    }
}

/// Wraps a source and records every state it yields together with the
/// commit applied to it.
pub struct TraceRecorder<S> {
    inner: S,
    attention_window: usize,
    steps: Vec<StepRecord>,
}

impl<S: StateSource> TraceRecorder<S> {
    pub fn new(inner: S, attention_window: usize) -> Self {
        Self {
            inner,
            attention_window,
            steps: Vec::new(),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn into_trace(self, header: TraceHeader) -> Trace {
        Trace {
            header: TraceHeader {
                attention_window: self.attention_window,
                ..header
            },
            steps: self.steps,
        }
    }
}

impl<S: StateSource> StateSource for TraceRecorder<S> {
    fn current(&self) -> Option<&DecodingState> {
        self.inner.current()
    }

    fn advance(&mut self, commit: &CommitRecord) -> crate::error::Result<()> {
        if let Some(state) = self.inner.current() {
            let with_attention: BTreeSet<Position> =
                select_confidence(state, self.attention_window).into_iter().collect();
            self.steps.push(StepRecord {
                step: state.step_index(),
                masked: state.masked_positions().collect(),
                commit_size: commit.committed_positions.len(),
                candidates: state
                    .candidates()
                    .iter()
                    .map(|c| CandidateRecord::from_prediction(c, with_attention.contains(&c.position)))
                    .collect(),
                committed: Some(commit.committed_positions.clone()),
            });
        }
        self.inner.advance(commit)
    }
}

/// Replays recorded states as a [`StateSource`].
///
/// The replay tracks its own mask. When the replayed policy commits
/// differently from the recording, positions the recording had already
/// committed fall back to their most recent recorded prediction, so replay
/// after the first divergence is an approximation.
pub struct TraceReplay {
    header: TraceHeader,
    steps: Vec<StepRecord>,
    cursor: usize,
    masked: BTreeSet<Position>,
    latest: BTreeMap<Position, CandidateRecord>,
    state: Option<DecodingState>,
}

impl TraceReplay {
    pub fn new(trace: Trace) -> crate::error::Result<Self> {
        let Trace { header, steps } = trace;
        let masked = steps
            .first()
            .map(|s| s.masked.iter().copied().collect())
            .unwrap_or_default();
        let mut replay = Self {
            header,
            steps,
            cursor: 0,
            masked,
            latest: BTreeMap::new(),
            state: None,
        };
        replay.state = replay.build(0)?;
        Ok(replay)
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    /// Commit sizes as recorded.
    pub fn schedule(&self) -> crate::error::Result<Schedule> {
        Schedule::from_commit_sizes(
            self.steps.iter().map(|s| s.commit_size).sum(),
            self.steps.iter().map(|s| s.commit_size).collect(),
        )
    }

    pub fn recorded_commits(&self) -> Vec<Option<Vec<Position>>> {
        self.steps.iter().map(|s| s.committed.clone()).collect()
    }

    fn build(&mut self, step: usize) -> crate::error::Result<Option<DecodingState>> {
        let Some(record) = self.steps.get(step) else {
            return Ok(None);
        };
        for c in &record.candidates {
            self.latest.insert(c.position, c.clone());
        }
        let candidates = self
            .masked
            .iter()
            .map(|p| {
                self.latest
                    .get(p)
                    .map(CandidateRecord::to_prediction)
                    .ok_or_else(|| Error::SourceContract {
                        step,
                        reason: format!("trace has no prediction for masked position {p}"),
                    })
            })
            .collect::<crate::error::Result<Vec<_>>>()?;
        DecodingState::new(step, self.header.length, self.header.num_image_tokens, candidates).map(Some)
    }
}

impl StateSource for TraceReplay {
    fn current(&self) -> Option<&DecodingState> {
        self.state.as_ref()
    }

    fn advance(&mut self, commit: &CommitRecord) -> crate::error::Result<()> {
        for p in &commit.committed_positions {
            if !self.masked.remove(p) {
                return Err(Error::SourceContract {
                    step: self.cursor,
                    reason: format!("position {p} is not masked"),
                });
            }
        }
        self.cursor += 1;
        self.state = if self.masked.is_empty() {
            None
        } else {
            self.build(self.cursor)?
        };
        Ok(())
    }
}
