//! Parallel-unmasking selection policies for masked-diffusion decoders.
//!
//! A decoding run repeatedly asks a [`SelectionPolicy`] which masked
//! positions to commit, given a [`DecodingState`] produced by a
//! [`StateSource`]. Besides the confidence, margin and entropy baselines,
//! [`VrcdPolicy`] reranks the top-confidence window by how much each
//! candidate's visual saliency overlaps with the other likely candidates.
//!
//! States come from the seeded [`SyntheticOracle`] or from recorded traces
//! ([`trace`]), and every run reports per-step [`StepMetrics`].

pub mod engine;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod overhead;
pub mod policy;
pub mod saliency;
pub mod schedule;
pub mod state;
pub mod trace;

pub use engine::{run_decoding, CommitRecord, RunOptions, RunOutput, StateSource};
pub use error::{Error, Result};
pub use metrics::{aggregate, sign_test, vri, RunAggregate, SignTest, StepMetrics};
pub use oracle::{init_run, OracleConfig, SyntheticOracle};
pub use overhead::{selection_overhead, OverheadReport, TimingOptions};
pub use policy::{
    build_window, compute_redundancy_scores, select_confidence, ConfidencePolicy, EntropyPolicy, MarginPolicy,
    select_entropy, select_margin,
    select_vrcd, Aggregation, CandidateWindow, NeighborSet, PolicyKind, SaliencyExtraction,
    ScoredCandidate, SelectionPolicy, VrcdConfig, VrcdPolicy,
};
pub use saliency::{bhattacharyya_overlap, extract_saliency, pct_rank, OverlapTable, SaliencyVector};
pub use schedule::Schedule;
pub use state::{CandidatePrediction, DecodingState, Position, TokenId};
pub use trace::{read_trace, validate_trace, write_trace, Trace, TraceError, TraceHeader};
