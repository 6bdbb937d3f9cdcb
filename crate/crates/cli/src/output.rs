//! CSV tables. Every row starts with `schema_version` so downstream
//! scripts can detect layout changes.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use vrcd_core::{PolicyKind, RunAggregate, VrcdConfig};

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Policy columns shared by the summary and bench tables. The csv writer
/// cannot flatten nested structs, so rows repeat these fields.
#[derive(Debug, Clone)]
pub struct PolicyColumns {
    pub policy: String,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub aggregation: Option<&'static str>,
    pub vse: Option<bool>,
}

impl PolicyColumns {
    pub fn new(kind: PolicyKind, config: &VrcdConfig) -> Self {
        let vrcd = kind == PolicyKind::Vrcd;
        Self {
            policy: label(kind, config),
            alpha: vrcd.then_some(config.alpha),
            lambda: vrcd.then_some(config.lambda),
            aggregation: vrcd.then_some(match config.aggregation {
                vrcd_core::Aggregation::ConfidenceWeighted => "weighted",
                vrcd_core::Aggregation::UniformAverage => "average",
            }),
            vse: vrcd.then_some(config.saliency_extraction == vrcd_core::SaliencyExtraction::Enabled),
        }
    }
}

/// Short name used in tables and file names, e.g. `vrcd_a1.5`.
pub fn label(kind: PolicyKind, config: &VrcdConfig) -> String {
    match kind {
        PolicyKind::Vrcd => format!("vrcd_a{}", config.alpha),
        other => other.to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub policy: String,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub aggregation: Option<&'static str>,
    pub vse: Option<bool>,
    pub length: Option<usize>,
    pub forward_ratio: Option<f64>,
    pub runs: usize,
    pub committed_steps: usize,
    pub mean_vri_micro: Option<f64>,
    pub mean_vri_macro: Option<f64>,
    pub analyzed_steps: usize,
    pub changed_positions: usize,
    pub mean_change_count: Option<f64>,
    pub change_rate: Option<f64>,
    pub overhead_ratio: Option<f64>,
}

impl SummaryRow {
    pub fn new(
        policy: PolicyColumns,
        length: Option<usize>,
        forward_ratio: Option<f64>,
        agg: &RunAggregate,
        overhead_ratio: Option<f64>,
    ) -> Self {
        let PolicyColumns {
            policy,
            alpha,
            lambda,
            aggregation,
            vse,
        } = policy;
        Self {
            schema_version: CSV_SCHEMA_VERSION,
            policy,
            alpha,
            lambda,
            aggregation,
            vse,
            length,
            forward_ratio,
            runs: agg.runs,
            committed_steps: agg.committed_steps,
            mean_vri_micro: agg.mean_vri_micro,
            mean_vri_macro: agg.mean_vri_macro,
            analyzed_steps: agg.analyzed_step_count,
            changed_positions: agg.total_changed,
            mean_change_count: agg.mean_change_count,
            change_rate: agg.change_rate,
            overhead_ratio,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CurveRow {
    pub schema_version: u32,
    pub policy: String,
    pub step_index: usize,
    pub runs: usize,
    pub mean_vri: f64,
    pub entropy_runs: usize,
    pub mean_remaining_entropy: Option<f64>,
}

pub fn curve_rows(policy: &str, agg: &RunAggregate) -> Vec<CurveRow> {
    agg.curve
        .iter()
        .map(|p| CurveRow {
            schema_version: CSV_SCHEMA_VERSION,
            policy: policy.to_string(),
            step_index: p.step_index,
            runs: p.runs,
            mean_vri: p.mean_vri,
            entropy_runs: p.entropy_runs,
            mean_remaining_entropy: p.mean_remaining_entropy,
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct CompareRow {
    pub schema_version: u32,
    pub policy: String,
    pub baseline: String,
    pub step_index: usize,
    pub runs: usize,
    pub mean_vri: f64,
    pub baseline_mean_vri: f64,
    pub vri_delta: f64,
    pub mean_remaining_entropy: Option<f64>,
    pub baseline_mean_remaining_entropy: Option<f64>,
    pub entropy_delta: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub schema_version: u32,
    pub policy: String,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub aggregation: Option<&'static str>,
    pub vse: Option<bool>,
    pub forward_ratio: f64,
    pub commit_size: usize,
    pub states: usize,
    pub mean_window: f64,
    pub num_image_tokens: usize,
    pub confidence_ns: f64,
    pub policy_ns: f64,
    pub ratio: f64,
    pub saliency_ns: f64,
    pub pair_ns: f64,
    pub scoring_ns: f64,
}

#[derive(Debug, Serialize)]
pub struct PairCostRow {
    pub schema_version: u32,
    pub window: usize,
    pub num_image_tokens: usize,
    pub median_ns: u64,
}

pub fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let mut writer = csv::Writer::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    log::info!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}
