use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vrcd_core::{
    Aggregation, NeighborSet, OracleConfig, PolicyKind, SaliencyExtraction, VrcdConfig,
};

#[derive(Debug, Parser)]
#[command(name = "vrcd", version, about = "Selection-policy experiments for masked-diffusion decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode synthetic oracle runs and write metric tables.
    Run(RunArgs),
    /// Re-decode recorded traces under a policy.
    Replay(ReplayArgs),
    /// Run a policy and a baseline on the same seeds or traces.
    Compare(CompareArgs),
    /// Check traces for structural violations; exits 1 if any are found.
    Validate(ValidateArgs),
    /// Time the selection stage against confidence selection.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Weighted,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NeighborArg {
    Visual,
    Window,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// confidence, margin, entropy or vrcd.
    #[arg(long, default_value = "vrcd")]
    pub policy: PolicyKind,
    /// Redundancy penalty; a comma-separated list runs a sweep.
    #[arg(long, value_delimiter = ',', default_value = "1.5")]
    pub alpha: Vec<f64>,
    /// Window multiplier.
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "weighted")]
    pub aggregation: AggregationArg,
    /// Compute overlap on raw attention instead of extracted saliency.
    #[arg(long)]
    pub no_vse: bool,
    /// Neighbour set for the redundancy score.
    #[arg(long, value_enum, default_value = "visual")]
    pub neighbors: NeighborArg,
    /// Fail when a window member has no attention.
    #[arg(long)]
    pub strict_attention: bool,
}

impl PolicyArgs {
    /// One entry per alpha for vrcd, a single entry otherwise.
    pub fn configs(&self) -> Vec<(PolicyKind, VrcdConfig)> {
        let base = VrcdConfig {
            alpha: 1.5,
            lambda: self.lambda,
            aggregation: match self.aggregation {
                AggregationArg::Weighted => Aggregation::ConfidenceWeighted,
                AggregationArg::Average => Aggregation::UniformAverage,
            },
            saliency_extraction: if self.no_vse {
                SaliencyExtraction::Disabled
            } else {
                SaliencyExtraction::Enabled
            },
            neighbor_set: match self.neighbors {
                NeighborArg::Visual => NeighborSet::Visual,
                NeighborArg::Window => NeighborSet::Window,
            },
            strict_attention: self.strict_attention,
        };
        match self.policy {
            PolicyKind::Vrcd => self
                .alpha
                .iter()
                .map(|&alpha| (PolicyKind::Vrcd, VrcdConfig { alpha, ..base }))
                .collect(),
            other => vec![(other, base)],
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SeedArgs {
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',', conflicts_with = "num_seeds")]
    pub seeds: Option<Vec<u64>>,
    /// Number of consecutive seeds starting at --seed-base.
    #[arg(short = 'n', long, default_value_t = 10)]
    pub num_seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
}

impl SeedArgs {
    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (self.seed_base..self.seed_base + self.num_seeds).collect(),
        }
    }
}

/// Oracle settings; unset values fall back to the planted defaults.
#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Generation length L.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub num_image_tokens: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub regions: Option<usize>,
    /// Uniform attention mixed into every row (epsilon).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Top-region confidence boost (beta).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Per-new-region confidence gain (delta).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Base confidence Beta shape, as `a,b`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub confidence_shape: Option<Vec<f64>>,
    #[arg(long)]
    pub randomize_regions: bool,
}

impl OracleArgs {
    pub fn config(&self, seed: u64) -> OracleConfig {
        let d = OracleConfig::planted(seed);
        OracleConfig {
            length: self.length.unwrap_or(d.length),
            num_image_tokens: self.num_image_tokens.unwrap_or(d.num_image_tokens),
            vocab_size: self.vocab_size.unwrap_or(d.vocab_size),
            num_regions: self.regions.unwrap_or(d.num_regions),
            region_noise: self.noise.unwrap_or(d.region_noise),
            overlap_pressure: self.beta.unwrap_or(d.overlap_pressure),
            coverage_boost: self.delta.unwrap_or(d.coverage_boost),
            confidence_shape: self
                .confidence_shape
                .as_deref()
                .map_or(d.confidence_shape, |s| (s[0], s[1])),
            seed,
            randomize_regions: self.randomize_regions,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    /// Forward ratio; the commit size is round(1 / FR).
    #[arg(long, default_value_t = 0.25)]
    pub fr: f64,
    /// Output directory for the CSV tables.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write every run as a trace into this directory.
    #[arg(long)]
    pub export_traces: Option<PathBuf>,
    /// Number of top-confidence positions whose attention is exported;
    /// defaults to ceil(2.5 K).
    #[arg(long)]
    pub attention_window: Option<usize>,
    /// Store exported attention densely. Sparse storage drops weights below
    /// 1/(4N), which changes VRI computed on replay.
    #[arg(long)]
    pub dense_attention: bool,
    /// Skip the selection-overhead measurement.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Trace files, or directories of `.jsonl` traces.
    #[arg(long, required = true, num_args = 1..)]
    pub trace: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Policy the first one is compared against.
    #[arg(long, default_value = "confidence")]
    pub baseline: PolicyKind,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    #[arg(long, default_value_t = 0.25)]
    pub fr: f64,
    /// Compare on recorded traces instead of the oracle.
    #[arg(long, num_args = 1..)]
    pub trace: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub trace: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    /// Forward ratios to time, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0.25")]
    pub fr: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 15)]
    pub repetitions: usize,
    /// Also time the pair stage on a grid of window sizes M.
    #[arg(long, value_delimiter = ',')]
    pub pair_windows: Vec<usize>,
    /// Image-token counts N for the pair-stage grid.
    #[arg(long, value_delimiter = ',', default_value = "256")]
    pub pair_tokens: Vec<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}
