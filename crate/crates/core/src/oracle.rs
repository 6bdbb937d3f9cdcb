//! Seeded synthetic state source with planted visual-grounding structure.
//!
//! Image tokens are split into `G` regions and every text position attends
//! to one region (plus `epsilon` of uniform noise). Confidence comes from a
//! Beta draw; at every step the positions sharing the region of the current
//! top-confidence position are boosted by `1 + beta`, which puts visually
//! redundant candidates at the top of the confidence ranking. Committing a
//! region for the first time multiplies every remaining confidence by
//! `1 + delta`, so complementary commits lower later entropy.
//!
//! `beta = 0`, `delta = 0` and `epsilon = 1` switch the three effects off.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::engine::{CommitRecord, StateSource};
use crate::error::{Error, Result};
use crate::state::{CandidatePrediction, DecodingState, Position, TokenId};

/// Highest confidence the oracle ever reports.
pub const CONFIDENCE_CEILING: f64 = 0.999;

/// Number of top token probabilities attached to each prediction.
const TOP_PROBABILITIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub length: usize,
    pub num_image_tokens: usize,
    pub vocab_size: usize,
    pub num_regions: usize,
    /// Share of uniform attention mixed into every row (`epsilon`).
    pub region_noise: f64,
    /// Confidence boost for the current top region (`beta`), in `[0, 1]`.
    pub overlap_pressure: f64,
    /// Per-new-region confidence gain on commit (`delta`), `>= 0`.
    pub coverage_boost: f64,
    /// Beta shape parameters of the base confidence draw.
    pub confidence_shape: (f64, f64),
    pub seed: u64,
    /// Assign image tokens to regions at random instead of contiguous blocks.
    pub randomize_regions: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::planted(0)
    }
}

impl OracleConfig {
    /// Settings with redundancy planted among top candidates, used by the
    /// directional comparisons: `L = 192`, `N = 192`, `G = 96`, `epsilon = 0.1`,
    /// `beta = 0.5`, `delta = 0.03`, confidence ~ Beta(2, 5).
    ///
    /// With few regions every region is covered within a handful of steps
    /// and the coverage effect stops separating policies; with large `delta`
    /// confidences pile up at the ceiling.
    pub fn planted(seed: u64) -> Self {
        Self {
            length: 192,
            num_image_tokens: 192,
            vocab_size: 1024,
            num_regions: 96,
            region_noise: 0.1,
            overlap_pressure: 0.5,
            coverage_boost: 0.03,
            confidence_shape: (2.0, 5.0),
            seed,
            randomize_regions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.length == 0 || self.num_image_tokens == 0 {
            return fail("length and num_image_tokens must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be >= 2", self.vocab_size));
        }
        if self.num_regions == 0 || self.num_regions > self.num_image_tokens {
            return fail(format!(
                "num_regions {} must be in [1, {}]",
                self.num_regions, self.num_image_tokens
            ));
        }
        if !(0.0..=1.0).contains(&self.region_noise) {
            return fail(format!("region_noise {} outside [0, 1]", self.region_noise));
        }
        if !(0.0..=1.0).contains(&self.overlap_pressure) {
            return fail(format!(
                "overlap_pressure {} outside [0, 1]",
                self.overlap_pressure
            ));
        }
        if !(self.coverage_boost.is_finite() && self.coverage_boost >= 0.0) {
            return fail(format!("coverage_boost {} must be >= 0", self.coverage_boost));
        }
        let (a, b) = self.confidence_shape;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return fail(format!("confidence shape ({a}, {b}) must be positive"));
        }
        Ok(())
    }
}

/// Which region each position attends to and which image tokens form each region.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentAssignment {
    pub position_region: Vec<usize>,
    pub region_tokens: Vec<Vec<usize>>,
}

/// Closed-form margin of a distribution with mass `c` on one token and the
/// rest spread evenly over the other `V - 1`.
pub fn peaked_margin(c: f64, vocab_size: usize) -> f64 {
    c - (1.0 - c) / (vocab_size - 1) as f64
}

/// Closed-form normalized entropy of the same peaked distribution.
pub fn peaked_entropy(c: f64, vocab_size: usize) -> f64 {
    let rest = 1.0 - c;
    let mut h = 0.0;
    if c > 0.0 {
        h -= c * c.ln();
    }
    if rest > 0.0 {
        h -= rest * (rest / (vocab_size - 1) as f64).ln();
    }
    h / (vocab_size as f64).ln()
}

pub struct SyntheticOracle {
    config: OracleConfig,
    latent: LatentAssignment,
    region_attention: Vec<Arc<[f64]>>,
    tokens: Vec<TokenId>,
    base_confidence: Vec<f64>,
    covered: Vec<bool>,
    masked: BTreeSet<Position>,
    state: DecodingState,
}

/// Builds the oracle and its step-0 state.
pub fn init_run(config: OracleConfig) -> Result<SyntheticOracle> {
    SyntheticOracle::new(config)
}

impl SyntheticOracle {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.num_image_tokens;
        let g = config.num_regions;

        let mut order: Vec<usize> = (0..n).collect();
        if config.randomize_regions {
            order.shuffle(&mut rng);
        }
        let region_tokens: Vec<Vec<usize>> = (0..g)
            .map(|r| {
                let mut tokens = order[r * n / g..(r + 1) * n / g].to_vec();
                tokens.sort_unstable();
                tokens
            })
            .collect();
        let region_attention = region_tokens
            .iter()
            .map(|tokens| region_row(tokens, n, config.region_noise))
            .collect();

        let position_region: Vec<usize> =
            (0..config.length).map(|_| rng.random_range(0..g)).collect();
        let tokens = (0..config.length)
            .map(|_| rng.random_range(0..config.vocab_size) as TokenId)
            .collect();
        let (a, b) = config.confidence_shape;
        let beta = Beta::new(a, b).map_err(|e| Error::Config(e.to_string()))?;
        let floor = 1.0 / config.vocab_size as f64;
        let base_confidence = (0..config.length)
            .map(|_| beta.sample(&mut rng).clamp(floor, CONFIDENCE_CEILING))
            .collect();

        let masked = (0..config.length).collect();
        let mut oracle = Self {
            latent: LatentAssignment {
                position_region,
                region_tokens,
            },
            region_attention,
            tokens,
            base_confidence,
            covered: vec![false; g],
            masked,
            state: DecodingState::new(0, config.length, n, Vec::new())?,
            config,
        };
        oracle.state = oracle.build_state(0)?;
        Ok(oracle)
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn latent(&self) -> &LatentAssignment {
        &self.latent
    }

    pub fn region_of(&self, position: Position) -> usize {
        self.latent.position_region[position]
    }

    fn clamp_confidence(&self, c: f64) -> f64 {
        c.clamp(1.0 / self.config.vocab_size as f64, CONFIDENCE_CEILING)
    }

    fn build_state(&self, step: usize) -> Result<DecodingState> {
        let v = self.config.vocab_size;
        // top base confidence among masked positions, ties to the lowest position
        let top_region = self
            .masked
            .iter()
            .copied()
            .fold(None::<Position>, |best, p| match best {
                Some(b) if self.base_confidence[b] >= self.base_confidence[p] => Some(b),
                _ => Some(p),
            })
            .map(|p| self.latent.position_region[p]);
        let boost = 1.0 + self.config.overlap_pressure;

        let candidates = self
            .masked
            .iter()
            .map(|&p| {
                let region = self.latent.position_region[p];
                let mut c = self.base_confidence[p];
                if Some(region) == top_region {
                    c *= boost;
                }
                let c = self.clamp_confidence(c);
                let rest = (1.0 - c) / (v - 1) as f64;
                let mut top = vec![c];
                top.extend(std::iter::repeat_n(rest, (v - 1).min(TOP_PROBABILITIES - 1)));
                CandidatePrediction {
                    position: p,
                    predicted_token: self.tokens[p],
                    confidence: c,
                    margin: peaked_margin(c, v),
                    entropy_norm: peaked_entropy(c, v),
                    attention: Some(Arc::clone(&self.region_attention[region])),
                    top_probabilities: top,
                }
            })
            .collect();
        DecodingState::new(
            step,
            self.config.length,
            self.config.num_image_tokens,
            candidates,
        )
    }
}

fn region_row(tokens: &[usize], n: usize, noise: f64) -> Arc<[f64]> {
    if tokens.len() == n {
        return vec![1.0 / n as f64; n].into();
    }
    let background = noise / n as f64;
    let focus = (1.0 - noise) / tokens.len() as f64;
    let mut row = vec![background; n];
    for &t in tokens {
        row[t] += focus;
    }
    row.into()
}

impl StateSource for SyntheticOracle {
    fn current(&self) -> Option<&DecodingState> {
        Some(&self.state)
    }

    fn advance(&mut self, commit: &CommitRecord) -> Result<()> {
        let step = self.state.step_index();
        let fail = |reason: String| Error::SourceContract { step, reason };
        if commit.step_index != step {
            return Err(fail(format!(
                "commit for step {} applied at step {step}",
                commit.step_index
            )));
        }
        if let Some(p) = commit
            .committed_positions
            .iter()
            .find(|p| !self.masked.contains(p))
        {
            return Err(fail(format!("position {p} is not masked")));
        }
        let mut new_regions = 0;
        for &p in &commit.committed_positions {
            self.masked.remove(&p);
            let region = self.latent.position_region[p];
            if !self.covered[region] {
                self.covered[region] = true;
                new_regions += 1;
            }
        }
        if new_regions > 0 && self.config.coverage_boost > 0.0 {
            let factor = (1.0 + self.config.coverage_boost).powi(new_regions);
            for &p in &self.masked {
                self.base_confidence[p] = self.clamp_confidence(self.base_confidence[p] * factor);
            }
        }
        self.state = self.build_state(step + 1)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_decoding, RunOptions};
    use crate::metrics::{remaining_entropy, vri};
    use crate::policy::{ConfidencePolicy, VrcdConfig, VrcdPolicy};
    use crate::schedule::Schedule;

    fn small(seed: u64) -> OracleConfig {
        OracleConfig {
            length: 24,
            num_image_tokens: 16,
            vocab_size: 50,
            num_regions: 4,
            ..OracleConfig::planted(seed)
        }
    }

    fn commit(step: usize, positions: Vec<Position>) -> CommitRecord {
        CommitRecord {
            step_index: step,
            committed_tokens: vec![0; positions.len()],
            committed_positions: positions,
            shadow_confidence_positions: None,
        }
    }

    #[test]
    fn config_errors() {
        assert!(SyntheticOracle::new(OracleConfig { num_regions: 17, ..small(0) }).is_err());
        assert!(SyntheticOracle::new(OracleConfig { vocab_size: 1, ..small(0) }).is_err());
        assert!(SyntheticOracle::new(OracleConfig { overlap_pressure: 1.5, ..small(0) }).is_err());
    }

    #[test]
    fn regions_partition_image_tokens() {
        for randomize_regions in [false, true] {
            let o = SyntheticOracle::new(OracleConfig { randomize_regions, ..small(3) }).unwrap();
            let mut all: Vec<usize> = o.latent().region_tokens.concat();
            all.sort_unstable();
            assert_eq!(all, (0..16).collect::<Vec<_>>());
        }
        let o = SyntheticOracle::new(small(3)).unwrap();
        assert_eq!(o.latent().region_tokens[1], vec![4, 5, 6, 7]);
    }

    #[test]
    fn rows_are_normalized_and_scalars_closed_form() {
        let o = SyntheticOracle::new(small(7)).unwrap();
        for c in o.current().unwrap().candidates() {
            let a = c.attention.as_ref().unwrap();
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((c.margin - peaked_margin(c.confidence, 50)).abs() < 1e-12);
            assert!((c.entropy_norm - peaked_entropy(c.confidence, 50)).abs() < 1e-12);
            assert!(c.confidence <= CONFIDENCE_CEILING);
        }
    }

    #[test]
    fn peaked_closed_forms_match_direct_entropy() {
        for &(c, v) in &[(0.9, 10usize), (0.5, 2), (0.3, 1000)] {
            let mut probs = vec![(1.0 - c) / (v - 1) as f64; v];
            probs[0] = c;
            let direct = CandidatePrediction::from_distribution(0, &probs, None).unwrap();
            assert!((direct.entropy_norm - peaked_entropy(c, v)).abs() < 1e-9);
            assert!((direct.margin - peaked_margin(c, v)).abs() < 1e-9);
        }
    }

    #[test]
    fn full_noise_gives_uniform_attention() {
        let o = SyntheticOracle::new(OracleConfig { region_noise: 1.0, ..small(1) }).unwrap();
        let s = o.current().unwrap();
        for c in s.candidates() {
            assert!(c.attention.as_ref().unwrap().iter().all(|&x| x == 1.0 / 16.0));
        }
        let config = VrcdConfig::default();
        let schedule = Schedule::uniform(24, 0.25).unwrap();
        let mut a = SyntheticOracle::new(OracleConfig { region_noise: 1.0, ..small(1) }).unwrap();
        let mut b = SyntheticOracle::new(OracleConfig { region_noise: 1.0, ..small(1) }).unwrap();
        let va = run_decoding(&mut a, &VrcdPolicy::new(config).unwrap(), &schedule, &RunOptions::default()).unwrap();
        let vb = run_decoding(&mut b, &ConfidencePolicy, &schedule, &RunOptions::default()).unwrap();
        assert_eq!(va.commits, vb.commits);
    }

    #[test]
    fn single_region_commits_are_fully_redundant() {
        let o = SyntheticOracle::new(OracleConfig { num_regions: 1, region_noise: 0.0, ..small(2) }).unwrap();
        let s = o.current().unwrap();
        let rows: Vec<&[f64]> = s.candidates()[..3].iter().map(|c| c.attention.as_deref().unwrap()).collect();
        assert!((vri(&rows).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_states() {
        let mut a = SyntheticOracle::new(small(11)).unwrap();
        let mut b = SyntheticOracle::new(small(11)).unwrap();
        assert_eq!(a.current(), b.current());
        a.advance(&commit(0, vec![0, 5])).unwrap();
        b.advance(&commit(0, vec![0, 5])).unwrap();
        assert_eq!(a.current(), b.current());
        let c = SyntheticOracle::new(small(12)).unwrap();
        assert_ne!(SyntheticOracle::new(small(11)).unwrap().current(), c.current());
    }

    #[test]
    fn advance_rejects_unmasked_positions() {
        let mut o = SyntheticOracle::new(small(0)).unwrap();
        o.advance(&commit(0, vec![1])).unwrap();
        assert!(matches!(o.advance(&commit(1, vec![1])), Err(Error::SourceContract { .. })));
        assert!(matches!(o.advance(&commit(5, vec![2])), Err(Error::SourceContract { .. })));
    }

    #[test]
    fn without_coverage_boost_state_depends_only_on_mask() {
        let cfg = OracleConfig { coverage_boost: 0.0, ..small(4) };
        let mut a = SyntheticOracle::new(cfg.clone()).unwrap();
        let mut b = SyntheticOracle::new(cfg).unwrap();
        a.advance(&commit(0, vec![0, 1])).unwrap();
        a.advance(&commit(1, vec![2, 3])).unwrap();
        b.advance(&commit(0, vec![3, 2])).unwrap();
        b.advance(&commit(1, vec![1, 0])).unwrap();
        assert_eq!(a.current().unwrap().candidates(), b.current().unwrap().candidates());
    }

    #[test]
    fn distinct_region_commit_lowers_next_entropy() {
        let cfg = OracleConfig { coverage_boost: 0.1, overlap_pressure: 0.0, ..small(5) };
        let o = SyntheticOracle::new(cfg.clone()).unwrap();
        // pick two same-region positions, and a position of another region
        let r0 = o.region_of(0);
        let same = (1..24).find(|&p| o.region_of(p) == r0).unwrap();
        let other = (1..24).find(|&p| o.region_of(p) != r0).unwrap();
        // compare on the positions that remain in both cases
        let entropy_without = |mut o: SyntheticOracle, pair: Vec<Position>| {
            o.advance(&commit(0, pair)).unwrap();
            let s = o.current().unwrap();
            let kept: Vec<_> = s
                .candidates()
                .iter()
                .filter(|c| c.position != same && c.position != other)
                .cloned()
                .collect();
            remaining_entropy(&DecodingState::new(1, 24, 16, kept).unwrap()).unwrap()
        };
        let redundant = entropy_without(SyntheticOracle::new(cfg.clone()).unwrap(), vec![0, same]);
        let complementary = entropy_without(SyntheticOracle::new(cfg).unwrap(), vec![0, other]);
        assert!(complementary < redundant);
    }

    #[test]
    fn covered_regions_add_nothing() {
        let cfg = OracleConfig { coverage_boost: 0.2, overlap_pressure: 0.0, ..small(6) };
        let mut o = SyntheticOracle::new(cfg).unwrap();
        let r0 = o.region_of(0);
        let mates: Vec<_> = (1..24).filter(|&p| o.region_of(p) == r0).collect();
        assert!(!mates.is_empty());
        o.advance(&commit(0, vec![0])).unwrap();
        let before: Vec<f64> = o.current().unwrap().candidates().iter().map(|c| c.confidence).collect();
        o.advance(&commit(1, vec![mates[0]])).unwrap();
        let after: Vec<f64> = o
            .current()
            .unwrap()
            .candidates()
            .iter()
            .map(|c| c.confidence)
            .collect();
        let mut expected = before;
        // position 0 is gone, so position p sits at index p - 1
        expected.remove(mates[0] - 1);
        assert_eq!(after, expected);
    }

    #[test]
    fn alpha_zero_run_matches_confidence_run() {
        let schedule = Schedule::uniform(24, 0.25).unwrap();
        let mut a = SyntheticOracle::new(small(9)).unwrap();
        let mut b = SyntheticOracle::new(small(9)).unwrap();
        let vrcd = VrcdPolicy::new(VrcdConfig { alpha: 0.0, ..VrcdConfig::default() }).unwrap();
        let ra = run_decoding(&mut a, &vrcd, &schedule, &RunOptions::default()).unwrap();
        let rb = run_decoding(&mut b, &ConfidencePolicy, &schedule, &RunOptions::default()).unwrap();
        assert_eq!(ra.commits, rb.commits);
        assert_eq!(ra.metrics, rb.metrics);
        assert!(ra.metrics.iter().all(|m| m.position_change_count == Some(0)));
    }
}
