//! Commit-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of positions committed at each decoding step.
///
/// `commit_sizes` always sums to `length` and every entry is at least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    forward_ratio: f64,
    length: usize,
    commit_sizes: Vec<usize>,
}

impl Schedule {
    /// Uniform schedule: every step commits `max(1, round(1/FR))` positions,
    /// the last step takes whatever remains.
    pub fn uniform(length: usize, forward_ratio: f64) -> Result<Self> {
        if !(forward_ratio > 0.0 && forward_ratio <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "forward ratio {forward_ratio} outside (0, 1]"
            )));
        }
        if length == 0 {
            return Err(Error::InvalidSchedule("length must be positive".into()));
        }
        let base = ((1.0 / forward_ratio).round() as usize).max(1);
        let steps = length.div_ceil(base);
        let mut commit_sizes = vec![base; steps];
        let last = length - base * (steps - 1);
        commit_sizes[steps - 1] = last;
        Ok(Self {
            forward_ratio,
            length,
            commit_sizes,
        })
    }

    /// Schedule with explicit per-step commit sizes, e.g. read back from a trace.
    pub fn from_commit_sizes(length: usize, commit_sizes: Vec<usize>) -> Result<Self> {
        if commit_sizes.is_empty() || commit_sizes.contains(&0) {
            return Err(Error::InvalidSchedule(
                "every step must commit at least one position".into(),
            ));
        }
        let total: usize = commit_sizes.iter().sum();
        if total != length {
            return Err(Error::InvalidSchedule(format!(
                "commit sizes sum to {total}, expected {length}"
            )));
        }
        Ok(Self {
            forward_ratio: commit_sizes.len() as f64 / length as f64,
            length,
            commit_sizes,
        })
    }

    pub fn forward_ratio(&self) -> f64 {
        self.forward_ratio
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn steps(&self) -> usize {
        self.commit_sizes.len()
    }

    pub fn commit_sizes(&self) -> &[usize] {
        &self.commit_sizes
    }

    pub fn commit_size(&self, step: usize) -> Option<usize> {
        self.commit_sizes.get(step).copied()
    }
}
