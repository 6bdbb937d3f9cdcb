//! Random decoding states shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use vrcd_core::{CandidatePrediction, DecodingState};

/// Attention row of one of a few shapes: uniform (non-visual after
/// extraction), focused on a random support, or fully dense.
pub fn random_attention<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    match rng.random_range(0..10) {
        0 | 1 => row.fill(1.0),
        2..=7 => {
            let support = rng.random_range(1..=n.min(8));
            for u in sample(rng, n, support) {
                row[u] = rng.random::<f64>() + 0.05;
            }
        }
        _ => row.iter_mut().for_each(|x| *x = rng.random::<f64>()),
    }
    let total: f64 = row.iter().sum();
    if total == 0.0 {
        row.fill(1.0 / n as f64);
    } else {
        row.iter_mut().for_each(|x| *x /= total);
    }
    row
}

/// A state with `masked` candidates over `n` image tokens. Some rows are
/// exact copies of earlier ones and some confidences are repeated, so ties
/// in both confidence and overlap occur.
pub fn random_state<R: Rng>(rng: &mut R, n: usize, masked: usize) -> DecodingState {
    let length = masked + rng.random_range(0..masked + 1);
    let mut positions: Vec<usize> = sample(rng, length, masked).into_vec();
    positions.sort_unstable();
    let mut rows: Vec<Arc<[f64]>> = Vec::new();
    let mut confidences: Vec<f64> = Vec::new();
    let candidates = positions
        .into_iter()
        .map(|position| {
            let attention = if !rows.is_empty() && rng.random_bool(0.15) {
                rows[rng.random_range(0..rows.len())].clone()
            } else {
                Arc::from(random_attention(rng, n))
            };
            rows.push(attention.clone());
            let confidence = if !confidences.is_empty() && rng.random_bool(0.1) {
                confidences[rng.random_range(0..confidences.len())]
            } else {
                rng.random_range(0.01..1.0)
            };
            confidences.push(confidence);
            CandidatePrediction {
                position,
                predicted_token: rng.random_range(0..1000),
                confidence,
                margin: confidence / 2.0,
                entropy_norm: 1.0 - confidence,
                attention: Some(attention),
                top_probabilities: Vec::new(),
            }
        })
        .collect();
    DecodingState::new(0, length, n, candidates).expect("valid random state")
}
