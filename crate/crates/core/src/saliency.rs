//! Visual saliency from token-to-image attention, pairwise Bhattacharyya
//! overlap, and within-window percentile ranks of those overlaps.

use crate::error::{Error, Result};
use crate::state::Position;

/// Saliency distribution of one candidate over the image tokens.
///
/// When `is_visual` the values sum to one; otherwise they are all zero and
/// the candidate takes no part in pairwise overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVector {
    pub position: Position,
    pub values: Vec<f64>,
    pub is_visual: bool,
}

impl SaliencyVector {
    pub fn non_visual(position: Position, num_image_tokens: usize) -> Self {
        Self {
            position,
            values: vec![0.0; num_image_tokens],
            is_visual: false,
        }
    }

    /// Renormalizes `weights` without subtracting the uniform level.
    fn from_weights(position: Position, weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            Self {
                position,
                values: weights.into_iter().map(|w| w / total).collect(),
                is_visual: true,
            }
        } else {
            Self::non_visual(position, weights.len())
        }
    }
}

/// Keeps the attention mass above the uniform level `1/N` and renormalizes it.
///
/// Attention with no entry above `1/N` (uniform attention in particular)
/// yields a non-visual zero vector.
pub fn extract_saliency(
    position: Position,
    attention: &[f64],
    num_image_tokens: usize,
) -> Result<SaliencyVector> {
    if attention.len() != num_image_tokens {
        return Err(Error::Dimension {
            expected: num_image_tokens,
            actual: attention.len(),
        });
    }
    let uniform = 1.0 / num_image_tokens as f64;
    let residual = attention.iter().map(|&a| (a - uniform).max(0.0)).collect();
    Ok(SaliencyVector::from_weights(position, residual))
}

/// Uses the attention itself as the saliency distribution (extraction disabled).
pub fn raw_saliency(
    position: Position,
    attention: &[f64],
    num_image_tokens: usize,
) -> Result<SaliencyVector> {
    if attention.len() != num_image_tokens {
        return Err(Error::Dimension {
            expected: num_image_tokens,
            actual: attention.len(),
        });
    }
    Ok(SaliencyVector::from_weights(
        position,
        attention.iter().map(|&a| a.max(0.0)).collect(),
    ))
}

/// `sum_u sqrt(q_i(u) q_j(u))`, clamped to `[0, 1]`.
pub fn bhattacharyya_overlap(a: &SaliencyVector, b: &SaliencyVector) -> Result<f64> {
    bhattacharyya(&a.values, &b.values)
}

pub fn bhattacharyya(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).sum();
    Ok(sum.min(1.0))
}

/// Percentile rank of every value among all of them:
/// `|{o : o <= value}| / len`. Tied values share the largest count, so the
/// maximum always ranks 1.0 and no rank is zero.
pub fn pct_rank(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    values
        .iter()
        .map(|v| sorted.partition_point(|s| s <= v) as f64 / n)
        .collect()
}

/// One unordered pair of visual candidates. `a < b` index the slice the
/// table was computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOverlap {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
    pub rank: f64,
}

/// All pairwise overlaps among the visual members of a candidate window.
///
/// Ranks are only meaningful after [`OverlapTable::rank_all`]; `compute`
/// fills every overlap first so ranking always sees the whole set.
#[derive(Debug, Clone)]
pub struct OverlapTable {
    members: usize,
    pairs: Vec<PairOverlap>,
    // members x members -> index into `pairs`
    lookup: Vec<Option<usize>>,
}

impl OverlapTable {
    pub fn compute(saliency: &[SaliencyVector]) -> Result<Self> {
        let members = saliency.len();
        let mut pairs = Vec::new();
        let mut lookup = vec![None; members * members];
        for a in 0..members {
            if !saliency[a].is_visual {
                continue;
            }
            for b in (a + 1)..members {
                if !saliency[b].is_visual {
                    continue;
                }
                let overlap = bhattacharyya_overlap(&saliency[a], &saliency[b])?;
                lookup[a * members + b] = Some(pairs.len());
                lookup[b * members + a] = Some(pairs.len());
                pairs.push(PairOverlap {
                    a,
                    b,
                    overlap,
                    rank: f64::NAN,
                });
            }
        }
        Ok(Self {
            members,
            pairs,
            lookup,
        })
    }

    pub fn rank_all(mut self) -> Self {
        let overlaps: Vec<f64> = self.pairs.iter().map(|p| p.overlap).collect();
        for (pair, rank) in self.pairs.iter_mut().zip(pct_rank(&overlaps)) {
            pair.rank = rank;
        }
        self
    }

    pub fn pairs(&self) -> &[PairOverlap] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn overlap(&self, i: usize, j: usize) -> Option<f64> {
        self.pair(i, j).map(|p| p.overlap)
    }

    /// Percentile rank of the pair `(i, j)`; `None` on the diagonal or when
    /// either side is non-visual.
    pub fn rank(&self, i: usize, j: usize) -> Option<f64> {
        self.pair(i, j).map(|p| p.rank)
    }

    fn pair(&self, i: usize, j: usize) -> Option<&PairOverlap> {
        if i >= self.members || j >= self.members {
            return None;
        }
        self.lookup[i * self.members + j].map(|idx| &self.pairs[idx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn visual(values: Vec<f64>) -> SaliencyVector {
        SaliencyVector {
            position: 0,
            values,
            is_visual: true,
        }
    }

    #[test]
    fn uniform_attention_is_not_visual() {
        let q = extract_saliency(3, &[0.25; 4], 4).unwrap();
        assert!(!q.is_visual);
        assert_eq!(q.values, vec![0.0; 4]);
        assert_eq!(q.position, 3);
    }

    #[test]
    fn single_peak_keeps_only_residual() {
        let q = extract_saliency(0, &[0.7, 0.1, 0.1, 0.1], 4).unwrap();
        assert!(q.is_visual);
        assert_eq!(q.values, vec![1.0, 0.0, 0.0, 0.0]);

        let q = extract_saliency(0, &[0.75, 0.25], 2).unwrap();
        assert_eq!(q.values, vec![1.0, 0.0]);
    }

    #[test]
    fn residual_renormalized() {
        // residual [0.25, 0.05, 0, 0] -> [5/6, 1/6, 0, 0]
        let q = extract_saliency(0, &[0.5, 0.3, 0.2, 0.0], 4).unwrap();
        assert!((q.values[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((q.values[1] - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(&q.values[2..], &[0.0, 0.0]);
    }

    #[test]
    fn wrong_length_attention() {
        assert!(matches!(
            extract_saliency(0, &[0.5, 0.5], 3),
            Err(Error::Dimension { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn raw_mode_keeps_uniform_as_visual() {
        let q = raw_saliency(0, &[0.25; 4], 4).unwrap();
        assert!(q.is_visual);
        assert_eq!(q.values, vec![0.25; 4]);
    }

    #[test]
    fn overlap_examples() {
        let q = visual(vec![0.1, 0.2, 0.3, 0.4]);
        assert!((bhattacharyya_overlap(&q, &q).unwrap() - 1.0).abs() < 1e-12);

        let a = visual(vec![1.0, 0.0]);
        let b = visual(vec![0.0, 1.0]);
        assert_eq!(bhattacharyya_overlap(&a, &b).unwrap(), 0.0);

        let a = visual(vec![0.5, 0.5, 0.0, 0.0]);
        let b = visual(vec![0.0, 0.5, 0.5, 0.0]);
        assert!((bhattacharyya_overlap(&a, &b).unwrap() - 0.5).abs() < 1e-12);

        assert!(bhattacharyya(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn pct_rank_examples() {
        let r = pct_rank(&[0.9, 0.5, 0.2]);
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r[2] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pct_rank(&[0.4, 0.4]), vec![1.0, 1.0]);
        assert_eq!(pct_rank(&[0.7]), vec![1.0]);
        assert!(pct_rank(&[]).is_empty());
    }

    #[test]
    fn table_skips_non_visual() {
        let s = vec![
            visual(vec![0.5, 0.5, 0.0]),
            SaliencyVector::non_visual(1, 3),
            visual(vec![0.0, 0.5, 0.5]),
            visual(vec![0.5, 0.5, 0.0]),
        ];
        let t = OverlapTable::compute(&s).unwrap().rank_all();
        assert_eq!(t.pairs().len(), 3);
        assert_eq!(t.rank(0, 1), None);
        assert_eq!(t.rank(1, 1), None);
        assert_eq!(t.rank(0, 0), None);
        assert_eq!(t.rank(0, 3), Some(1.0));
        assert_eq!(t.rank(3, 0), Some(1.0));
        assert_eq!(t.rank(0, 2), t.rank(2, 0));
        assert!((t.overlap(0, 2).unwrap() - 0.5).abs() < 1e-12);
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn overlap_is_bounded_symmetric_and_reflexive(
            (a, b) in (1usize..64).prop_flat_map(|n| (distribution(n), distribution(n)))
        ) {
            let ab = bhattacharyya(&a, &b).unwrap();
            let ba = bhattacharyya(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((bhattacharyya(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn saliency_output_is_valid(a in (1usize..64).prop_flat_map(distribution)) {
            let q = extract_saliency(0, &a, a.len()).unwrap();
            if q.is_visual {
                prop_assert!((q.values.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                prop_assert!(q.values.iter().all(|v| *v >= 0.0));
            } else {
                prop_assert!(q.values.iter().all(|v| *v == 0.0));
            }
        }

        #[test]
        fn pct_rank_depends_only_on_order(values in prop::collection::vec(0.0f64..1.0, 1..40)) {
            let base = pct_rank(&values);
            let transformed: Vec<f64> = values.iter().map(|v| (3.0 * v + 1.0).ln()).collect();
            prop_assert_eq!(&base, &pct_rank(&transformed));
            prop_assert!(base.iter().all(|r| *r > 0.0 && *r <= 1.0));
        }
    }
}
