//! Exact cosine kNN anomaly scoring against a set of normal reference features.
//!
//! Score polarity: `score = 1 - mean(top-k cosine similarity)`, so higher
//! means more anomalous. Zero vectors have similarity 0 to everything.
//! Neighbors tied on similarity are taken in ascending reference index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{dot, l2_norm, EmbeddingMatrix};
use crate::transform::{apply_transform, TransformSpec};

pub const DEFAULT_K: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringConfig {
    pub k: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { k: DEFAULT_K }
    }
}

impl ScoringConfig {
    pub fn validate(&self, reference_rows: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::KZero);
        }
        if self.k > reference_rows {
            return Err(Error::KTooLarge {
                k: self.k,
                rows: reference_rows,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    pub k: usize,
    /// Transform digest chain, `"none"` when scored untransformed.
    pub transform: String,
}

/// A reference neighbor: index into the reference matrix and its cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

fn check_inputs(
    reference: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    cfg: &ScoringConfig,
) -> Result<()> {
    if reference.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            found: test.dim(),
        });
    }
    cfg.validate(reference.rows())
}

fn by_similarity_then_index(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.index.cmp(&b.index))
}

struct Scorer<'a> {
    reference: &'a EmbeddingMatrix,
    reference_norms: Vec<f64>,
    k: usize,
}

impl<'a> Scorer<'a> {
    fn new(reference: &'a EmbeddingMatrix, k: usize) -> Self {
        Scorer {
            reference,
            reference_norms: reference.iter_rows().map(l2_norm).collect(),
            k,
        }
    }

    /// Top-k neighbors of `query`, most similar first.
    fn neighbors(&self, query: &[f64], scratch: &mut Vec<Neighbor>) -> Vec<Neighbor> {
        let qn = l2_norm(query);
        scratch.clear();
        scratch.extend(
            self.reference
                .iter_rows()
                .zip(&self.reference_norms)
                .enumerate()
                .map(|(index, (row, &rn))| Neighbor {
                    index,
                    similarity: if qn > 0.0 && rn > 0.0 {
                        dot(query, row) / (qn * rn)
                    } else {
                        0.0
                    },
                }),
        );
        if self.k < scratch.len() {
            scratch.select_nth_unstable_by(self.k - 1, by_similarity_then_index);
            scratch.truncate(self.k);
        }
        scratch.sort_unstable_by(by_similarity_then_index);
        scratch.clone()
    }

    fn score(&self, query: &[f64], scratch: &mut Vec<Neighbor>) -> f64 {
        let top = self.neighbors(query, scratch);
        let mean = top.iter().map(|n| n.similarity).sum::<f64>() / self.k as f64;
        (1.0 - mean).clamp(0.0, 2.0)
    }
}

/// The `k` nearest reference rows of every test row.
pub fn nearest_neighbors(
    reference: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    cfg: &ScoringConfig,
) -> Result<Vec<Vec<Neighbor>>> {
    check_inputs(reference, test, cfg)?;
    let scorer = Scorer::new(reference, cfg.k);
    let mut scratch = Vec::with_capacity(reference.rows());
    Ok(test
        .iter_rows()
        .map(|q| scorer.neighbors(q, &mut scratch))
        .collect())
}

pub fn score(
    reference: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    cfg: &ScoringConfig,
) -> Result<ScoreReport> {
    check_inputs(reference, test, cfg)?;
    let scorer = Scorer::new(reference, cfg.k);
    let mut scratch = Vec::with_capacity(reference.rows());
    let scores = test
        .iter_rows()
        .map(|q| scorer.score(q, &mut scratch))
        .collect();
    Ok(ScoreReport {
        scores,
        labels: None,
        k: cfg.k,
        transform: "none".into(),
    })
}

/// Transforms both sets with `t`, then scores.
pub fn score_pipeline(
    train: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    t: &TransformSpec,
    cfg: &ScoringConfig,
) -> Result<ScoreReport> {
    let train_t = apply_transform(train, t)?;
    let test_t = apply_transform(test, t)?;
    let mut report = score(&train_t, &test_t, cfg)?;
    report.transform = t.digest_chain();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::ConceptSubspace;
    use crate::transform::Mode;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_cases() {
        let e1: &[f64] = &[1.0, 0.0];
        let e2: &[f64] = &[0.0, 1.0];
        let k1 = ScoringConfig { k: 1 };
        assert_eq!(score(&m(&[e1]), &m(&[e1]), &k1).unwrap().scores, vec![0.0]);
        assert_eq!(score(&m(&[e1]), &m(&[e2]), &k1).unwrap().scores, vec![1.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = score(&m(&[e1, e2]), &m(&[&[h, h]]), &ScoringConfig { k: 2 }).unwrap();
        assert!((r.scores[0] - (1.0 - h)).abs() < 1e-15);
        assert!((r.scores[0] - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn zero_vectors_have_zero_similarity() {
        let reference = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let test = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let r = score(&reference, &test, &ScoringConfig { k: 2 }).unwrap();
        assert_eq!(r.scores, vec![1.0, 0.5]);
    }

    #[test]
    fn tie_break_prefers_lower_index() {
        let reference = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[2.0, 0.0]]);
        let test = m(&[&[1.0, 0.0]]);
        let nn = nearest_neighbors(&reference, &test, &ScoringConfig { k: 2 }).unwrap();
        assert_eq!(
            nn[0].iter().map(|n| n.index).collect::<Vec<_>>(),
            vec![0, 2]
        );
    }

    #[test]
    fn config_errors() {
        let reference = m(&[&[1.0, 0.0]]);
        let err = score(&reference, &reference, &ScoringConfig { k: 2 }).unwrap_err();
        assert!(
            err.to_string().contains("k exceeds reference size"),
            "{err}"
        );
        assert!(matches!(
            score(&reference, &reference, &ScoringConfig { k: 0 }),
            Err(Error::KZero)
        ));
        let wide = m(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            score(&reference, &wide, &ScoringConfig { k: 1 }),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(ScoringConfig::default().k, 30);
    }

    #[test]
    fn full_space_guide_is_identity_for_scores() {
        let s = ConceptSubspace::from_orthonormal_rows(&[
            [0.6, 0.8, 0.0],
            [-0.8, 0.6, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let train = m(&[&[1.0, 0.2, 0.1], &[0.3, 0.9, -0.2], &[0.1, 0.1, 1.0]]);
        let test = m(&[&[0.5, 0.5, 0.5], &[-1.0, 0.0, 0.3]]);
        let cfg = ScoringConfig { k: 2 };
        let plain = score(&train, &test, &cfg).unwrap();
        let t = TransformSpec::single(Mode::Guide, s);
        let piped = score_pipeline(&train, &test, &t, &cfg).unwrap();
        for (a, b) in plain.scores.iter().zip(&piped.scores) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(piped.transform, t.digest_chain());
        assert_eq!(plain.transform, "none");
    }
}
