//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use textguide::prelude::*;
use textguide::synth::{self, SyntheticSpec, SyntheticWorld};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(&gaussian_rows(rng, rows, dim)).unwrap()
}

/// `d` orthonormal rows in `dim` dimensions from a Householder QR of a Gaussian matrix.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, dim: usize) -> Vec<Vec<f64>> {
    let g: Vec<f64> = (0..dim * d).map(|_| rng.sample(StandardNormal)).collect();
    let q = DMatrix::from_column_slice(dim, d, &g).qr().q();
    (0..d)
        .map(|k| q.column(k).iter().copied().collect())
        .collect()
}

pub fn random_subspace(rng: &mut ChaCha8Rng, d: usize, dim: usize) -> ConceptSubspace {
    ConceptSubspace::from_orthonormal_rows(&random_orthonormal(rng, d, dim)).unwrap()
}

/// `sum_k b_k b_k^T` as a dense row-major matrix.
pub fn projector_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut p = vec![0.0; dim * dim];
    for r in rows {
        for i in 0..dim {
            for j in 0..dim {
                p[i * dim + j] += r[i] * r[j];
            }
        }
    }
    p
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Full sort of every reference similarity; returns (top-k similarities, score) per test row.
pub fn knn_oracle(
    reference: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    k: usize,
) -> Vec<(Vec<f64>, f64)> {
    test.iter_rows()
        .map(|q| {
            let mut sims: Vec<(f64, usize)> = reference
                .iter_rows()
                .enumerate()
                .map(|(i, r)| (cosine(q, r), i))
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let top: Vec<f64> = sims[..k].iter().map(|s| s.0).collect();
            let score = 1.0 - top.iter().sum::<f64>() / k as f64;
            (top, score)
        })
        .collect()
}

/// Counts correctly ordered positive/negative pairs, ties counted half.
pub fn auroc_pair_count(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut ties, mut pairs) = (0.0, 0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                ties += 1.0;
            }
        }
    }
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    assert_eq!(pairs, p * n);
    (wins + 0.5 * ties) / (p * n)
}

fn distinct_descending(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn counts_at(scores: &[f64], labels: &[u8], threshold: f64) -> (usize, usize) {
    let tp = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **s >= threshold && **l == 1)
        .count();
    let fp = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **s >= threshold && **l == 0)
        .count();
    (tp, fp)
}

/// Walks thresholds from the top, crediting each newly admitted positive
/// with the precision at that threshold.
pub fn auprc_rank_walk(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count();
    let mut prev_tp = 0;
    let mut ap = 0.0;
    for t in distinct_descending(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    ap / p as f64
}

/// Largest observed threshold whose TPR reaches `target`; FPR there.
pub fn fpr_exhaustive(scores: &[f64], labels: &[u8], target: f64) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    let best = distinct_descending(scores)
        .into_iter()
        .find(|&t| counts_at(scores, labels, t).0 as f64 / p as f64 >= target)
        .unwrap();
    counts_at(scores, labels, best).1 as f64 / n as f64
}

/// Random scores/labels of length `n` with both classes; half the draws use a coarse grid to force ties.
pub fn random_scored_labels(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    assert!(n >= 2);
    let coarse = rng.random_bool(0.5);
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            let s: f64 = rng.random();
            if coarse {
                (s * 8.0).floor() / 8.0
            } else {
                s
            }
        })
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    (scores, labels)
}

pub const NUMBER: &str = "number";
pub const COLOR: &str = "color";

/// Digits 0-4 and red are normal.
pub fn digits_and_colors_normal() -> BTreeMap<String, Vec<String>> {
    let mut normal = BTreeMap::new();
    normal.insert(
        NUMBER.to_string(),
        ["zero", "one", "two", "three", "four"]
            .map(String::from)
            .to_vec(),
    );
    normal.insert(COLOR.to_string(), vec!["red".to_string()]);
    normal
}

pub fn digits_and_colors_world(seed: u64, samples: usize) -> SyntheticWorld {
    synth::generate_world(&SyntheticSpec::digits_and_colors(seed), samples).unwrap()
}

pub fn attribute_subspace(world: &SyntheticWorld, name: &str, d: usize) -> ConceptSubspace {
    let t = world.text_for(name).unwrap();
    build_subspace(
        &t.prompts,
        &t.features,
        SubspaceOptions {
            d,
            centered: false,
            average_templates: false,
        },
    )
    .unwrap()
}
