//! Ranking metrics with label 1 (anomalous) as the positive class and higher
//! scores ranked as more anomalous. Tied scores form a single threshold.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr95: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// (positives, negatives) admitted at one distinct score.
type Group = (usize, usize);

/// Threshold groups in descending score order, plus total positives and negatives.
fn descending_groups(scores: &[f64], labels: &[u8]) -> Result<(Vec<Group>, usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NanScore(i));
    }
    if let Some(index) = labels.iter().position(|&l| l > 1) {
        return Err(Error::InvalidLabel {
            index,
            value: labels[index] as i64,
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        // -0.0 and 0.0 are one threshold
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    Ok((groups, positives, negatives))
}

/// Mann-Whitney AUROC: `(#pos>neg + 0.5 #ties) / (P N)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (groups, p, n) = descending_groups(scores, labels)?;
    let mut wins = 0u64;
    let mut ties = 0u64;
    // negatives strictly below the current group
    let mut neg_below = n as u64;
    for (pos, neg) in groups {
        neg_below -= neg as u64;
        wins += pos as u64 * neg_below;
        ties += pos as u64 * neg as u64;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (p as f64 * n as f64))
}

/// Step-wise average precision with precision evaluated at threshold-group boundaries.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (groups, p, _) = descending_groups(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut sum = 0.0;
    for (pos, neg) in groups {
        tp += pos;
        fp += neg;
        if pos > 0 {
            sum += pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(sum / p as f64)
}

/// FPR at the highest threshold `score >= t` (t an observed score) whose TPR reaches `tpr_target`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[u8], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::TprTarget(tpr_target));
    }
    let (groups, p, n) = descending_groups(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (pos, neg) in groups {
        tp += pos;
        fp += neg;
        if tp as f64 / p as f64 >= tpr_target {
            return Ok(fp as f64 / n as f64);
        }
    }
    unreachable!("the lowest threshold admits every positive")
}

pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let (_, positives, negatives) = descending_groups(scores, labels)?;
    Ok(EvalReport {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        fpr95: fpr_at_tpr(scores, labels, 0.95)?,
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn auprc_hand_cases() {
        assert_eq!(auprc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.4; 4], &[0, 1, 0, 0]).unwrap(), 0.25);
        let ap = auprc(&[0.9, 0.7, 0.6, 0.2], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn fpr_hand_cases() {
        assert_eq!(
            fpr_at_tpr(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0], 0.95).unwrap(),
            0.0
        );
        assert_eq!(
            fpr_at_tpr(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0], 0.95).unwrap(),
            0.5
        );
        // positives tied at the maximum together with one negative
        assert_eq!(
            fpr_at_tpr(&[0.9, 0.9, 0.9, 0.1], &[1, 1, 0, 0], 0.95).unwrap(),
            0.5
        );
        assert!(fpr_at_tpr(&[0.9, 0.1], &[1, 0], 0.0).is_err());
        assert!(fpr_at_tpr(&[0.9, 0.1], &[1, 0], 1.5).is_err());
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::SingleClass { .. })
        ));
        assert!(matches!(
            auroc(&[0.1, f64::NAN], &[1, 0]),
            Err(Error::NanScore(1))
        ));
        assert!(matches!(
            auprc(&[0.1], &[1, 0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 3]),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn evaluate_collects_counts() {
        let r = evaluate(&[0.9, 0.8, 0.3, 0.2, 0.1], &[1, 1, 0, 0, 0]).unwrap();
        assert_eq!((r.auroc, r.auprc, r.fpr95), (1.0, 1.0, 0.0));
        assert_eq!((r.positives, r.negatives), (2, 3));
    }
}
