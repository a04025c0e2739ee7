//! Ranking and threshold metrics.

use crate::error::{Result, TrainError};

fn check(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(TrainError::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(TrainError::invalid(format!("score {s} is not a number")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(TrainError::invalid(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    Ok((pos, labels.len() as u64 - pos))
}

/// ROC-AUC as the Mann-Whitney statistic
/// `(#(pos > neg) + ½·#(pos = neg)) / (#pos · #neg)`, with label 1 positive.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(TrainError::invalid(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the numerator, kept integral so the single division is the only
    // rounding step.
    let (mut twice, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Fraction of samples whose prediction `score >= threshold` matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(TrainError::invalid("accuracy of an empty set"));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &[1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn invalid_inputs() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[], &[]).is_err());
        assert!(auc(&[0.1], &[1, 0]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
        assert!(auc(&[0.1, 0.2], &[2, 0]).is_err());
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn accuracy_threshold_is_inclusive() {
        assert_eq!(accuracy(&[0.5, 0.49, 0.9, 0.1], &[1, 0, 0, 0], 0.5).unwrap(), 0.75);
    }
}
