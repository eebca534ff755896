//! Binary classification metrics.

use crate::KarmaError;

/// ROC AUC via the rank-sum formulation with midrank tie handling.
///
/// Equals the probability that a uniformly random positive outranks a
/// uniformly random negative, ties counting one half. Invariant under any
/// strictly increasing transform of the scores.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64, KarmaError> {
    if scores.len() != labels.len() {
        return Err(KarmaError::Degenerate {
            detail: format!(
                "scores ({}) and labels ({}) differ in length",
                scores.len(),
                labels.len()
            ),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KarmaError::Degenerate {
            detail: "auc needs both classes present".to_string(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(KarmaError::Degenerate {
            detail: "auc scores must be finite".to_string(),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks: tied scores share the average of their 1-based positions.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Counts at the 0.5 probability threshold (p >= 0.5 predicts rewarding).
pub fn confusion_at_half(scores: &[f64], labels: &[u8]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        match (s >= 0.5, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

impl ConfusionCounts {
    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.tn + self.fn_;
        if total == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / total as f64
    }

    /// F1 with the rewarding class positive; 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_ordered_scores_give_one() {
        let auc = compute_auc(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_equal_scores_give_half() {
        let auc = compute_auc(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(auc, 0.5);
        let auc = compute_auc(&[0.3; 6], &[1, 0, 1, 0, 1, 0]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn worked_example() {
        let auc = compute_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn one_class_is_degenerate() {
        assert!(compute_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(compute_auc(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn confusion_matches_hand_count() {
        let scores = [0.9, 0.6, 0.5, 0.4, 0.1];
        let labels = [1, 0, 1, 1, 0];
        let c = confusion_at_half(&scores, &labels);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 1, 1));
        assert!((c.accuracy() - 3.0 / 5.0).abs() < 1e-12);
        assert!((c.f1() - 2.0 * 2.0 / (4.0 + 1.0 + 1.0)).abs() < 1e-12);
    }
}
