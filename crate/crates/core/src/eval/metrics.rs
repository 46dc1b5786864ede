use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};

/// Scores at or above this predict a correct answer.
pub const ACC_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when every label is the same.
    pub auc: Option<f64>,
    pub auc_undefined: bool,
    pub acc: f64,
    pub rmse: f64,
    pub n_predictions: usize,
}

/// Area under the ROC curve as the Mann-Whitney statistic: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based ranks of the positives, tied runs sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += mean_rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    if scores.len() != labels.len() {
        return Err(KtError::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(KtError::contract("metrics over zero predictions"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(KtError::contract(format!("label {bad} is not a bit")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(KtError::contract("non-finite score"));
    }
    let n = scores.len() as f64;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| (s >= ACC_THRESHOLD) == (l == 1))
        .count();
    let sq: f64 = scores.iter().zip(labels).map(|(&s, &l)| (s - l as f64).powi(2)).sum();
    let auc = auc(scores, labels);
    Ok(Metrics {
        auc,
        auc_undefined: auc.is_none(),
        acc: hits as f64 / n,
        rmse: (sq / n).sqrt(),
        n_predictions: scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let m = compute_metrics(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.acc, 1.0);
        assert!((m.rmse - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ties_get_half_credit() {
        assert_eq!(auc(&[0.2, 0.8, 0.5, 0.5], &[0, 1, 1, 0]), Some(0.875));
    }

    #[test]
    fn exact_scores_have_zero_rmse() {
        assert_eq!(compute_metrics(&[1.0, 0.0], &[1, 0]).unwrap().rmse, 0.0);
    }

    #[test]
    fn single_class_auc_is_undefined() {
        let m = compute_metrics(&[0.3, 0.6], &[1, 1]).unwrap();
        assert_eq!(m.auc, None);
        assert!(m.auc_undefined);
        assert_eq!(m.acc, 0.5);
    }

    #[test]
    fn threshold_tie_predicts_correct() {
        assert_eq!(compute_metrics(&[0.5, 0.5], &[1, 0]).unwrap().acc, 0.5);
        assert_eq!(compute_metrics(&[0.5], &[1]).unwrap().acc, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[0.1], &[1, 0]).is_err());
        assert!(compute_metrics(&[0.1], &[2]).is_err());
    }
}
