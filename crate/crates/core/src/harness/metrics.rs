//! Accuracy, rank AUC and F1.

use serde::{Deserialize, Serialize};

use crate::matcher::LossBreakdown;

fn check_lengths(a: usize, b: usize) {
    assert_eq!(a, b, "scores and labels differ in length");
}

/// Fraction of examples whose thresholded score equals the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    check_lengths(scores.len(), labels.len());
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| u8::from(s >= threshold) == l).count();
    correct as f64 / scores.len() as f64
}

/// Area under the ROC curve as the rank statistic: the share of
/// (positive, negative) pairs the scores order correctly, ties counting
/// half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    check_lengths(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut pos, mut neg) = (0u64, 0u64);
    // Twice the concordant count, so ties stay integral.
    let mut doubled = 0u64;
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
        doubled += p * (2 * neg + n);
        pos += p;
        neg += n;
        i = j;
    }
    (pos > 0 && neg > 0).then(|| doubled as f64 / (2 * pos * neg) as f64)
}

/// F1 of the positive class at `threshold`; 0 when precision + recall = 0.
pub fn f1(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    check_lengths(scores.len(), labels.len());
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Metrics of one model on one dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `None` for single-class datasets.
    pub auc: Option<f64>,
    pub f1: f64,
    /// Mean loss components over the dataset.
    pub losses: LossBreakdown,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64, losses: LossBreakdown) -> Self {
        MetricsReport {
            accuracy: accuracy(scores, labels, threshold),
            auc: auc(scores, labels),
            f1: f1(scores, labels, threshold),
            losses,
            n_examples: scores.len(),
        }
    }

    /// AUC with the undefined case mapped to NaN, for tables.
    pub fn auc_or_nan(&self) -> f64 {
        self.auc.unwrap_or(f64::NAN)
    }

    /// Field-wise mean; AUC is averaged over the reports where it is defined.
    pub fn average(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
        let mut losses = LossBreakdown::default();
        for r in reports {
            losses.match_loss += r.losses.match_loss / n;
            losses.dis += r.losses.dis / n;
            losses.kl += r.losses.kl / n;
            losses.mask += r.losses.mask / n;
            losses.total += r.losses.total / n;
        }
        MetricsReport {
            accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n,
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
            losses,
            n_examples: reports.first().map_or(0, |r| r.n_examples),
        }
    }

    pub const CSV_HEADER: &'static str = "accuracy,auc,f1,loss_match,loss_dis,loss_kl,loss_mask,loss_total,n_examples";

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.accuracy,
            self.auc.map_or("undefined".to_string(), |a| format!("{a:.6}")),
            self.f1,
            l.match_loss,
            l.dis,
            l.kl,
            l.mask,
            l.total,
            self.n_examples
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        (pairs > 0.0).then(|| num / pairs)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]), Some(0.75));
        assert_eq!(accuracy(&[1.0, 0.0, 1.0, 0.0], &[1, 0, 0, 0], 0.5), 0.75);
        assert_eq!(f1(&[1.0, 1.0, 0.0], &[1, 0, 0], 0.5), 2.0 / 3.0);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 1, 0]), Some(0.5));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [1, 0, 0, 1, 1];
        let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let r = MetricsReport::from_scores(&scores, &labels, 0.5, LossBreakdown::default());
        assert_eq!((r.accuracy, r.auc, r.f1), (1.0, Some(1.0), 1.0));
    }

    #[test]
    fn single_class_auc_is_undefined() {
        assert_eq!(auc(&[0.1, 0.7], &[1, 1]), None);
        assert_eq!(auc(&[0.1, 0.7], &[0, 0]), None);
        let r = MetricsReport::from_scores(&[0.1, 0.7], &[0, 0], 0.5, LossBreakdown::default());
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.f1, 0.0);
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting(
            data in prop::collection::vec((0u8..6, 0u8..2), 1..200)
        ) {
            // Coarse scores force many ties.
            let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64 / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|&(_, l)| l).collect();
            prop_assert_eq!(auc(&scores, &labels), brute_auc(&scores, &labels));
        }

        #[test]
        fn metrics_stay_in_the_unit_interval(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..100)
        ) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| s).collect();
            let labels: Vec<u8> = data.iter().map(|&(_, l)| l).collect();
            for m in [accuracy(&scores, &labels, 0.5), f1(&scores, &labels, 0.5), auc(&scores, &labels).unwrap_or(0.5)] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }
}
