//! Accuracy, AUC and F1 on hand-sized inputs, including ties and a
//! single-class set where AUC is undefined.
//!
//! ```text
//! cargo run --example metrics
//! ```

use mim::harness::{accuracy, auc, f1, MetricsReport};
use mim::matcher::LossBreakdown;

fn main() {
    let scores = [0.9, 0.8, 0.3, 0.2];
    let labels = [1, 0, 1, 0];
    println!("scores {scores:?} labels {labels:?}");
    println!("  AUC      {:?}", auc(&scores, &labels));
    println!("  accuracy {}", accuracy(&scores, &labels, 0.5));
    println!("  F1       {:.4}", f1(&scores, &labels, 0.5));

    let tied = [0.5, 0.5, 0.5, 0.7];
    println!("tied scores {tied:?}: AUC {:?}", auc(&tied, &labels));
    println!("one class only: AUC {:?}", auc(&scores, &[1, 1, 1, 1]));

    let report = MetricsReport::from_scores(&scores, &labels, 0.5, LossBreakdown::default());
    println!("\n{}\n{}", MetricsReport::CSV_HEADER, report.csv_row());
}
