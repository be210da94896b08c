//! Per-round records and their CSV / JSON renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregation::WeightVector;
use crate::engine::config::Algorithm;

/// Version tag of the metrics CSV column layout.
pub const METRICS_SCHEMA: &str = "cadis-metrics/1";
pub const SUMMARY_SCHEMA: &str = "cadis-summary/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Top-1 test accuracy in percent.
    pub top1: f64,
    pub recalls: Vec<f64>,
    pub weights: WeightVector<f64>,
    /// Rand index of the round's clustering against the true partition.
    pub cluster_recovery: Option<f64>,
    pub qmatrix_mse: Option<f64>,
    pub mean_local_loss: f64,
    pub clusters: Option<usize>,
}

pub fn csv_header(classes: usize) -> String {
    let mut h = String::from("round,top1");
    for c in 0..classes {
        let _ = write!(h, ",r{c}");
    }
    h.push_str(",cluster_recovery,qmatrix_mse,mean_local_loss");
    h
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn csv_row(m: &RoundMetrics) -> String {
    let mut row = format!("{},{}", m.round, m.top1);
    for r in &m.recalls {
        let _ = write!(row, ",{r}");
    }
    let _ = write!(
        row,
        ",{},{},{}",
        opt(m.cluster_recovery),
        opt(m.qmatrix_mse),
        m.mean_local_loss
    );
    row
}

/// Whole metrics series as CSV text, header included.
pub fn metrics_csv(classes: usize, series: &[RoundMetrics]) -> String {
    let mut out = csv_header(classes);
    out.push('\n');
    for m in series {
        out.push_str(&csv_row(m));
        out.push('\n');
    }
    out
}

/// Long-format aggregation weights: `round,client,weight`.
pub fn weights_csv(series: &[RoundMetrics]) -> String {
    let mut out = String::from("round,client,weight\n");
    for m in series {
        for (c, w) in m.weights.participants.iter().zip(&m.weights.weights) {
            let _ = writeln!(out, "{},{c},{w}", m.round);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub metrics_schema: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub initial_top1: f64,
    pub best_top1: Option<f64>,
    pub best_round: Option<usize>,
    pub final_top1: Option<f64>,
    /// Mean of the last ten rounds' accuracy.
    pub tail_mean_top1: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub rounds_to_target: Option<usize>,
    pub final_assignment: Vec<usize>,
    pub final_cluster_recovery: Option<f64>,
}

/// Mean and population variance of the last `window` accuracies.
pub fn tail_stats(series: &[RoundMetrics], window: usize) -> Option<(f64, f64)> {
    if series.is_empty() || window == 0 {
        return None;
    }
    let tail = &series[series.len().saturating_sub(window)..];
    let n = tail.len() as f64;
    let mean = tail.iter().map(|m| m.top1).sum::<f64>() / n;
    let var = tail.iter().map(|m| (m.top1 - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var))
}

pub fn best_round(series: &[RoundMetrics]) -> Option<&RoundMetrics> {
    series.iter().fold(None, |best: Option<&RoundMetrics>, m| match best {
        Some(b) if b.top1 >= m.top1 => Some(b),
        _ => Some(m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(round: usize, top1: f64) -> RoundMetrics {
        RoundMetrics {
            round,
            top1,
            recalls: vec![0.5, 1.0],
            weights: WeightVector {
                participants: vec![3, 1],
                weights: vec![0.25, 0.75],
            },
            cluster_recovery: None,
            qmatrix_mse: Some(0.125),
            mean_local_loss: 0.75,
            clusters: None,
        }
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            csv_header(3),
            "round,top1,r0,r1,r2,cluster_recovery,qmatrix_mse,mean_local_loss"
        );
        assert_eq!(csv_row(&metric(4, 91.5)), "4,91.5,0.5,1,,0.125,0.75");
        let text = metrics_csv(2, &[metric(0, 1.0), metric(1, 2.0)]);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(
            weights_csv(&[metric(2, 0.0)]),
            "round,client,weight\n2,3,0.25\n2,1,0.75\n"
        );
    }

    #[test]
    fn tail_and_best() {
        let s: Vec<_> = [10.0, 30.0, 20.0, 30.0]
            .iter()
            .enumerate()
            .map(|(i, &a)| metric(i, a))
            .collect();
        assert_eq!(best_round(&s).unwrap().round, 1);
        let (mean, var) = tail_stats(&s, 2).unwrap();
        assert_eq!(mean, 25.0);
        assert_eq!(var, 25.0);
        assert!(tail_stats(&[], 3).is_none());
    }
}
