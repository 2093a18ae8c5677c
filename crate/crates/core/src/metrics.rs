//! Ranking and calibration metrics, and the metrics report.

use std::fmt::Write as _;

use crate::error::{MianError, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MianError::ShapeMismatch {
            op: "metric",
            left: (1, scores.len()),
            right: (1, labels.len()),
        });
    }
    if scores.is_empty() {
        return Err(MianError::Empty("metric"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(MianError::InvalidLabel(y.to_string()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MianError::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((n_pos, labels.len() - n_pos))
}

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank, so each tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(MianError::Metric("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral so ties stay exact.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        // ranks i+1..=j+1 averaged: (i + j + 2) / 2
        rank_sum2 += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(probs, labels)?;
    const CLAMP: f64 = 1e-12;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Cross-entropy of one prediction, `y` must be 0 or 1.
pub fn loss(p_click: f64, y: u8) -> Result<f64> {
    if y > 1 {
        return Err(MianError::InvalidLabel(y.to_string()));
    }
    if !(p_click > 0.0 && p_click < 1.0) {
        return Err(MianError::NonFinite(format!("probability {p_click} outside (0, 1)")));
    }
    Ok(if y == 1 { -p_click.ln() } else { -(1.0 - p_click).ln() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Mean training objective per epoch, empty for a plain evaluation.
    pub epoch_loss: Vec<f64>,
}

impl MetricsReport {
    pub fn from_predictions(probs: &[f64], labels: &[u8]) -> Result<Self> {
        let (n_pos, n_neg) = check_inputs(probs, labels)?;
        let auc = if n_pos > 0 && n_neg > 0 { Some(auc(probs, labels)?) } else { None };
        Ok(Self {
            auc,
            logloss: logloss(probs, labels)?,
            n_pos,
            n_neg,
            epoch_loss: Vec::new(),
        })
    }

    /// One header line and one value line, tab-separated.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("auc\tlogloss\tn_pos\tn_neg\tepoch_loss\n");
        let auc = self.auc.map_or_else(|| "NA".to_string(), |a| a.to_string());
        let curve: Vec<String> = self.epoch_loss.iter().map(f64::to_string).collect();
        let curve = if curve.is_empty() { "-".to_string() } else { curve.join(",") };
        writeln!(s, "{auc}\t{}\t{}\t{}\t{curve}", self.logloss, self.n_pos, self.n_neg).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(MianError::Metric(_))));
    }

    #[test]
    fn loss_examples() {
        assert!((loss(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss(0.9, 1).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(loss(1e-300, 0).unwrap() < 1e-12);
        assert!(matches!(loss(0.5, 2), Err(MianError::InvalidLabel(_))));
    }

    #[test]
    fn report_has_one_header_line() {
        let r = MetricsReport::from_predictions(&[0.2, 0.7], &[0, 1]).unwrap();
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv.starts_with("auc\t"));
    }
}
