//! Trains a list of variants under one base configuration and tabulates
//! their held-out metrics.

use std::fmt::Write as _;

use crate::config::{ModelConfig, Variant};
use crate::data::RawInstance;
use crate::embedding::Schema;
use crate::error::Result;
use crate::train::{train, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub auc: Option<f64>,
    pub logloss: f64,
    pub report: TrainReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Tab-separated with one header line; the loss curve is comma-joined.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tauc\tlogloss\ttrain_loss_curve\n");
        for r in &self.rows {
            let auc = r.auc.map_or_else(|| "NA".to_string(), |a| a.to_string());
            let curve: Vec<String> = r.report.loss_curve().iter().map(f64::to_string).collect();
            writeln!(s, "{}\t{auc}\t{}\t{}", r.variant, r.logloss, curve.join(",")).unwrap();
        }
        s
    }
}

/// Trains one variant of `base` and reports its final held-out metrics.
pub fn run_variant(
    base: &ModelConfig,
    variant: Variant,
    schema: &Schema,
    train_set: &[RawInstance],
    test_set: &[RawInstance],
) -> Result<AblationRow> {
    let config = ModelConfig {
        variant,
        ..base.clone()
    };
    let (_, _, report) = train::<f64>(&config, schema, train_set, test_set)?;
    let last = report.final_test().cloned();
    Ok(AblationRow {
        variant,
        auc: last.as_ref().and_then(|m| m.auc),
        logloss: last.map_or(f64::NAN, |m| m.logloss),
        report,
    })
}

/// Each variant starts from a fresh model built from `base` with only the
/// variant changed, so no state is shared and the order does not matter.
pub fn run_ablation(
    base: &ModelConfig,
    variants: &[Variant],
    schema: &Schema,
    train_set: &[RawInstance],
    test_set: &[RawInstance],
) -> Result<AblationTable> {
    let rows = variants
        .iter()
        .map(|&v| run_variant(base, v, schema, train_set, test_set))
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}
