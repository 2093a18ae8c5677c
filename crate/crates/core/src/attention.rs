//! Attention weights as long-format tab-separated text, one weight per line:
//!
//! ```text
//! instance  family  index  label  weight
//! ```
//!
//! Families are `behavior` (one weight per sequence position, `pad` marks
//! padding), `user` and `context` (one per field, labelled by field name) and
//! `global` (one per slot, labelled `e_i`, `e_b`, `e_u`, `e_c`, `R_ibim`,
//! `R_iuim`, `R_icim`). Families a variant lacks are absent, as is the
//! behavior family of an instance without behaviors. Weights use the
//! shortest round-trip decimal form, so re-parsing them is exact.

use std::fmt::Write as _;

use crate::data::RawInstance;
use crate::embedding::Schema;
use crate::error::Result;
use crate::model::{AttentionRecord, MianModel};
use crate::scalar::Scalar;

pub const HEADER: &str = "instance\tfamily\tindex\tlabel\tweight";

fn push_family<T: Scalar>(out: &mut String, instance: usize, family: &str, weights: &[T], label: impl Fn(usize) -> String) {
    for (k, w) in weights.iter().enumerate() {
        writeln!(out, "{instance}\t{family}\t{k}\t{}\t{}", label(k), w.to_f64_lossy()).unwrap();
    }
}

/// Appends the lines of one instance's attention record.
pub fn write_record<T: Scalar>(out: &mut String, instance: usize, raw: &RawInstance, schema: &Schema, rec: &AttentionRecord<T>) {
    if let Some(a) = &rec.alpha_t {
        if !raw.behaviors.is_empty() {
            let n = raw.behaviors.len();
            push_family(out, instance, "behavior", a, |k| {
                if k < n {
                    format!("t{k}")
                } else {
                    "pad".to_string()
                }
            });
        }
    }
    if let Some(a) = &rec.alpha_u {
        push_family(out, instance, "user", a, |k| schema.user[k].name.clone());
    }
    if let Some(a) = &rec.alpha_c {
        push_family(out, instance, "context", a, |k| schema.context[k].name.clone());
    }
    if let Some(a) = &rec.alpha_g {
        push_family(out, instance, "global", a, |k| rec.slots[k].label().to_string());
    }
}

/// Runs the evaluation-mode forward pass on every instance and renders the
/// weights. Fails if the instances do not belong to the model's schema.
pub fn export_attention<T: Scalar>(model: &MianModel<T>, schema: &Schema, instances: &[RawInstance]) -> Result<String> {
    crate::checkpoint::ensure_schema(model, schema)?;
    let mut out = String::from(HEADER);
    out.push('\n');
    for (i, raw) in instances.iter().enumerate() {
        let p = model.predict(raw)?;
        write_record(&mut out, i, raw, schema, &p.attention);
    }
    Ok(out)
}
