use crate::embedding::{FieldKind, FieldSpec, Schema};
use crate::error::{MianError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldValue {
    Cat(usize),
    Num(f64),
}

impl FieldValue {
    pub fn as_cat(self) -> Option<usize> {
        match self {
            FieldValue::Cat(i) => Some(i),
            FieldValue::Num(_) => None,
        }
    }
}

/// One labeled sample. Behaviors run oldest to newest; each step holds one
/// value per behavior field.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInstance {
    pub label: u8,
    pub item: Vec<FieldValue>,
    pub behaviors: Vec<Vec<FieldValue>>,
    pub user: Vec<FieldValue>,
    pub context: Vec<FieldValue>,
}

fn check_values(fields: &[FieldSpec], values: &[FieldValue], what: &str) -> Result<()> {
    if fields.len() != values.len() {
        return Err(MianError::Schema(format!(
            "{what}: expected {} values, found {}",
            fields.len(),
            values.len()
        )));
    }
    for (f, v) in fields.iter().zip(values) {
        match (f.kind, v) {
            (FieldKind::Categorical { vocab }, FieldValue::Cat(i)) => {
                if *i >= vocab {
                    return Err(MianError::OutOfVocabulary {
                        field: f.name.clone(),
                        index: *i,
                        vocab,
                    });
                }
            }
            (FieldKind::Numerical, FieldValue::Num(x)) => {
                if !x.is_finite() {
                    return Err(MianError::NonFinite(format!("field `{}`", f.name)));
                }
            }
            _ => {
                return Err(MianError::Schema(format!("field `{}` has the wrong kind of value", f.name)));
            }
        }
    }
    Ok(())
}

impl RawInstance {
    /// Checks field counts, kinds, vocabulary bounds, the label and `len(behaviors) <= T`.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.label > 1 {
            return Err(MianError::InvalidLabel(self.label.to_string()));
        }
        check_values(&schema.item, &self.item, "item")?;
        check_values(&schema.user, &self.user, "user")?;
        check_values(&schema.context, &self.context, "context")?;
        if self.behaviors.len() > schema.seq_len {
            return Err(MianError::Schema(format!(
                "{} behaviors exceed window T={}",
                self.behaviors.len(),
                schema.seq_len
            )));
        }
        for step in &self.behaviors {
            check_values(&schema.behavior, step, "behavior")?;
        }
        Ok(())
    }
}
