//! Tab-separated dataset files: one schema header line, then one instance per line.
//!
//! ```text
//! label \t item \t behaviors \t user \t context
//! ```
//!
//! Groups are comma-separated field values; behavior steps are joined by `|`
//! (empty when there are none). Categorical values are decimal indices,
//! numerical values use Rust's shortest round-trip `f64` formatting.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use crate::data::{FieldValue, RawInstance};
use crate::embedding::{FieldKind, FieldSpec, Schema};
use crate::error::{MianError, Result};

fn write_values(out: &mut String, values: &[FieldValue]) {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        match v {
            FieldValue::Cat(i) => write!(out, "{i}").unwrap(),
            FieldValue::Num(x) => write!(out, "{x}").unwrap(),
        }
    }
}

/// One instance line without the trailing newline.
pub fn format_instance(raw: &RawInstance) -> String {
    let mut s = String::with_capacity(256);
    write!(s, "{}\t", raw.label).unwrap();
    write_values(&mut s, &raw.item);
    s.push('\t');
    for (t, step) in raw.behaviors.iter().enumerate() {
        if t > 0 {
            s.push('|');
        }
        write_values(&mut s, step);
    }
    s.push('\t');
    write_values(&mut s, &raw.user);
    s.push('\t');
    write_values(&mut s, &raw.context);
    s
}

pub fn write_dataset<W: Write>(mut w: W, schema: &Schema, instances: &[RawInstance]) -> Result<()> {
    writeln!(w, "{}", schema.header_line())?;
    for raw in instances {
        writeln!(w, "{}", format_instance(raw))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, schema: &Schema, instances: &[RawInstance]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), schema, instances)
}

fn parse_values(fields: &[FieldSpec], text: &str, line: usize, what: &str) -> Result<Vec<FieldValue>> {
    let err = |msg: String| MianError::Parse { line, msg };
    let parts: Vec<&str> = if text.is_empty() { Vec::new() } else { text.split(',').collect() };
    if parts.len() != fields.len() {
        return Err(err(format!("{what}: expected {} values, found {}", fields.len(), parts.len())));
    }
    fields
        .iter()
        .zip(parts)
        .map(|(f, p)| match f.kind {
            FieldKind::Categorical { .. } => p
                .parse()
                .map(FieldValue::Cat)
                .map_err(|_| err(format!("field `{}`: `{p}` is not an index", f.name))),
            FieldKind::Numerical => p
                .parse()
                .map(FieldValue::Num)
                .map_err(|_| err(format!("field `{}`: `{p}` is not a number", f.name))),
        })
        .collect()
}

/// Parses and validates one instance line (`line` is 1-based, for errors).
pub fn parse_instance(schema: &Schema, text: &str, line: usize) -> Result<RawInstance> {
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != 5 {
        return Err(MianError::Parse {
            line,
            msg: format!("expected 5 tab-separated groups, found {}", cols.len()),
        });
    }
    let label = match cols[0] {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(MianError::Parse {
                line,
                msg: format!("label `{other}` is not 0 or 1"),
            })
        }
    };
    let behaviors = if cols[2].is_empty() {
        Vec::new()
    } else {
        cols[2]
            .split('|')
            .map(|step| parse_values(&schema.behavior, step, line, "behavior"))
            .collect::<Result<_>>()?
    };
    let raw = RawInstance {
        label,
        item: parse_values(&schema.item, cols[1], line, "item")?,
        behaviors,
        user: parse_values(&schema.user, cols[3], line, "user")?,
        context: parse_values(&schema.context, cols[4], line, "context")?,
    };
    raw.validate(schema).map_err(|e| MianError::Parse {
        line,
        msg: e.to_string(),
    })?;
    Ok(raw)
}

/// Streaming reader: the header is parsed eagerly, instances on demand.
pub struct DatasetReader<R> {
    schema: Schema,
    lines: Lines<R>,
    line: usize,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| MianError::Parse {
            line: 1,
            msg: "missing header".into(),
        })??;
        let schema = header.parse::<Schema>().map_err(|e| MianError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        Ok(Self { schema, lines, line: 1 })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<RawInstance>;

    fn next(&mut self) -> Option<Self::Item> {
        let text = match self.lines.next()? {
            Ok(t) => t,
            Err(e) => return Some(Err(e.into())),
        };
        self.line += 1;
        Some(parse_instance(&self.schema, &text, self.line))
    }
}

pub fn open_dataset(path: &Path) -> Result<DatasetReader<BufReader<File>>> {
    DatasetReader::new(BufReader::new(File::open(path)?))
}

/// Reads a whole dataset, stopping at the first bad record.
pub fn load(path: &Path) -> Result<(Schema, Vec<RawInstance>)> {
    let reader = open_dataset(path)?;
    let schema = reader.schema().clone();
    let instances = reader.collect::<Result<Vec<_>>>()?;
    Ok((schema, instances))
}
