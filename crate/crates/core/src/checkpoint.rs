//! Versioned text checkpoints. The layout is documented in
//! `docs/CHECKPOINT_FORMAT.md`; writing is deterministic, so identical models
//! produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::embedding::Schema;
use crate::error::{MianError, Result};
use crate::model::MianModel;
use crate::numerics::{DenseMatrix, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::train::AdamState;

const MAGIC: &str = "#mian-checkpoint";
const VERSION: &str = "v1";

fn write_tensor<T: Scalar>(out: &mut String, tag: &str, path: &str, m: &DenseMatrix<T>) {
    writeln!(out, "{tag}\t{path}\t{}\t{}", m.rows(), m.cols()).unwrap();
    let vals: Vec<String> = m.data().iter().map(|v| v.to_f64_lossy().to_string()).collect();
    out.push_str(&vals.join("\t"));
    out.push('\n');
}

/// Serializes the model, its schema and the optimizer state.
pub fn to_text<T: Scalar>(model: &MianModel<T>, adam: &AdamState<T>) -> String {
    let mut s = String::new();
    writeln!(s, "{MAGIC}\t{VERSION}").unwrap();
    writeln!(s, "schema_hash\t{}", model.schema.hash()).unwrap();
    writeln!(s, "{}", model.schema.header_line()).unwrap();
    let config = model.config.to_kv_text();
    writeln!(s, "config\t{}", config.lines().count()).unwrap();
    s.push_str(&config);
    writeln!(s, "params\t{}", model.params.len()).unwrap();
    for (_, p) in model.params.iter() {
        write_tensor(&mut s, "param", &p.path, &p.value);
    }
    writeln!(s, "adam\t{}", adam.step).unwrap();
    for (id, p) in model.params.iter() {
        write_tensor(&mut s, "m", &p.path, adam.m.get(id));
        write_tensor(&mut s, "v", &p.path, adam.v.get(id));
    }
    s.push_str("end\n");
    s
}

pub fn save<T: Scalar>(path: &Path, model: &MianModel<T>, adam: &AdamState<T>) -> Result<()> {
    fs::write(path, to_text(model, adam))?;
    Ok(())
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> MianError {
        MianError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of checkpoint"))
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix('\t'))
            .ok_or_else(|| self.err(format!("expected `{key}`")))
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| self.err(format!("bad count `{v}`")))
    }

    fn tensor<T: Scalar>(&mut self, tag: &str) -> Result<(String, DenseMatrix<T>)> {
        let head: Vec<&str> = self.keyed(tag)?.split('\t').collect();
        if head.len() != 3 {
            return Err(self.err("tensor header needs path, rows and cols"));
        }
        let rows: usize = head[1].parse().map_err(|_| self.err("bad row count"))?;
        let cols: usize = head[2].parse().map_err(|_| self.err("bad column count"))?;
        let body = self.next()?;
        let vals: Vec<T> = if body.is_empty() {
            Vec::new()
        } else {
            body.split('\t')
                .map(|v| v.parse::<f64>().map(lit).map_err(|_| self.err(format!("bad value `{v}`"))))
                .collect::<Result<_>>()?
        };
        let m = DenseMatrix::from_vec(rows, cols, vals).map_err(|e| self.err(e.to_string()))?;
        Ok((head[0].to_string(), m))
    }
}

fn fill<T: Scalar>(
    reader: &mut Reader<'_>,
    tag: &str,
    store: &ParamStore<T>,
    mut put: impl FnMut(crate::numerics::ParamId, DenseMatrix<T>),
) -> Result<()> {
    for (id, p) in store.iter() {
        let (path, value) = reader.tensor::<T>(tag)?;
        if path != p.path {
            return Err(reader.err(format!("expected tensor `{}`, found `{path}`", p.path)));
        }
        if value.shape() != p.value.shape() {
            return Err(MianError::ShapeMismatch {
                op: "checkpoint",
                left: p.value.shape(),
                right: value.shape(),
            });
        }
        put(id, value);
    }
    Ok(())
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn from_text<T: Scalar>(text: &str) -> Result<(MianModel<T>, AdamState<T>)> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        line: 0,
    };
    let magic = r.next()?;
    if magic != format!("{MAGIC}\t{VERSION}") {
        return Err(r.err(format!("not a {VERSION} checkpoint")));
    }
    let hash = r.keyed("schema_hash")?.to_string();
    let schema: Schema = r.next()?.parse().map_err(|e: MianError| r.err(e.to_string()))?;
    if schema.hash() != hash {
        return Err(MianError::Schema(format!(
            "checkpoint schema hash {hash} does not match its schema ({})",
            schema.hash()
        )));
    }
    let n = r.count("config")?;
    let mut config_text = String::new();
    for _ in 0..n {
        config_text.push_str(r.next()?);
        config_text.push('\n');
    }
    let config = ModelConfig::from_kv_text(&config_text)?;
    let mut model = MianModel::<T>::new(config, schema)?;
    let n = r.count("params")?;
    if n != model.params.len() {
        return Err(r.err(format!("expected {} tensors, found {n}", model.params.len())));
    }
    let mut values = Vec::new();
    fill(&mut r, "param", &model.params, |id, v| values.push((id, v)))?;
    for (id, v) in values {
        *model.params.value_mut(id) = v;
    }
    let mut adam = AdamState::new(&model.params);
    adam.step = r.count("adam")? as u64;
    for (id, p) in model.params.iter() {
        for tag in ["m", "v"] {
            let (path, value) = r.tensor::<T>(tag)?;
            if path != p.path || value.shape() != p.value.shape() {
                return Err(r.err(format!("optimizer state for `{}` missing or misshapen", p.path)));
            }
            let slot = if tag == "m" { adam.m.get_mut(id) } else { adam.v.get_mut(id) };
            *slot = value;
        }
    }
    if r.next()? != "end" {
        return Err(r.err("expected `end`"));
    }
    Ok((model, adam))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(MianModel<T>, AdamState<T>)> {
    from_text(&fs::read_to_string(path)?)
}

/// Fails unless `schema` is the one the model was trained on.
pub fn ensure_schema<T>(model: &MianModel<T>, schema: &Schema) -> Result<()> {
    let (a, b) = (model.schema.hash(), schema.hash());
    if a != b {
        return Err(MianError::Schema(format!("checkpoint schema {a} does not match data schema {b}")));
    }
    Ok(())
}
