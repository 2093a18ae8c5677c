use crate::data::{FieldValue, RawInstance};
use crate::embedding::{FieldKind, FieldSpec, Group, Schema};
use crate::error::{MianError, Result};
use crate::init::Initializer;
use crate::numerics::{DenseMatrix, NodeId, ParamId, ParamKind, ParamStore, Tape};
use crate::scalar::{lit, Scalar};

/// How one field becomes a width-`d` vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldEmbedding {
    /// Row lookup in a `vocab x d` table.
    Table(ParamId),
    /// `x * w + b` with `w`, `b` of shape `1 x d`.
    Affine { w: ParamId, b: ParamId },
}

/// Handles to the embedding parameters of every field.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub width: usize,
    pub item: Vec<FieldEmbedding>,
    pub behavior: Vec<FieldEmbedding>,
    pub user: Vec<FieldEmbedding>,
    pub context: Vec<FieldEmbedding>,
    /// `(item fields * d) x d`, applied to the concatenated item embeddings.
    pub item_proj: Option<ParamId>,
    /// `(behavior fields * d) x d`, present only for multi-field behaviors.
    pub behavior_proj: Option<ParamId>,
}

/// Embedding-layer output as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedInstance<T> {
    pub e_i: Vec<T>,
    /// `T x d`; rows at and after the real sequence length are zero.
    pub e_b: DenseMatrix<T>,
    pub e_u: DenseMatrix<T>,
    pub e_c: DenseMatrix<T>,
    /// `true` where a real behavior sits.
    pub behavior_mask: Vec<bool>,
}

/// Embedding-layer output as tape nodes.
#[derive(Clone, Debug)]
pub struct EmbeddedNodes {
    pub e_i: NodeId,
    pub e_b: NodeId,
    pub e_u: NodeId,
    pub e_c: NodeId,
    pub mask: Vec<bool>,
    pub n_valid: usize,
}

impl EmbeddedNodes {
    pub fn to_values<T: Scalar>(&self, tape: &Tape<'_, T>) -> EmbeddedInstance<T> {
        EmbeddedInstance {
            e_i: tape.value(self.e_i).data().to_vec(),
            e_b: tape.value(self.e_b).clone(),
            e_u: tape.value(self.e_u).clone(),
            e_c: tape.value(self.e_c).clone(),
            behavior_mask: self.mask.clone(),
        }
    }
}

fn register<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &Initializer,
    group: Group,
    field: &FieldSpec,
    width: usize,
) -> FieldEmbedding {
    let base = format!("embedding.{}.{}", group.tag(), field.name);
    match field.kind {
        FieldKind::Categorical { vocab } => {
            FieldEmbedding::Table(init.add(store, &base, ParamKind::Embedding, vocab, width))
        }
        FieldKind::Numerical => FieldEmbedding::Affine {
            w: init.add(store, &format!("{base}.w"), ParamKind::Weight, 1, width),
            b: init.add(store, &format!("{base}.b"), ParamKind::Bias, 1, width),
        },
    }
}

impl EmbeddingTables {
    /// Registers tables for every field of `schema`.
    ///
    /// With `share_item_table`, a categorical behavior field reuses the table of
    /// the item field with the same name and vocabulary.
    pub fn register<T: Scalar>(
        schema: &Schema,
        width: usize,
        share_item_table: bool,
        project_item: bool,
        store: &mut ParamStore<T>,
        init: &Initializer,
    ) -> Self {
        let item: Vec<FieldEmbedding> = schema
            .item
            .iter()
            .map(|f| register(store, init, Group::Item, f, width))
            .collect();
        let behavior = schema
            .behavior
            .iter()
            .map(|f| {
                if share_item_table {
                    if let Some(pos) = schema.item.iter().position(|i| i.name == f.name && i.kind == f.kind) {
                        if let FieldEmbedding::Table(_) = item[pos] {
                            return item[pos];
                        }
                    }
                }
                register(store, init, Group::Behavior, f, width)
            })
            .collect();
        let user = schema.user.iter().map(|f| register(store, init, Group::User, f, width)).collect();
        let context = schema
            .context
            .iter()
            .map(|f| register(store, init, Group::Context, f, width))
            .collect();
        let item_proj = project_item.then(|| {
            init.add(store, "embedding.item_proj", ParamKind::Weight, schema.item.len() * width, width)
        });
        let behavior_proj = (schema.behavior.len() > 1).then(|| {
            init.add(store, "embedding.behavior_proj", ParamKind::Weight, schema.behavior.len() * width, width)
        });
        Self {
            width,
            item,
            behavior,
            user,
            context,
            item_proj,
            behavior_proj,
        }
    }

    pub fn group(&self, g: Group) -> &[FieldEmbedding] {
        match g {
            Group::Item => &self.item,
            Group::Behavior => &self.behavior,
            Group::User => &self.user,
            Group::Context => &self.context,
        }
    }

    /// Embeds a single field value on the tape, returning a `1 x d` node.
    pub fn field_node<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        field: &FieldSpec,
        embedding: FieldEmbedding,
        value: FieldValue,
    ) -> Result<NodeId> {
        match (field.kind, embedding, value) {
            (FieldKind::Categorical { vocab }, FieldEmbedding::Table(table), FieldValue::Cat(i)) => {
                if i >= vocab {
                    return Err(MianError::OutOfVocabulary {
                        field: field.name.clone(),
                        index: i,
                        vocab,
                    });
                }
                Ok(tape.gather(table, vec![i]))
            }
            (FieldKind::Numerical, FieldEmbedding::Affine { w, b }, FieldValue::Num(x)) => {
                let xn = tape.input(DenseMatrix::row_vector(vec![lit::<T>(x)]));
                let w = tape.param(w);
                let b = tape.param(b);
                let xw = tape.matmul(xn, w)?;
                tape.add(xw, b)
            }
            _ => Err(MianError::Schema(format!("field `{}`: value kind does not match schema", field.name))),
        }
    }

    /// Stacks one row per field of a group.
    fn group_rows<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        fields: &[FieldSpec],
        embeds: &[FieldEmbedding],
        values: &[FieldValue],
        what: &str,
    ) -> Result<Vec<NodeId>> {
        if fields.len() != values.len() {
            return Err(MianError::Schema(format!(
                "{what}: expected {} fields, found {}",
                fields.len(),
                values.len()
            )));
        }
        fields
            .iter()
            .zip(embeds)
            .zip(values)
            .map(|((f, &e), &v)| self.field_node(tape, f, e, v))
            .collect()
    }

    /// Behavior rows for one field over the valid steps, `n x d`.
    fn behavior_column<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        field_no: usize,
        field: &FieldSpec,
        raw: &RawInstance,
    ) -> Result<NodeId> {
        let embedding = self.behavior[field_no];
        let mut cats = Vec::with_capacity(raw.behaviors.len());
        let mut nums = Vec::with_capacity(raw.behaviors.len());
        for step in &raw.behaviors {
            match (field.kind, step.get(field_no)) {
                (FieldKind::Categorical { vocab }, Some(FieldValue::Cat(i))) => {
                    if *i >= vocab {
                        return Err(MianError::OutOfVocabulary {
                            field: field.name.clone(),
                            index: *i,
                            vocab,
                        });
                    }
                    cats.push(*i);
                }
                (FieldKind::Numerical, Some(FieldValue::Num(x))) => nums.push(lit::<T>(*x)),
                _ => {
                    return Err(MianError::Schema(format!("behavior field `{}`: missing or mistyped value", field.name)))
                }
            }
        }
        match embedding {
            FieldEmbedding::Table(table) => Ok(tape.gather(table, cats)),
            FieldEmbedding::Affine { w, b } => {
                let n = nums.len();
                let x = tape.input(DenseMatrix::from_vec(n, 1, nums)?);
                let w = tape.param(w);
                let b = tape.param(b);
                let xw = tape.matmul(x, w)?;
                tape.add_row(xw, b)
            }
        }
    }

    /// Embeds a whole instance on the tape.
    pub fn embed_nodes<T: Scalar>(&self, tape: &mut Tape<'_, T>, schema: &Schema, raw: &RawInstance) -> Result<EmbeddedNodes> {
        let d = self.width;
        let t_len = schema.seq_len;

        let item_rows = self.group_rows(tape, &schema.item, &self.item, &raw.item, "item")?;
        let e_i = match self.item_proj {
            Some(proj) => {
                let cat = tape.concat_cols(&item_rows)?;
                let p = tape.param(proj);
                tape.matmul(cat, p)?
            }
            None => tape.sum(&item_rows)?,
        };

        let n_valid = raw.behaviors.len();
        if n_valid > t_len {
            return Err(MianError::Schema(format!("{n_valid} behaviors exceed window T={t_len}")));
        }
        for step in &raw.behaviors {
            if step.len() != schema.behavior.len() {
                return Err(MianError::Schema(format!(
                    "behavior step has {} values, schema declares {}",
                    step.len(),
                    schema.behavior.len()
                )));
            }
        }
        let e_b = if n_valid == 0 {
            tape.input(DenseMatrix::zeros(t_len, d))
        } else {
            let cols = schema
                .behavior
                .iter()
                .enumerate()
                .map(|(k, f)| self.behavior_column(tape, k, f, raw))
                .collect::<Result<Vec<_>>>()?;
            let rows = match self.behavior_proj {
                Some(proj) => {
                    let cat = tape.concat_cols(&cols)?;
                    let p = tape.param(proj);
                    tape.matmul(cat, p)?
                }
                None => cols[0],
            };
            tape.pad_rows(rows, t_len)?
        };
        let mask = (0..t_len).map(|t| t < n_valid).collect();

        let user_rows = self.group_rows(tape, &schema.user, &self.user, &raw.user, "user")?;
        let e_u = tape.concat_rows(&user_rows)?;
        let ctx_rows = self.group_rows(tape, &schema.context, &self.context, &raw.context, "context")?;
        let e_c = tape.concat_rows(&ctx_rows)?;

        Ok(EmbeddedNodes {
            e_i,
            e_b,
            e_u,
            e_c,
            mask,
            n_valid,
        })
    }
}

/// Embeds one field value: a table row for categorical fields, the learned
/// affine map for numerical ones.
pub fn embed_field<T: Scalar>(
    field: &FieldSpec,
    value: FieldValue,
    tables: &EmbeddingTables,
    store: &ParamStore<T>,
) -> Result<Vec<T>> {
    let embedding = find_embedding(field, tables, store)?;
    let mut tape = Tape::new(store);
    let node = tables.field_node(&mut tape, field, embedding, value)?;
    Ok(tape.value(node).data().to_vec())
}

fn find_embedding<T: Scalar>(field: &FieldSpec, tables: &EmbeddingTables, store: &ParamStore<T>) -> Result<FieldEmbedding> {
    let base = format!("embedding.{}.{}", field.group.tag(), field.name);
    if let Some(id) = store.id(&base) {
        return Ok(FieldEmbedding::Table(id));
    }
    if let (Some(w), Some(b)) = (store.id(&format!("{base}.w")), store.id(&format!("{base}.b"))) {
        return Ok(FieldEmbedding::Affine { w, b });
    }
    if field.group == Group::Behavior {
        let shared = format!("embedding.item.{}", field.name);
        if let Some(id) = store.id(&shared) {
            if tables.behavior.contains(&FieldEmbedding::Table(id)) {
                return Ok(FieldEmbedding::Table(id));
            }
        }
    }
    Err(MianError::Schema(format!("no embedding registered for field `{}`", field.name)))
}

/// Runs the embedding layer on one instance.
pub fn embed_instance<T: Scalar>(
    raw: &RawInstance,
    schema: &Schema,
    tables: &EmbeddingTables,
    store: &ParamStore<T>,
) -> Result<EmbeddedInstance<T>> {
    let mut tape = Tape::new(store);
    let nodes = tables.embed_nodes(&mut tape, schema, raw)?;
    Ok(nodes.to_values(&tape))
}
