//! Item-user and item-context interaction: candidate-anchored attention over
//! fine-grained profile and context fields.

use crate::behavior::ops::{attention_pool, ScoreMap};
use crate::error::{MianError, Result};
use crate::init::Initializer;
use crate::numerics::{DenseMatrix, NodeId, ParamId, ParamKind, ParamStore, Tape};
use crate::scalar::Scalar;

/// Per-field score maps: row `j` of `w` (shape `n x 2d`) and entry `j` of `b`
/// (shape `n x 1`) score field `j`. Fields never share score parameters.
#[derive(Clone, Debug)]
pub struct LocalAttentionParams {
    pub fields: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl LocalAttentionParams {
    pub fn register<T: Scalar>(
        prefix: &str,
        fields: usize,
        d: usize,
        store: &mut ParamStore<T>,
        init: &Initializer,
    ) -> Result<Self> {
        if fields == 0 {
            return Err(MianError::Schema(format!("{prefix} needs at least one field")));
        }
        Ok(Self {
            fields,
            w: init.add(store, &format!("{prefix}.w"), ParamKind::Weight, fields, 2 * d),
            b: init.add(store, &format!("{prefix}.b"), ParamKind::Bias, fields, 1),
        })
    }
}

/// Tape form shared by both modules. Returns `(R, alpha)`.
pub fn local_attention_nodes<T: Scalar>(
    tape: &mut Tape<'_, T>,
    e_i: NodeId,
    fields: NodeId,
    p: &LocalAttentionParams,
) -> Result<(NodeId, NodeId)> {
    let n = tape.value(fields).rows();
    if n == 0 {
        return Err(MianError::Empty("local attention fields"));
    }
    if n != p.fields {
        return Err(MianError::ShapeMismatch {
            op: "local attention",
            left: tape.value(fields).shape(),
            right: (p.fields, 1),
        });
    }
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    attention_pool(tape, e_i, fields, None, ScoreMap::PerElement { w, b })
}

fn run<T: Scalar>(
    e_i: &[T],
    rows: &DenseMatrix<T>,
    p: &LocalAttentionParams,
    store: &ParamStore<T>,
    what: &'static str,
) -> Result<(Vec<T>, Vec<T>)> {
    if rows.rows() == 0 {
        return Err(MianError::Empty(what));
    }
    let mut tape = Tape::new(store);
    let ei = tape.input(DenseMatrix::row_vector(e_i.to_vec()));
    let x = tape.input(rows.clone());
    let (r, a) = local_attention_nodes(&mut tape, ei, x, p)?;
    Ok((tape.value(r).data().to_vec(), tape.value(a).data().to_vec()))
}

/// Item-user interaction: returns `(R_iuim, alpha_u)`.
pub fn iuim<T: Scalar>(
    e_i: &[T],
    e_u: &DenseMatrix<T>,
    params: &LocalAttentionParams,
    store: &ParamStore<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    run(e_i, e_u, params, store, "user fields")
}

/// Item-context interaction: returns `(R_icim, alpha_c)`.
pub fn icim<T: Scalar>(
    e_i: &[T],
    e_c: &DenseMatrix<T>,
    params: &LocalAttentionParams,
    store: &ParamStore<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    run(e_i, e_c, params, store, "context fields")
}
