//! Global interaction: attention over the original group embeddings and the
//! three interactive representations.

use crate::error::{MianError, Result};
use crate::init::Initializer;
use crate::numerics::{DenseMatrix, NodeId, ParamId, ParamKind, ParamStore, Tape};
use crate::scalar::{lit, Scalar};

pub const NUM_SLOTS: usize = 7;

/// Fixed slot order of the global attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Item = 0,
    Behavior = 1,
    User = 2,
    Context = 3,
    Ibim = 4,
    Iuim = 5,
    Icim = 6,
}

impl Slot {
    pub const ALL: [Slot; NUM_SLOTS] = [
        Slot::Item,
        Slot::Behavior,
        Slot::User,
        Slot::Context,
        Slot::Ibim,
        Slot::Iuim,
        Slot::Icim,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Slot::Item => "e_i",
            Slot::Behavior => "e_b",
            Slot::User => "e_u",
            Slot::Context => "e_c",
            Slot::Ibim => "R_ibim",
            Slot::Iuim => "R_iuim",
            Slot::Icim => "R_icim",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `p_r` (`2d x d`) projects each interactive representation to width `d`;
/// row `l` of `w` (`7 x d`) and entry `l` of `b` (`7 x 1`) score slot `l`.
#[derive(Clone, Debug)]
pub struct GlobalParams {
    pub p_r: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

impl GlobalParams {
    pub fn register<T: Scalar>(prefix: &str, d: usize, store: &mut ParamStore<T>, init: &Initializer) -> Self {
        Self {
            p_r: init.add(store, &format!("{prefix}.p_r"), ParamKind::Weight, 2 * d, d),
            w: init.add(store, &format!("{prefix}.w"), ParamKind::Weight, NUM_SLOTS, d),
            b: init.add(store, &format!("{prefix}.b"), ParamKind::Bias, NUM_SLOTS, 1),
        }
    }
}

/// Mean over the rows where `mask` is true (all rows without a mask); the
/// zero vector when no row is selected.
pub fn masked_mean<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let count = (0..n).filter(|&i| keep(i)).count();
    let weights: Vec<T> = (0..n)
        .map(|i| if keep(i) && count > 0 { lit::<T>(1.0 / count as f64) } else { T::zero() })
        .collect();
    let w = tape.input(DenseMatrix::row_vector(weights));
    tape.matmul(w, x)
}

/// Projects a `1 x 2d` interactive representation to a `1 x d` slot.
pub fn project<T: Scalar>(tape: &mut Tape<'_, T>, r: NodeId, p: &GlobalParams) -> Result<NodeId> {
    let pr = tape.param(p.p_r);
    tape.matmul(r, pr)
}

/// Global attention over the given slots; `ids[k]` names the slot in row `k`
/// so its own score parameters are used. Returns `(R_g, alpha_g)`.
pub fn gim_nodes<T: Scalar>(
    tape: &mut Tape<'_, T>,
    slots: &[NodeId],
    ids: &[Slot],
    p: &GlobalParams,
) -> Result<(NodeId, NodeId)> {
    if slots.len() != ids.len() || slots.is_empty() {
        return Err(MianError::ShapeMismatch {
            op: "gim",
            left: (slots.len(), 1),
            right: (ids.len(), 1),
        });
    }
    let s = tape.concat_rows(slots)?;
    let rows: Vec<usize> = ids.iter().map(|s| s.index()).collect();
    let (w, b) = if rows.len() == NUM_SLOTS && rows.iter().enumerate().all(|(i, &r)| i == r) {
        (tape.param(p.w), tape.param(p.b))
    } else {
        (tape.gather(p.w, rows.clone()), tape.gather(p.b, rows))
    };
    let scores = tape.row_dot(s, w)?;
    let scores = tape.add(scores, b)?;
    let scores = tape.tanh(scores);
    let scores = tape.transpose(scores);
    let alpha = tape.softmax_rows(scores, None)?;
    let r_g = tape.matmul(alpha, s)?;
    Ok((r_g, alpha))
}

/// Builds the seven width-`d` slots in [`Slot::ALL`] order.
#[allow(clippy::too_many_arguments)]
pub fn assemble_slots<T: Scalar>(
    e_i: &[T],
    e_b: &DenseMatrix<T>,
    behavior_mask: &[bool],
    e_u: &DenseMatrix<T>,
    e_c: &DenseMatrix<T>,
    r_ibim: &[T],
    r_iuim: &[T],
    r_icim: &[T],
    params: &GlobalParams,
    store: &ParamStore<T>,
) -> Result<Vec<Vec<T>>> {
    let mut tape = Tape::new(store);
    let row = |tape: &mut Tape<'_, T>, v: &[T]| tape.input(DenseMatrix::row_vector(v.to_vec()));
    let ei = row(&mut tape, e_i);
    let eb = tape.input(e_b.clone());
    let eu = tape.input(e_u.clone());
    let ec = tape.input(e_c.clone());
    let mut nodes = vec![
        ei,
        masked_mean(&mut tape, eb, Some(behavior_mask))?,
        masked_mean(&mut tape, eu, None)?,
        masked_mean(&mut tape, ec, None)?,
    ];
    for r in [r_ibim, r_iuim, r_icim] {
        let n = row(&mut tape, r);
        nodes.push(project(&mut tape, n, params)?);
    }
    Ok(nodes.iter().map(|&n| tape.value(n).data().to_vec()).collect())
}

/// Global attention over exactly seven slots. Returns `(R_g, alpha_g)`.
pub fn gim<T: Scalar>(slots: &[Vec<T>], params: &GlobalParams, store: &ParamStore<T>) -> Result<(Vec<T>, Vec<T>)> {
    if slots.len() != NUM_SLOTS {
        return Err(MianError::ShapeMismatch {
            op: "gim slots",
            left: (slots.len(), 1),
            right: (NUM_SLOTS, 1),
        });
    }
    let mut tape = Tape::new(store);
    let nodes: Vec<NodeId> = slots
        .iter()
        .map(|s| tape.input(DenseMatrix::row_vector(s.clone())))
        .collect();
    let (r, a) = gim_nodes(&mut tape, &nodes, &Slot::ALL, params)?;
    Ok((tape.value(r).data().to_vec(), tape.value(a).data().to_vec()))
}
