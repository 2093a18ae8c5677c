//! Item-behavior interaction: one transformer block over the behavior
//! sequence followed by candidate-conditioned attention pooling.

use crate::error::{MianError, Result};
use crate::init::Initializer;
use crate::numerics::{DenseMatrix, NodeId, ParamId, ParamKind, ParamStore, Tape};
use crate::scalar::{lit, Scalar};

/// Where layer normalization sits relative to each residual sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// `x + f(LN(x))`.
    Pre,
    /// `LN(x + f(x))`.
    Post,
}

/// One transformer block. The per-head projections are stored side by side:
/// columns `i*d/h .. (i+1)*d/h` of `wq`, `wk`, `wv` belong to head `i`.
#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_shift: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_shift: ParamId,
    pub ln_eps: f64,
}

impl TransformerParams {
    pub fn register<T: Scalar>(
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        ln_eps: f64,
        store: &mut ParamStore<T>,
        init: &Initializer,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(MianError::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let mut add = |name: &str, kind, r, c| init.add(store, &format!("{prefix}.{name}"), kind, r, c);
        Ok(Self {
            heads,
            wq: add("wq", ParamKind::Weight, d, d),
            wk: add("wk", ParamKind::Weight, d, d),
            wv: add("wv", ParamKind::Weight, d, d),
            wo: add("wo", ParamKind::Weight, d, d),
            w1: add("ffn.w1", ParamKind::Weight, d, d_ff),
            b1: add("ffn.b1", ParamKind::Bias, 1, d_ff),
            w2: add("ffn.w2", ParamKind::Weight, d_ff, d),
            b2: add("ffn.b2", ParamKind::Bias, 1, d),
            ln1_gain: add("ln1.gain", ParamKind::Gain, 1, d),
            ln1_shift: add("ln1.shift", ParamKind::Bias, 1, d),
            ln2_gain: add("ln2.gain", ParamKind::Gain, 1, d),
            ln2_shift: add("ln2.shift", ParamKind::Bias, 1, d),
            ln_eps,
        })
    }
}

/// Score map of the pooling attention: `2d x 1` weight and a scalar bias.
#[derive(Clone, Debug)]
pub struct IbimParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl IbimParams {
    pub fn register<T: Scalar>(prefix: &str, d: usize, store: &mut ParamStore<T>, init: &Initializer) -> Self {
        Self {
            w: init.add(store, &format!("{prefix}.w"), ParamKind::Weight, 2 * d, 1),
            b: init.add(store, &format!("{prefix}.b"), ParamKind::Bias, 1, 1),
        }
    }
}

pub mod ops {
    //! Tape-level building blocks.

    use super::*;

    /// Score parameters of an attention pool, as tape nodes.
    #[derive(Clone, Copy, Debug)]
    pub enum ScoreMap {
        /// One `2d x 1` column and a `1 x 1` bias shared by every element.
        Shared { w: NodeId, b: NodeId },
        /// An `n x 2d` matrix and `n x 1` bias, one score map per element.
        PerElement { w: NodeId, b: NodeId },
    }

    pub fn layer_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, gain: ParamId, shift: ParamId, eps: f64) -> Result<NodeId> {
        let g = tape.param(gain);
        let b = tape.param(shift);
        tape.layer_norm_rows(x, g, b, lit(eps))
    }

    /// Scaled dot-product self-attention with `h` heads; masked keys get zero weight.
    pub fn multi_head_self_attention<T: Scalar>(
        tape: &mut Tape<'_, T>,
        x: NodeId,
        mask: &[bool],
        p: &TransformerParams,
    ) -> Result<NodeId> {
        if !mask.iter().any(|&m| m) {
            return Err(MianError::AllMasked);
        }
        let d = tape.value(x).cols();
        let dh = d / p.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let wq = tape.param(p.wq);
        let wk = tape.param(p.wk);
        let wv = tape.param(p.wv);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let att = tape.softmax_rows(scores, Some(mask))?;
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = tape.param(p.wo);
        tape.matmul(cat, wo)
    }

    /// `max(0, x W1 + b1) W2 + b2`, row-wise.
    pub fn feed_forward<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, p: &TransformerParams) -> Result<NodeId> {
        let w1 = tape.param(p.w1);
        let b1 = tape.param(p.b1);
        let w2 = tape.param(p.w2);
        let b2 = tape.param(p.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    pub fn transformer_block<T: Scalar>(
        tape: &mut Tape<'_, T>,
        e_b: NodeId,
        mask: &[bool],
        p: &TransformerParams,
        placement: NormPlacement,
    ) -> Result<NodeId> {
        match placement {
            NormPlacement::Pre => {
                let l1 = layer_norm(tape, e_b, p.ln1_gain, p.ln1_shift, p.ln_eps)?;
                let m = multi_head_self_attention(tape, l1, mask, p)?;
                let x1 = tape.add(e_b, m)?;
                let l2 = layer_norm(tape, x1, p.ln2_gain, p.ln2_shift, p.ln_eps)?;
                let f = feed_forward(tape, l2, p)?;
                tape.add(x1, f)
            }
            NormPlacement::Post => {
                let m = multi_head_self_attention(tape, e_b, mask, p)?;
                let r1 = tape.add(e_b, m)?;
                let x1 = layer_norm(tape, r1, p.ln1_gain, p.ln1_shift, p.ln_eps)?;
                let f = feed_forward(tape, x1, p)?;
                let r2 = tape.add(x1, f)?;
                layer_norm(tape, r2, p.ln2_gain, p.ln2_shift, p.ln_eps)
            }
        }
    }

    /// Softmax attention pooling of `V_k = [anchor, x_k]` with scores
    /// `tanh(V_k . w_k + b_k)`. `R = sum alpha_k V_k` equals `[anchor, sum alpha_k x_k]`.
    ///
    /// Returns `(R, alpha)` with `R` of shape `1 x 2d` and `alpha` of shape `1 x n`.
    pub fn attention_pool<T: Scalar>(
        tape: &mut Tape<'_, T>,
        anchor: NodeId,
        x: NodeId,
        mask: Option<&[bool]>,
        scores: ScoreMap,
    ) -> Result<(NodeId, NodeId)> {
        let n = tape.value(x).rows();
        let rep = tape.broadcast_rows(anchor, n)?;
        let v = tape.concat_cols(&[rep, x])?;
        let scores = match scores {
            ScoreMap::Shared { w, b } => {
                let s = tape.matmul(v, w)?;
                tape.add_row(s, b)?
            }
            ScoreMap::PerElement { w, b } => {
                let s = tape.row_dot(v, w)?;
                tape.add(s, b)?
            }
        };
        let scores = tape.tanh(scores);
        let scores = tape.transpose(scores);
        let alpha = tape.softmax_rows(scores, mask)?;
        // The weights sum to one, so the anchor half of `sum alpha V` is the
        // anchor itself; concatenating keeps it exact.
        let pooled = tape.matmul(alpha, x)?;
        let r = tape.concat_cols(&[anchor, pooled])?;
        Ok((r, alpha))
    }

    /// Candidate-conditioned pooling over the encoded behaviors.
    pub fn ibim_attention<T: Scalar>(
        tape: &mut Tape<'_, T>,
        e_i: NodeId,
        h_b: NodeId,
        mask: &[bool],
        p: &IbimParams,
    ) -> Result<(NodeId, NodeId)> {
        if !mask.iter().any(|&m| m) {
            return Err(MianError::AllMasked);
        }
        let w = tape.param(p.w);
        let b = tape.param(p.b);
        attention_pool(tape, e_i, h_b, Some(mask), ScoreMap::Shared { w, b })
    }
}

/// Multi-head self-attention on plain values.
pub fn multi_head_self_attention<T: Scalar>(
    l_b: &DenseMatrix<T>,
    mask: &[bool],
    params: &TransformerParams,
    store: &ParamStore<T>,
) -> Result<DenseMatrix<T>> {
    let mut tape = Tape::new(store);
    let x = tape.input(l_b.clone());
    let out = ops::multi_head_self_attention(&mut tape, x, mask, params)?;
    Ok(tape.value(out).clone())
}

/// The pre-norm block `x1 = e_b + MHSA(LN1(e_b)); h_b = x1 + FFN(LN2(x1))`.
pub fn pre_ln_transformer<T: Scalar>(
    e_b: &DenseMatrix<T>,
    mask: &[bool],
    params: &TransformerParams,
    store: &ParamStore<T>,
) -> Result<DenseMatrix<T>> {
    transformer(e_b, mask, params, store, NormPlacement::Pre)
}

pub fn transformer<T: Scalar>(
    e_b: &DenseMatrix<T>,
    mask: &[bool],
    params: &TransformerParams,
    store: &ParamStore<T>,
    placement: NormPlacement,
) -> Result<DenseMatrix<T>> {
    let mut tape = Tape::new(store);
    let x = tape.input(e_b.clone());
    let out = ops::transformer_block(&mut tape, x, mask, params, placement)?;
    Ok(tape.value(out).clone())
}

/// Returns `(R_ibim, alpha)`; `alpha` has one entry per position, zero where masked.
pub fn ibim_attention<T: Scalar>(
    e_i: &[T],
    h_b: &DenseMatrix<T>,
    mask: &[bool],
    params: &IbimParams,
    store: &ParamStore<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut tape = Tape::new(store);
    let ei = tape.input(DenseMatrix::row_vector(e_i.to_vec()));
    let hb = tape.input(h_b.clone());
    let (r, a) = ops::ibim_attention(&mut tape, ei, hb, mask, params)?;
    Ok((tape.value(r).data().to_vec(), tape.value(a).data().to_vec()))
}
