//! The full network: embedding, local and global interaction, prediction MLP
//! and the two-class softmax head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::behavior::{ops as bops, IbimParams, TransformerParams};
use crate::config::{Architecture, ModelConfig};
use crate::data::RawInstance;
use crate::embedding::{EmbeddedInstance, EmbeddedNodes, EmbeddingTables, Schema};
use crate::error::{MianError, Result};
use crate::global::{gim_nodes, masked_mean, project, GlobalParams, Slot};
use crate::init::Initializer;
use crate::interaction::{local_attention_nodes, LocalAttentionParams};
use crate::numerics::{softmax, DenseMatrix, NodeId, ParamGrads, ParamId, ParamKind, ParamStore, Tape};
use crate::scalar::{lit, Scalar};

/// Handles into the parameter store for every block a variant contains.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embedding: EmbeddingTables,
    pub transformer: Option<TransformerParams>,
    pub ibim: Option<IbimParams>,
    pub iuim: Option<LocalAttentionParams>,
    pub icim: Option<LocalAttentionParams>,
    pub global: Option<GlobalParams>,
    /// Hidden layers `(W, b)`, row-vector convention `relu(x W + b)`.
    pub mlp: Vec<(ParamId, ParamId)>,
    /// Output map to two logits; absent for the logistic baseline.
    pub output: Option<(ParamId, ParamId)>,
    /// Intercept of the logistic baseline.
    pub intercept: Option<ParamId>,
}

/// Attention weights of one forward pass. Families a variant does not
/// contain are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    /// One weight per behavior position; zero at padding, all zero when the
    /// instance has no behaviors.
    pub alpha_t: Option<Vec<T>>,
    pub alpha_u: Option<Vec<T>>,
    pub alpha_c: Option<Vec<T>>,
    pub alpha_g: Option<Vec<T>>,
    /// Slot of each `alpha_g` entry.
    pub slots: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logits: [T; 2],
    pub p_click: T,
    pub attention: AttentionRecord<T>,
}

/// Every intermediate value of one evaluation-mode forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub embedded: EmbeddedInstance<T>,
    pub h_b: Option<DenseMatrix<T>>,
    pub r_ibim: Option<Vec<T>>,
    pub r_iuim: Option<Vec<T>>,
    pub r_icim: Option<Vec<T>>,
    pub slots: Vec<(Slot, Vec<T>)>,
    pub r_g: Option<Vec<T>>,
    pub mlp_input: Vec<T>,
    pub prediction: Prediction<T>,
}

struct Built {
    logits: NodeId,
    emb: EmbeddedNodes,
    h_b: Option<NodeId>,
    r_ibim: Option<NodeId>,
    alpha_t: Option<Option<NodeId>>,
    r_iuim: Option<NodeId>,
    alpha_u: Option<NodeId>,
    r_icim: Option<NodeId>,
    alpha_c: Option<NodeId>,
    slots: Vec<(Slot, NodeId)>,
    r_g: Option<NodeId>,
    alpha_g: Option<NodeId>,
    mlp_input: NodeId,
}

/// Per-batch objective split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss<T> {
    /// Mean cross-entropy over the batch.
    pub data: T,
    /// `l2_coeff * sum ||W||^2` over weight matrices.
    pub penalty: T,
}

impl<T: Scalar> BatchLoss<T> {
    pub fn total(&self) -> T {
        self.data + self.penalty
    }
}

#[derive(Clone, Debug)]
pub struct MianModel<T> {
    pub config: ModelConfig,
    pub schema: Schema,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

fn finite<T: Scalar>(tape: &Tape<'_, T>, node: NodeId, layer: &str) -> Result<()> {
    if tape.value(node).is_finite() {
        Ok(())
    } else {
        Err(MianError::NonFinite(format!("layer `{layer}`")))
    }
}

impl<T: Scalar> MianModel<T> {
    /// Builds and initializes a model for `schema`.
    pub fn new(config: ModelConfig, schema: Schema) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        if config.seq_len != schema.seq_len {
            return Err(MianError::Schema(format!(
                "config seq_len {} differs from dataset T {}",
                config.seq_len, schema.seq_len
            )));
        }
        let init = Initializer {
            seed: config.seed,
            stddev: config.init_stddev,
        };
        let mut store = ParamStore::new();
        let d = config.d;
        let arch = config.variant.architecture();
        let layout = match arch {
            Architecture::Logistic => {
                let embedding = EmbeddingTables::register(&schema, 1, config.share_item_table, false, &mut store, &init);
                let intercept = Some(init.add(&mut store, "logistic.intercept", ParamKind::Bias, 1, 1));
                Layout {
                    embedding,
                    transformer: None,
                    ibim: None,
                    iuim: None,
                    icim: None,
                    global: None,
                    mlp: Vec::new(),
                    output: None,
                    intercept,
                }
            }
            Architecture::Mlp | Architecture::Mian { .. } => {
                let embedding = EmbeddingTables::register(&schema, d, config.share_item_table, true, &mut store, &init);
                let (mut transformer, mut ibim, mut iuim, mut icim, mut global) = (None, None, None, None, None);
                let mut input_width = 4 * d;
                if let Architecture::Mian {
                    ibim: use_ibim,
                    encoder,
                    iuim: use_iuim,
                    icim: use_icim,
                    gim,
                } = arch
                {
                    if use_ibim {
                        if encoder.is_some() {
                            transformer = Some(TransformerParams::register(
                                "ibim.transformer",
                                d,
                                config.heads,
                                config.d_ff,
                                config.ln_eps,
                                &mut store,
                                &init,
                            )?);
                        }
                        ibim = Some(IbimParams::register("ibim.score", d, &mut store, &init));
                    }
                    if use_iuim {
                        iuim = Some(LocalAttentionParams::register("iuim", schema.num_user(), d, &mut store, &init)?);
                    }
                    if use_icim {
                        icim = Some(LocalAttentionParams::register("icim", schema.num_context(), d, &mut store, &init)?);
                    }
                    let n_slots = 4 + [use_ibim, use_iuim, use_icim].iter().filter(|&&b| b).count();
                    if gim || n_slots > 4 {
                        global = Some(GlobalParams::register("gim", d, &mut store, &init));
                    }
                    input_width = if gim { d } else { n_slots * d };
                }
                let mut mlp = Vec::new();
                let mut width = input_width;
                for (k, &h) in config.mlp_dims.iter().enumerate() {
                    let w = init.add(&mut store, &format!("mlp.{k}.w"), ParamKind::Weight, width, h);
                    let b = init.add(&mut store, &format!("mlp.{k}.b"), ParamKind::Bias, 1, h);
                    mlp.push((w, b));
                    width = h;
                }
                let output = Some((
                    init.add(&mut store, "output.w", ParamKind::Weight, width, 2),
                    init.add(&mut store, "output.b", ParamKind::Bias, 1, 2),
                ));
                Layout {
                    embedding,
                    transformer,
                    ibim,
                    iuim,
                    icim,
                    global,
                    mlp,
                    output,
                    intercept: None,
                }
            }
        };
        Ok(Self {
            config,
            schema,
            params: store,
            layout,
        })
    }

    /// Zeroes the output map so every prediction is exactly 0.5.
    pub fn zero_output(&mut self) {
        let ids: Vec<ParamId> = match (self.layout.output, self.layout.intercept) {
            (Some((w, b)), _) => vec![w, b],
            (None, Some(c)) => self
                .params
                .iter()
                .filter(|(_, p)| p.path.starts_with("embedding.") || p.path == "logistic.intercept")
                .map(|(id, _)| id)
                .chain(std::iter::once(c))
                .collect(),
            _ => Vec::new(),
        };
        for id in ids {
            self.params.value_mut(id).fill(T::zero());
        }
    }

    fn build(&self, tape: &mut Tape<'_, T>, raw: &RawInstance, mut dropout: Option<&mut ChaCha8Rng>) -> Result<Built> {
        let emb = self.layout.embedding.embed_nodes(tape, &self.schema, raw)?;
        for n in [emb.e_i, emb.e_b, emb.e_u, emb.e_c] {
            finite(tape, n, "embedding")?;
        }
        let mut built = Built {
            logits: emb.e_i,
            h_b: None,
            r_ibim: None,
            alpha_t: None,
            r_iuim: None,
            alpha_u: None,
            r_icim: None,
            alpha_c: None,
            slots: Vec::new(),
            r_g: None,
            alpha_g: None,
            mlp_input: emb.e_i,
            emb,
        };
        let emb = built.emb.clone();

        match self.config.variant.architecture() {
            Architecture::Logistic => {
                let b_mean = masked_mean(tape, emb.e_b, Some(&emb.mask))?;
                let u = tape.transpose(emb.e_u);
                let ones_u = tape.input(DenseMatrix::filled(self.schema.num_user(), 1, T::one()));
                let u_sum = tape.matmul(u, ones_u)?;
                let c = tape.transpose(emb.e_c);
                let ones_c = tape.input(DenseMatrix::filled(self.schema.num_context(), 1, T::one()));
                let c_sum = tape.matmul(c, ones_c)?;
                let intercept = tape.param(self.layout.intercept.expect("logistic intercept"));
                let z = tape.sum(&[intercept, emb.e_i, b_mean, u_sum, c_sum])?;
                let zero = tape.input(DenseMatrix::zeros(1, 1));
                built.mlp_input = z;
                built.logits = tape.concat_cols(&[zero, z])?;
                finite(tape, built.logits, "output")?;
                return Ok(built);
            }
            Architecture::Mlp => {
                let parts = [
                    emb.e_i,
                    masked_mean(tape, emb.e_b, Some(&emb.mask))?,
                    masked_mean(tape, emb.e_u, None)?,
                    masked_mean(tape, emb.e_c, None)?,
                ];
                built.mlp_input = tape.concat_cols(&parts)?;
            }
            Architecture::Mian { encoder, gim, .. } => {
                let mut slots = vec![
                    (Slot::Item, emb.e_i),
                    (Slot::Behavior, masked_mean(tape, emb.e_b, Some(&emb.mask))?),
                    (Slot::User, masked_mean(tape, emb.e_u, None)?),
                    (Slot::Context, masked_mean(tape, emb.e_c, None)?),
                ];
                if let Some(ibim) = &self.layout.ibim {
                    let (r, alpha) = if emb.n_valid == 0 {
                        let zeros = tape.input(DenseMatrix::zeros(1, self.config.d));
                        (tape.concat_cols(&[emb.e_i, zeros])?, None)
                    } else {
                        let h_b = match (&self.layout.transformer, encoder) {
                            (Some(tp), Some(placement)) => {
                                let h = bops::transformer_block(tape, emb.e_b, &emb.mask, tp, placement)?;
                                finite(tape, h, "transformer")?;
                                h
                            }
                            _ => emb.e_b,
                        };
                        built.h_b = Some(h_b);
                        let (r, a) = bops::ibim_attention(tape, emb.e_i, h_b, &emb.mask, ibim)?;
                        (r, Some(a))
                    };
                    finite(tape, r, "ibim")?;
                    built.r_ibim = Some(r);
                    built.alpha_t = Some(alpha);
                }
                if let Some(p) = &self.layout.iuim {
                    let (r, a) = local_attention_nodes(tape, emb.e_i, emb.e_u, p)?;
                    finite(tape, r, "iuim")?;
                    built.r_iuim = Some(r);
                    built.alpha_u = Some(a);
                }
                if let Some(p) = &self.layout.icim {
                    let (r, a) = local_attention_nodes(tape, emb.e_i, emb.e_c, p)?;
                    finite(tape, r, "icim")?;
                    built.r_icim = Some(r);
                    built.alpha_c = Some(a);
                }
                for (slot, r) in [
                    (Slot::Ibim, built.r_ibim),
                    (Slot::Iuim, built.r_iuim),
                    (Slot::Icim, built.r_icim),
                ] {
                    if let Some(r) = r {
                        let g = self.layout.global.as_ref().expect("projection registered with any R slot");
                        slots.push((slot, project(tape, r, g)?));
                    }
                }
                let nodes: Vec<NodeId> = slots.iter().map(|s| s.1).collect();
                built.mlp_input = if gim {
                    let ids: Vec<Slot> = slots.iter().map(|s| s.0).collect();
                    let g = self.layout.global.as_ref().expect("global params");
                    let (r_g, alpha) = gim_nodes(tape, &nodes, &ids, g)?;
                    finite(tape, r_g, "gim")?;
                    built.r_g = Some(r_g);
                    built.alpha_g = Some(alpha);
                    r_g
                } else {
                    tape.concat_cols(&nodes)?
                };
                built.slots = slots;
            }
        }

        let mut x = built.mlp_input;
        for (k, &(w, b)) in self.layout.mlp.iter().enumerate() {
            let w = tape.param(w);
            let b = tape.param(b);
            let h = tape.matmul(x, w)?;
            let h = tape.add(h, b)?;
            x = tape.relu(h);
            if let Some(rng) = dropout.as_deref_mut() {
                let p = self.config.dropout;
                if p > 0.0 {
                    let keep = lit::<T>(1.0 / (1.0 - p));
                    let cols = tape.value(x).cols();
                    let mask: Vec<T> = (0..cols)
                        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                        .collect();
                    x = tape.mul_const(x, DenseMatrix::row_vector(mask))?;
                }
            }
            finite(tape, x, &format!("mlp.{k}"))?;
        }
        let (w, b) = self.layout.output.expect("output layer");
        let w = tape.param(w);
        let b = tape.param(b);
        let z = tape.matmul(x, w)?;
        built.logits = tape.add(z, b)?;
        finite(tape, built.logits, "output")?;
        Ok(built)
    }

    fn prediction(&self, tape: &Tape<'_, T>, built: &Built) -> Result<Prediction<T>> {
        let z = tape.value(built.logits).data();
        let p = softmax(z)?;
        let vals = |n: Option<NodeId>| n.map(|n| tape.value(n).data().to_vec());
        let alpha_t = built.alpha_t.map(|a| match a {
            Some(n) => tape.value(n).data().to_vec(),
            None => vec![T::zero(); self.schema.seq_len],
        });
        let slots = if built.alpha_g.is_some() {
            built.slots.iter().map(|s| s.0).collect()
        } else {
            Vec::new()
        };
        Ok(Prediction {
            logits: [z[0], z[1]],
            p_click: p[1],
            attention: AttentionRecord {
                alpha_t,
                alpha_u: vals(built.alpha_u),
                alpha_c: vals(built.alpha_c),
                alpha_g: vals(built.alpha_g),
                slots,
            },
        })
    }

    /// Evaluation-mode forward pass.
    pub fn predict(&self, raw: &RawInstance) -> Result<Prediction<T>> {
        self.predict_with(&self.params, raw)
    }

    pub fn predict_with(&self, store: &ParamStore<T>, raw: &RawInstance) -> Result<Prediction<T>> {
        let mut tape = Tape::new(store);
        let built = self.build(&mut tape, raw, None)?;
        self.prediction(&tape, &built)
    }

    /// Evaluation-mode forward pass keeping every intermediate representation.
    pub fn trace(&self, raw: &RawInstance) -> Result<Trace<T>> {
        let mut tape = Tape::new(&self.params);
        let built = self.build(&mut tape, raw, None)?;
        let vals = |n: Option<NodeId>| n.map(|n| tape.value(n).data().to_vec());
        Ok(Trace {
            embedded: built.emb.to_values(&tape),
            h_b: built.h_b.map(|n| tape.value(n).clone()),
            r_ibim: vals(built.r_ibim),
            r_iuim: vals(built.r_iuim),
            r_icim: vals(built.r_icim),
            slots: built.slots.iter().map(|&(s, n)| (s, tape.value(n).data().to_vec())).collect(),
            r_g: vals(built.r_g),
            mlp_input: tape.value(built.mlp_input).data().to_vec(),
            prediction: self.prediction(&tape, &built)?,
        })
    }

    /// `l2_coeff * sum ||W||^2` over weight matrices of `store`.
    pub fn penalty(&self, store: &ParamStore<T>) -> T {
        let c = lit::<T>(self.config.l2_coeff);
        store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(_, p)| c * p.value.sum_squares())
            .sum()
    }

    /// Mean cross-entropy plus penalty, evaluation mode, at parameters `store`.
    pub fn batch_loss_with(&self, store: &ParamStore<T>, batch: &[&RawInstance]) -> Result<BatchLoss<T>> {
        Ok(self.batch_loss_and_signature(store, batch)?.0)
    }

    /// [`Self::batch_loss_with`] plus the combined ReLU signature of the batch.
    pub fn batch_loss_and_signature(
        &self,
        store: &ParamStore<T>,
        batch: &[&RawInstance],
    ) -> Result<(BatchLoss<T>, u64)> {
        if batch.is_empty() {
            return Err(MianError::Empty("batch"));
        }
        let mut total = T::zero();
        let mut signature = 0u64;
        for raw in batch {
            let mut tape = Tape::new(store);
            let built = self.build(&mut tape, raw, None)?;
            let loss = tape.softmax_xent(built.logits, raw.label as usize)?;
            total += tape.value(loss).data()[0];
            signature = signature.rotate_left(7) ^ tape.relu_signature();
        }
        let loss = BatchLoss {
            data: total / lit(batch.len() as f64),
            penalty: self.penalty(store),
        };
        Ok((loss, signature))
    }

    pub fn batch_loss(&self, batch: &[&RawInstance]) -> Result<BatchLoss<T>> {
        self.batch_loss_with(&self.params, batch)
    }

    /// Adds the gradient of the batch objective (mean loss plus penalty) to
    /// `grads`. Dropout is active when an RNG is supplied. Instances are
    /// reduced in batch order.
    pub fn accumulate_gradients(
        &self,
        batch: &[&RawInstance],
        grads: &mut ParamGrads<T>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchLoss<T>> {
        if batch.is_empty() {
            return Err(MianError::Empty("batch"));
        }
        let seed = lit::<T>(1.0 / batch.len() as f64);
        let mut total = T::zero();
        for raw in batch {
            let mut tape = Tape::new(&self.params);
            let built = self.build(&mut tape, raw, dropout.as_deref_mut())?;
            let loss = tape.softmax_xent(built.logits, raw.label as usize)?;
            total += tape.value(loss).data()[0];
            tape.backward_into(loss, seed, grads);
        }
        let two_c = lit::<T>(2.0 * self.config.l2_coeff);
        for (id, p) in self.params.iter() {
            if p.kind == ParamKind::Weight {
                grads.get_mut(id).axpy(two_c, &p.value);
            }
        }
        Ok(BatchLoss {
            data: total / lit(batch.len() as f64),
            penalty: self.penalty(&self.params),
        })
    }
}
