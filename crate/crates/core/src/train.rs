//! Adam and the minibatch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::RawInstance;
use crate::embedding::Schema;
use crate::error::{MianError, Result};
use crate::metrics::MetricsReport;
use crate::model::MianModel;
use crate::numerics::{ParamGrads, ParamStore};
use crate::scalar::{lit, Scalar};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// First and second moments per tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamGrads<T>,
    pub v: ParamGrads<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    config: &ModelConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(MianError::ShapeMismatch {
            op: "adam_step",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    for id in params.ids() {
        let (p, g) = (params.value(id), grads.get(id));
        if p.shape() != g.shape() || state.m.get(id).shape() != p.shape() || state.v.get(id).shape() != p.shape() {
            return Err(MianError::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    if !grads.is_finite() {
        return Err(MianError::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let lr = lit::<T>(config.learning_rate);
    let eps = lit::<T>(config.adam_eps);
    let (b1t, b2t) = (lit::<T>(b1), lit::<T>(b2));
    let c1 = lit::<T>(1.0 - b1.powi(t));
    let c2 = lit::<T>(1.0 - b2.powi(t));
    let one = T::one();
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id).data();
        let m = state.m.get_mut(id).data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1t * *mi + (one - b1t) * gi;
        }
        let v = state.v.get_mut(id).data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2t * *vi + (one - b2t) * gi * gi;
        }
        let (m, v) = (state.m.get(id).data(), state.v.get(id).data());
        for ((p, &mi), &vi) in params.value_mut(id).data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches, dropout active.
    pub train_loss: f64,
    /// Mean L2 penalty over the epoch's batches.
    pub train_penalty: f64,
    /// Held-out metrics after the epoch; `None` without a held-out set.
    pub test: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn final_test(&self) -> Option<&MetricsReport> {
        self.epochs.last().and_then(|e| e.test.as_ref())
    }

    /// Tab-separated, one header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\ttrain_penalty\ttest_auc\ttest_logloss\n");
        for e in &self.epochs {
            let (auc, ll) = match &e.test {
                Some(m) => (
                    m.auc.map_or_else(|| "NA".to_string(), |a| a.to_string()),
                    m.logloss.to_string(),
                ),
                None => ("NA".to_string(), "NA".to_string()),
            };
            s.push_str(&format!("{}\t{}\t{}\t{auc}\t{ll}\n", e.epoch, e.train_loss, e.train_penalty));
        }
        s
    }
}

/// Evaluation-mode click probabilities and labels.
pub fn predict_all<T: Scalar>(model: &MianModel<T>, instances: &[RawInstance]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut probs = Vec::with_capacity(instances.len());
    for raw in instances {
        probs.push(model.predict(raw)?.p_click.to_f64_lossy());
    }
    Ok((probs, instances.iter().map(|r| r.label).collect()))
}

pub fn evaluate<T: Scalar>(model: &MianModel<T>, instances: &[RawInstance]) -> Result<MetricsReport> {
    let (p, y) = predict_all(model, instances)?;
    MetricsReport::from_predictions(&p, &y)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Runs `config.epochs` epochs of shuffled minibatch Adam on `model`,
/// continuing from `adam`. Held-out metrics are computed after every epoch
/// when `test` is nonempty.
///
/// Shuffling and dropout draw from their own streams of `config.seed`; the
/// epoch index, counted from zero on every call, is folded into the shuffle.
pub fn train_epochs<T: Scalar>(
    model: &mut MianModel<T>,
    adam: &mut AdamState<T>,
    train: &[RawInstance],
    test: &[RawInstance],
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(MianError::Empty("training set"));
    }
    for raw in train.iter().chain(test) {
        raw.validate(&model.schema)?;
    }
    let config = model.config.clone();
    let mut dropout_rng = rng(config.seed, DROPOUT_STREAM);
    let mut grads = model.params.zero_grads();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), SHUFFLE_STREAM));
        let (mut loss_sum, mut penalty_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&RawInstance> = chunk.iter().map(|&i| &train[i]).collect();
            grads.zero();
            let drop = (config.dropout > 0.0).then_some(&mut dropout_rng);
            let diverged = MianError::Diverged { epoch, batch: b };
            let loss = match model.accumulate_gradients(&batch, &mut grads, drop) {
                Ok(l) => l,
                Err(MianError::NonFinite(_)) => return Err(diverged),
                Err(e) => return Err(e),
            };
            let (l, pen) = (loss.data.to_f64_lossy(), loss.penalty.to_f64_lossy());
            if !l.is_finite() || !pen.is_finite() || !grads.is_finite() {
                return Err(diverged);
            }
            adam_step(&mut model.params, &grads, adam, &config)?;
            loss_sum += l * batch.len() as f64;
            penalty_sum += pen;
            batches += 1;
        }
        let test_report = if test.is_empty() { None } else { Some(evaluate(model, test)?) };
        report.epochs.push(EpochReport {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_penalty: penalty_sum / batches as f64,
            test: test_report,
        });
    }
    Ok(report)
}

/// Builds a fresh model from `config` and trains it.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    schema: &Schema,
    train: &[RawInstance],
    test: &[RawInstance],
) -> Result<(MianModel<T>, AdamState<T>, TrainReport)> {
    let mut model = MianModel::new(config.clone(), schema.clone())?;
    let mut adam = AdamState::new(&model.params);
    let report = train_epochs(&mut model, &mut adam, train, test)?;
    Ok((model, adam, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DenseMatrix, ParamKind};

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", ParamKind::Weight, DenseMatrix::row_vector(vec![value]));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = ModelConfig::default();
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let mut g = p.zero_grads();
        let id = p.ids().next().unwrap();
        g.get_mut(id).data_mut()[0] = 0.37;
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let moved = 1.0 - p.value(id).data()[0];
        // 0.37 / (0.37 + eps) of the learning rate
        assert!((moved - cfg.learning_rate * 0.37 / (0.37 + 1e-8)).abs() < 1e-15, "{moved}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let cfg = ModelConfig::default();
        let mut p = single(2.0);
        let id = p.ids().next().unwrap();
        let mut st = AdamState::new(&p);
        st.m.get_mut(id).data_mut()[0] = 0.5;
        st.v.get_mut(id).data_mut()[0] = 0.25;
        st.step = 10;
        let g = p.zero_grads();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((st.m.get(id).data()[0] - 0.45).abs() < 1e-15);
        assert!((st.v.get(id).data()[0] - 0.24975).abs() < 1e-15);

        let mut fresh = single(2.0);
        let mut st = AdamState::new(&fresh);
        for _ in 0..5 {
            adam_step(&mut fresh, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(fresh.value(id).data()[0], 2.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = ModelConfig::default();
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let other = single(1.0);
        let mut q = ParamStore::<f64>::new();
        q.add("y", ParamKind::Weight, DenseMatrix::zeros(2, 2));
        assert!(adam_step(&mut p, &q.zero_grads(), &mut st, &cfg).is_err());
        assert!(adam_step(&mut p, &other.zero_grads(), &mut st, &cfg).is_ok());
    }
}
