//! End-to-end gradient verification of a model on a batch.

use crate::data::RawInstance;
use crate::error::Result;
use crate::init::Initializer;
use crate::model::MianModel;
use crate::numerics::{check_piecewise, GradCheckConfig, GradCheckReport, ParamKind};
use crate::scalar::{lit, Scalar};

/// Redraws every parameter at a larger scale: weights and embeddings with
/// standard deviation `scale`, biases around zero and gains around one with
/// half that. At the small training initialization most gradients sit near
/// the finite-difference noise floor, which makes relative errors meaningless.
pub fn move_to_probe_point<T: Scalar>(model: &mut MianModel<T>, seed: u64, scale: f64) {
    let wide = Initializer { seed, stddev: scale };
    let narrow = Initializer {
        seed,
        stddev: scale / 2.0,
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let p = model.params.get(id);
        let (r, c) = p.value.shape();
        let path = p.path.clone();
        let value = match p.kind {
            ParamKind::Weight | ParamKind::Embedding => wide.value(ParamKind::Weight, r, c, &path),
            ParamKind::Bias => narrow.value(ParamKind::Weight, r, c, &path),
            ParamKind::Gain => narrow
                .value::<T>(ParamKind::Weight, r, c, &path)
                .map(|v| v + lit::<T>(1.0)),
        };
        *model.params.value_mut(id) = value;
    }
}

/// Compares the reverse-mode gradient of the batch objective (mean
/// cross-entropy plus L2 penalty, dropout off) with central differences.
/// Coordinates whose stencil flips a ReLU are skipped and counted.
pub fn check_model_gradients<T: Scalar>(
    model: &MianModel<T>,
    batch: &[RawInstance],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let refs: Vec<&RawInstance> = batch.iter().collect();
    let mut grads = model.params.zero_grads();
    model.accumulate_gradients(&refs, &mut grads, None)?;
    check_piecewise(
        &model.params,
        &grads,
        |store| {
            let (loss, piece) = model.batch_loss_and_signature(store, &refs)?;
            Ok((loss.total(), piece))
        },
        config,
    )
}

/// Settings of a self-contained gradient check on synthetic data.
#[derive(Clone, Debug)]
pub struct ProbeSettings {
    /// Instances of the default synthetic generator forming the batch.
    pub instances: usize,
    /// Parameter scale of the probe point.
    pub scale: f64,
    pub check: GradCheckConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            instances: 4,
            scale: 0.3,
            check: GradCheckConfig::default(),
        }
    }
}

/// Builds the model `config` describes over the default synthetic schema,
/// moves it to the probe point and checks its gradients in double precision
/// on the first `settings.instances` generated instances.
pub fn gradcheck_synthetic(config: &crate::config::ModelConfig, settings: &ProbeSettings) -> Result<GradCheckReport> {
    let synth = crate::data::SynthConfig {
        n_instances: settings.instances.max(1),
        seq_len: config.seq_len,
        seed: config.seed,
        ..crate::data::SynthConfig::default()
    };
    let (schema, batch) = crate::data::generate(&synth)?;
    let mut model = MianModel::<f64>::new(config.clone(), schema)?;
    move_to_probe_point(&mut model, config.seed, settings.scale);
    check_model_gradients(&model, &batch, &settings.check)
}
