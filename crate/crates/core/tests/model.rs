mod common;

use common::*;
use mian::check::{check_model_gradients, gradcheck_synthetic, move_to_probe_point, ProbeSettings};
use mian::data::synth::generate;
use mian::embedding::{embed_field, embed_instance, FieldEmbedding};
use mian::numerics::{sigmoid, ParamKind};
use mian::train::{adam_step, train, train_epochs, AdamState};
use mian::{checkpoint, FieldValue, MianError, Model, ModelConfig, RawInstance, Schema, SynthConfig, Variant};
use rand::Rng;

const T: usize = 8;

fn small_data(n: usize, seed: u64) -> (Schema, Vec<RawInstance>) {
    generate(&SynthConfig {
        n_instances: n,
        n_items: 100,
        n_categories: 10,
        seq_len: T,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        seq_len: T,
        variant,
        ..ModelConfig::default()
    }
}

fn model(variant: Variant, schema: &Schema) -> Model {
    Model::new(config(variant), schema.clone()).unwrap()
}

fn probe(variant: Variant, schema: &Schema, seed: u64) -> Model {
    let mut m = model(variant, schema);
    move_to_probe_point(&mut m, seed, 0.3);
    m
}

#[test]
fn zero_output_predicts_one_half() {
    let (schema, data) = small_data(20, 1);
    for v in Variant::ALL {
        let mut m = probe(v, &schema, 1);
        m.zero_output();
        for raw in &data {
            assert_eq!(m.predict(raw).unwrap().p_click, 0.5, "{v}");
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_strictly_inside_the_unit_interval() {
    let (schema, data) = small_data(30, 2);
    for v in Variant::ALL {
        let m = probe(v, &schema, 2);
        for raw in &data {
            let a = m.predict(raw).unwrap();
            let b = m.predict(raw).unwrap();
            assert_eq!(a, b);
            assert!(a.p_click > 0.0 && a.p_click < 1.0);
            let z = a.logits;
            assert!((a.p_click - sigmoid(z[1] - z[0])).abs() < 1e-12);
        }
    }
}

#[test]
fn longer_window_with_padding_leaves_predictions_unchanged() {
    let (schema, data) = small_data(40, 3);
    let wide_schema = Schema {
        seq_len: T + 7,
        ..schema.clone()
    };
    for v in [Variant::Full, Variant::PostLn, Variant::NoTransformer, Variant::MlpBaseline, Variant::LrBaseline] {
        let m = probe(v, &schema, 3);
        let mut wide = Model::new(
            ModelConfig {
                seq_len: T + 7,
                ..m.config.clone()
            },
            wide_schema.clone(),
        )
        .unwrap();
        wide.params = m.params.clone();
        for raw in &data {
            let a = m.predict(raw).unwrap();
            let b = wide.predict(raw).unwrap();
            assert!((a.p_click - b.p_click).abs() < 1e-10, "{v}");
        }
    }
}

#[test]
fn exported_weights_reconstruct_every_representation() {
    let (schema, data) = small_data(40, 4);
    let m = probe(Variant::Full, &schema, 4);
    let d = m.config.d;
    for raw in &data {
        let tr = m.trace(raw).unwrap();
        let att = &tr.prediction.attention;
        let e = &tr.embedded;

        let alpha_t = att.alpha_t.as_ref().unwrap();
        let r_ibim = tr.r_ibim.as_ref().unwrap();
        assert_eq!(&r_ibim[..d], e.e_i.as_slice());
        match &tr.h_b {
            Some(h) => {
                let pooled: Vec<f64> = (0..d).map(|c| (0..T).map(|t| alpha_t[t] * h.get(t, c)).sum()).collect();
                assert!(max_abs_diff(&r_ibim[d..], &pooled) < 1e-12);
                assert!((alpha_t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            None => {
                assert!(raw.behaviors.is_empty());
                assert!(alpha_t.iter().all(|&a| a == 0.0));
                assert!(r_ibim[d..].iter().all(|&v| v == 0.0));
            }
        }
        for t in raw.behaviors.len()..T {
            assert_eq!(alpha_t[t], 0.0);
        }

        for (alpha, rows, rep) in [
            (&att.alpha_u, &e.e_u, &tr.r_iuim),
            (&att.alpha_c, &e.e_c, &tr.r_icim),
        ] {
            let (alpha, rep) = (alpha.as_ref().unwrap(), rep.as_ref().unwrap());
            let pooled: Vec<f64> = (0..d).map(|c| (0..rows.rows()).map(|j| alpha[j] * rows.get(j, c)).sum()).collect();
            assert!(max_abs_diff(&rep[d..], &pooled) < 1e-12);
        }

        let alpha_g = att.alpha_g.as_ref().unwrap();
        let r_g: Vec<f64> = (0..d)
            .map(|c| tr.slots.iter().zip(alpha_g).map(|((_, s), a)| a * s[c]).sum())
            .collect();
        assert!(max_abs_diff(tr.r_g.as_ref().unwrap(), &r_g) < 1e-9);
        assert_eq!(tr.r_g.as_ref().unwrap(), &tr.mlp_input);
    }
}

#[test]
fn disabled_modules_leave_no_record_or_slot() {
    let (schema, data) = small_data(5, 5);
    let m = probe(Variant::NoIuimIcim, &schema, 5);
    let p = m.predict(&data[0]).unwrap();
    assert!(p.attention.alpha_u.is_none() && p.attention.alpha_c.is_none());
    assert_eq!(p.attention.alpha_g.as_ref().unwrap().len(), 5);
    let m = probe(Variant::NoIbim, &schema, 5);
    let p = m.predict(&data[0]).unwrap();
    assert!(p.attention.alpha_t.is_none());
    assert!(m.params.iter().all(|(_, q)| !q.path.starts_with("ibim")));
    let m = probe(Variant::NoGim, &schema, 5);
    assert!(m.predict(&data[0]).unwrap().attention.alpha_g.is_none());
}

#[test]
fn shared_and_numerical_embeddings() {
    let (schema, data) = small_data(10, 6);
    let m = probe(Variant::Full, &schema, 6);
    let tables = &m.layout.embedding;
    assert_eq!(tables.behavior[0], tables.item[0]);
    let FieldEmbedding::Affine { w, b } = tables.user[schema.user.len() - 1] else {
        panic!("numerical user field must be affine");
    };
    let field = &schema.user[schema.user.len() - 1];
    let got = embed_field(field, FieldValue::Num(0.7), tables, &m.params).unwrap();
    let want: Vec<f64> = (0..m.config.d)
        .map(|c| 0.7 * m.params.value(w).data()[c] + m.params.value(b).data()[c])
        .collect();
    assert!(max_abs_diff(&got, &want) < 1e-15);
    for raw in &data {
        let e = embed_instance(raw, &schema, tables, &m.params).unwrap();
        assert_eq!(e.e_b.shape(), (T, m.config.d));
        for t in raw.behaviors.len()..T {
            assert!(e.e_b.row(t).iter().all(|&v| v == 0.0));
            assert!(!e.behavior_mask[t]);
        }
    }
    let mut bad = data[0].clone();
    bad.item[0] = FieldValue::Cat(100);
    assert!(matches!(m.predict(&bad), Err(MianError::OutOfVocabulary { .. })));
}

#[test]
fn every_variant_passes_the_gradient_check() {
    for v in Variant::ALL {
        let report = gradcheck_synthetic(&ModelConfig { variant: v, ..ModelConfig::default() }, &ProbeSettings::default()).unwrap();
        let worst = report.worst().unwrap();
        assert!(report.passed(), "{v}: {} rel {:.3e}", worst.path, worst.max_rel_error);
        // Kink-straddling coordinates are excluded; most must still be checked.
        assert!(report.skipped() * 4 < report.checked(), "{v}: {} of {}", report.skipped(), report.checked());
    }
}

#[test]
fn gradient_check_detects_a_wrong_gradient() {
    let (schema, data) = small_data(3, 7);
    let m = probe(Variant::NoTransformer, &schema, 7);
    let cfg = ProbeSettings::default().check;
    assert!(check_model_gradients(&m, &data, &cfg).unwrap().passed());
    let refs: Vec<&RawInstance> = data.iter().collect();
    let mut grads = m.params.zero_grads();
    m.accumulate_gradients(&refs, &mut grads, None).unwrap();
    let id = m.params.id("output.b").unwrap();
    grads.get_mut(id).data_mut()[1] *= 1.01;
    let report = mian::numerics::check_params(&m.params, &grads, |s| Ok(m.batch_loss_with(s, &refs)?.total()), &cfg).unwrap();
    let out = report.tensors.iter().find(|t| t.path == "output.b").unwrap();
    assert!(out.max_rel_error > cfg.tolerance, "{}", out.max_rel_error);
    assert!(!report.passed());
}

#[test]
fn untouched_embedding_rows_stay_put_after_a_step() {
    let (schema, data) = small_data(16, 8);
    let mut m = model(Variant::Full, &schema);
    let batch: Vec<&RawInstance> = data.iter().collect();
    let mut used = std::collections::HashSet::new();
    for raw in &data {
        used.insert(raw.item[0].as_cat().unwrap());
        for s in &raw.behaviors {
            used.insert(s[0].as_cat().unwrap());
        }
    }
    let table = m.params.id("embedding.item.item_id").unwrap();
    let before = m.params.value(table).clone();
    let mut grads = m.params.zero_grads();
    m.accumulate_gradients(&batch, &mut grads, None).unwrap();
    let mut adam = AdamState::new(&m.params);
    adam_step(&mut m.params, &grads, &mut adam, &m.config).unwrap();
    let after = m.params.value(table);
    for r in 0..before.rows() {
        if used.contains(&r) {
            assert_ne!(after.row(r), before.row(r));
        } else {
            assert_eq!(after.row(r), before.row(r));
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (schema, data) = small_data(60, 9);
    let cfg = ModelConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 16,
        ..config(Variant::Full)
    };
    let fresh = Model::new(cfg.clone(), schema.clone()).unwrap();
    let (trained, adam, _) = train::<f64>(&cfg, &schema, &data, &[]).unwrap();
    assert_eq!(trained.params, fresh.params);
    assert_eq!(adam.step, 8);
}

#[test]
fn full_batch_loss_decreases_for_ten_steps() {
    let (schema, data) = small_data(64, 10);
    for v in [Variant::Full, Variant::PostLn, Variant::LrBaseline] {
        let mut m = Model::new(
            ModelConfig {
                dropout: 0.0,
                ..config(v)
            },
            schema.clone(),
        )
        .unwrap();
        let batch: Vec<&RawInstance> = data.iter().collect();
        let mut adam = AdamState::new(&m.params);
        let mut prev = m.batch_loss(&batch).unwrap().total();
        for step in 0..10 {
            let mut grads = m.params.zero_grads();
            m.accumulate_gradients(&batch, &mut grads, None).unwrap();
            adam_step(&mut m.params, &grads, &mut adam, &m.config).unwrap();
            let now = m.batch_loss(&batch).unwrap().total();
            assert!(now < prev, "{v} step {step}: {now} >= {prev}");
            prev = now;
        }
    }
}

#[test]
fn adam_under_constant_gradient_moves_by_the_learning_rate() {
    let cfg = ModelConfig::default();
    let mut p = mian::Params::new();
    let id = p.add("x", ParamKind::Weight, mian::Matrix::row_vector(vec![0.0, 0.0, 0.0]));
    let g_vals = [0.37, -2.5, 1e-3];
    let mut g = p.zero_grads();
    g.get_mut(id).data_mut().copy_from_slice(&g_vals);
    let mut st = AdamState::new(&p);
    // Independent recurrence of the bias-corrected moments.
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for t in 1..=200 {
        let before = p.value(id).data().to_vec();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for k in 0..3 {
            m[k] = 0.9 * m[k] + 0.1 * g_vals[k];
            v[k] = 0.999 * v[k] + 0.001 * g_vals[k] * g_vals[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.999f64.powi(t));
            let want = -1e-3 * mh / (vh.sqrt() + 1e-8);
            let moved = p.value(id).data()[k] - before[k];
            assert!((moved - want).abs() < 1e-15);
            assert!((moved + 1e-3 * g_vals[k].signum()).abs() < 1e-7);
        }
    }
}

#[test]
fn training_is_reproducible_and_seed_dependent() {
    let (schema, data) = small_data(120, 11);
    let (tr, te) = mian::data::holdout_split(&data, 0.2);
    let cfg = ModelConfig {
        epochs: 2,
        batch_size: 16,
        ..config(Variant::Full)
    };
    let (m1, _, r1) = train::<f64>(&cfg, &schema, tr, te).unwrap();
    let (m2, _, r2) = train::<f64>(&cfg, &schema, tr, te).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(m1.params, m2.params);
    let (_, _, r3) = train::<f64>(&ModelConfig { seed: 1, ..cfg }, &schema, tr, te).unwrap();
    assert_ne!(r1.loss_curve(), r3.loss_curve());
}

#[test]
fn nan_parameters_abort_with_the_batch_index() {
    let (schema, data) = small_data(40, 12);
    let mut m = model(Variant::Full, &schema);
    let w = m.params.id("output.w").unwrap();
    m.params.value_mut(w).data_mut()[0] = f64::NAN;
    let mut adam = AdamState::new(&m.params);
    let err = train_epochs(&mut m, &mut adam, &data, &[]).unwrap_err();
    assert!(matches!(err, MianError::Diverged { epoch: 0, batch: 0 }), "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions_and_optimizer() {
    let (schema, data) = small_data(50, 13);
    let cfg = ModelConfig {
        epochs: 1,
        batch_size: 16,
        ..config(Variant::Full)
    };
    let (m, adam, _) = train::<f64>(&cfg, &schema, &data, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &m, &adam).unwrap();
    let (back, adam_back) = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.config, m.config);
    assert_eq!(adam_back, adam);
    for raw in &data {
        assert_eq!(back.predict(raw).unwrap(), m.predict(raw).unwrap());
    }
    let (other, _) = small_data(1, 1);
    let mismatched = Schema {
        user: other.user[..2].to_vec(),
        ..other
    };
    assert!(checkpoint::ensure_schema(&back, &mismatched).is_err());
}

#[test]
fn dropout_only_acts_in_training() {
    let (schema, data) = small_data(8, 14);
    let m = probe(Variant::Full, &schema, 14);
    let batch: Vec<&RawInstance> = data.iter().collect();
    let mut plain = m.params.zero_grads();
    m.accumulate_gradients(&batch, &mut plain, None).unwrap();
    let mut dropped = m.params.zero_grads();
    let mut r = rng(3);
    let _: u8 = r.random();
    m.accumulate_gradients(&batch, &mut dropped, Some(&mut r)).unwrap();
    let id = m.params.id("mlp.0.w").unwrap();
    assert_ne!(plain.get(id), dropped.get(id));
    assert_eq!(m.predict(&data[0]).unwrap(), m.predict(&data[0]).unwrap());
}
