use mian::data::generate;
use mian::metrics::{auc, logloss, MetricsReport};
use mian::train::{evaluate, predict_all};
use mian::{Model, ModelConfig, RawInstance, SynthConfig, Variant};
use proptest::prelude::*;

/// Fraction of positive-negative pairs ordered correctly, ties counting half.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rank_auc_equals_pairwise_count(
        data in prop::collection::vec((0u8..12, any::<bool>()), 2..=200),
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s) / 4.0).collect();
        let labels: Vec<u8> = data.iter().map(|&(_, y)| u8::from(y)).collect();
        let both = labels.contains(&0) && labels.contains(&1);
        match auc(&scores, &labels) {
            Ok(a) => prop_assert_eq!(a, pairwise_auc(&scores, &labels)),
            Err(_) => prop_assert!(!both),
        }
    }
}

#[test]
fn worked_example() {
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
}

#[test]
fn heldout_logloss_equals_the_training_objective() {
    let (schema, rows) = generate(&SynthConfig {
        n_instances: 200,
        seq_len: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    for v in [Variant::Full, Variant::LrBaseline] {
        let m = Model::new(
            ModelConfig {
                seq_len: 10,
                variant: v,
                init_stddev: 0.3,
                ..ModelConfig::default()
            },
            schema.clone(),
        )
        .unwrap();
        let batch: Vec<&RawInstance> = rows.iter().collect();
        let objective = m.batch_loss(&batch).unwrap().data;
        let report = evaluate(&m, &rows).unwrap();
        assert!((report.logloss - objective).abs() < 1e-12, "{v}");
        let (p, y) = predict_all(&m, &rows).unwrap();
        assert_eq!(logloss(&p, &y).unwrap(), report.logloss);
        assert_eq!(report.n_pos + report.n_neg, rows.len());
    }
}

#[test]
fn report_without_both_classes_has_no_auc() {
    let r = MetricsReport::from_predictions(&[0.2, 0.7], &[1, 1]).unwrap();
    assert!(r.auc.is_none());
    assert!(r.to_tsv().starts_with("auc\tlogloss\tn_pos\tn_neg\tepoch_loss\nNA\t"));
}
