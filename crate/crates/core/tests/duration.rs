use proptest::prelude::*;
use signstitch_core::duration::*;
use signstitch_core::motion::MotionSequence;

fn pred(s: f64, w: &[f64]) -> DurationPrediction {
    DurationPrediction { s, w: w.to_vec() }
}

#[test]
fn target_scale_examples() {
    assert_eq!(target_scale(50, 50).unwrap(), 0.0);
    assert!((target_scale(100, 50).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
    let t = 1000;
    let et = (std::f64::consts::E * t as f64).round() as usize;
    assert!((target_scale(et, t).unwrap() + 1.0).abs() < 1e-3);
    assert!(target_scale(0, 5).is_err());
}

#[test]
fn allocation_examples() {
    let w = target_allocation(&[(0, 9), (20, 29)], None).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
    let w = target_allocation(&[(0, 9), (10, 39)], None).unwrap();
    assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
    assert_eq!(target_allocation(&[(3, 8)], None).unwrap(), vec![1.0]);
    assert!(target_allocation(&[(0, 9), (5, 12)], None).is_err());
}

#[test]
fn pinball_examples() {
    assert_eq!(pinball_loss(0.0, 0.55), 0.0);
    assert!((pinball_loss(2.0, 0.55) - 1.1).abs() < 1e-12);
    assert!((pinball_loss(-2.0, 0.55) - 0.9).abs() < 1e-12);
}

#[test]
fn duration_loss_examples() {
    let w = [0.3, 0.7];
    let h = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
    assert!((duration_loss(&pred(0.2, &w), 0.2, &w, 0.55, 1.0).unwrap() - h).abs() < 1e-12);
    let ce = duration_loss(&pred(0.0, &[0.5, 0.5]), 0.0, &[1.0, 0.0], 0.55, 1.0).unwrap();
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    let clamped = duration_loss(&pred(0.0, &[0.0, 1.0]), 0.0, &[1.0, 0.0], 0.55, 1.0).unwrap();
    assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-9);
}

#[test]
fn integer_plan_examples() {
    assert_eq!(
        integer_plan(10, &pred(0.0, &[0.5, 0.5]), 4)
            .unwrap()
            .lengths,
        vec![5, 5]
    );
    assert_eq!(
        integer_plan(10, &pred(0.0, &[0.34, 0.33, 0.33]), 1)
            .unwrap()
            .lengths,
        vec![4, 3, 3]
    );
    assert_eq!(
        integer_plan(20, &pred(0.0, &[0.98, 0.02]), 4)
            .unwrap()
            .lengths,
        vec![16, 4]
    );
    // Totals below K·min_len are raised.
    let p = integer_plan(5, &pred(0.0, &[0.5, 0.5]), 4).unwrap();
    assert_eq!((p.total, p.lengths), (8, vec![4, 4]));
}

#[test]
fn features_have_the_declared_width() {
    let a = MotionSequence::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.2], vec![1.0, 0.0]]).unwrap();
    let b = MotionSequence::from_rows(&[vec![2.0, 1.0], vec![0.0, 0.0]]).unwrap();
    assert_eq!(
        gloss_pair_features(&a, &b).unwrap().len(),
        pair_feature_dim(2)
    );
    let toks = sentence_token_features(&[&a, &b, &a]).unwrap();
    assert_eq!(toks.len(), 3);
    assert!(toks.iter().all(|t| t.len() == token_feature_dim(2)));
}

fn toy_pair(seed: usize) -> DurationInput {
    let rows: Vec<Vec<f64>> = (0..6 + seed % 5)
        .map(|i| vec![(i as f64 * 0.3 + seed as f64).sin(), 0.1 * i as f64])
        .collect();
    let a = MotionSequence::from_rows(&rows).unwrap();
    let b = a.reversed();
    DurationInput::Pair(gloss_pair_features(&a, &b).unwrap())
}

fn small(which: Which) -> DurationConfig {
    let base = match which {
        Which::Gloss => DurationConfig::gloss(),
        Which::Sentence => DurationConfig::sentence(),
    };
    DurationConfig {
        hidden: 32,
        layers: 2,
        ffn: 64,
        batch_size: 1,
        ..base
    }
}

#[test]
fn fresh_pair_model_predicts_identity_and_uniform_split() {
    let m = DurationModel::new(small(Which::Gloss), pair_feature_dim(2));
    for s in 0..5 {
        let p = m.predict(&toy_pair(s)).unwrap();
        assert!(p.s.abs() < 1e-3);
        assert!((p.w[0] - 0.5).abs() < 1e-3 && (p.w[1] - 0.5).abs() < 1e-3);
    }
}

#[test]
fn fresh_sentence_model_is_uniform() {
    let m = DurationModel::new(small(Which::Sentence), token_feature_dim(2));
    let a = MotionSequence::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.2], vec![1.0, 0.0]]).unwrap();
    let toks = sentence_token_features(&[&a, &a.reversed(), &a]).unwrap();
    let p = m.predict(&DurationInput::Tokens(toks)).unwrap();
    assert!(p.s.abs() < 1e-3);
    assert!(p.w.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-3));
}

#[test]
fn pair_model_overfits_one_sample() {
    let sample = DurationSample {
        input: toy_pair(1),
        s: -0.3,
        w: vec![0.4, 0.6],
    };
    let mut m = DurationModel::new(
        DurationConfig {
            epochs: 1500,
            lr: 3e-3,
            ..small(Which::Gloss)
        },
        pair_feature_dim(2),
    );
    let report = m.train(std::slice::from_ref(&sample)).unwrap();
    assert!(report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap());
    let p = m.predict(&sample.input).unwrap();
    assert!((p.s + 0.3).abs() < 0.02, "s = {}", p.s);
    assert!((p.w[0] - 0.4).abs() < 0.02, "w = {:?}", p.w);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let samples: Vec<DurationSample> = (0..8)
        .map(|i| DurationSample {
            input: toy_pair(i),
            s: 0.1 * i as f64 - 0.3,
            w: vec![0.5, 0.5],
        })
        .collect();
    let mut m = DurationModel::new(
        DurationConfig {
            epochs: 3,
            ..small(Which::Gloss)
        },
        pair_feature_dim(2),
    );
    m.train(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dgloss.nkcp");
    m.save(&path).unwrap();
    let back = DurationModel::load(&path).unwrap();
    for s in &samples {
        assert_eq!(
            m.predict(&s.input).unwrap(),
            back.predict(&s.input).unwrap()
        );
    }
}

#[test]
fn training_is_deterministic() {
    let samples: Vec<DurationSample> = (0..6)
        .map(|i| DurationSample {
            input: toy_pair(i),
            s: 0.05 * i as f64,
            w: vec![0.3, 0.7],
        })
        .collect();
    let run = || {
        let mut m = DurationModel::new(
            DurationConfig {
                epochs: 4,
                batch_size: 3,
                dropout: 0.1,
                ..small(Which::Gloss)
            },
            pair_feature_dim(2),
        );
        m.train(&samples).unwrap();
        m.predict(&samples[0].input).unwrap()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn integer_plan_sums_and_respects_min_len(
        t_src in 1usize..400,
        s in -3.0f64..3.0,
        raw in prop::collection::vec(0.0f64..1.0, 1..8),
        min_len in 1usize..6,
    ) {
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let w: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / total).collect();
        let p = integer_plan(t_src, &pred(s, &w), min_len).unwrap();
        prop_assert_eq!(p.lengths.iter().sum::<usize>(), p.total);
        prop_assert!(p.lengths.iter().all(|&l| l >= min_len));
        let expect = ((t_src as f64 * s.exp()).round() as usize).max(w.len() * min_len);
        prop_assert_eq!(p.total, expect);
    }

    #[test]
    fn pinball_is_nonnegative(u in -10.0f64..10.0, tau in 0.01f64..0.99) {
        prop_assert!(pinball_loss(u, tau) >= 0.0);
    }
}
