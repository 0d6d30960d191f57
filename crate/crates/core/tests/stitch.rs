use proptest::prelude::*;
use signstitch_core::duration::GlossPlan;
use signstitch_core::motion::MotionSequence;
use signstitch_core::stitch::*;

fn constant(t: usize, v: f64) -> MotionSequence {
    MotionSequence::from_rows(&vec![vec![v, -v]; t]).unwrap()
}

fn plan(lengths: &[usize]) -> GlossPlan {
    GlossPlan {
        lengths: lengths.to_vec(),
        total: lengths.iter().sum(),
    }
}

#[test]
fn split_examples() {
    let x =
        MotionSequence::from_rows(&(0..10).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
    let (a, b) = split_at_boundary(&x, 4).unwrap();
    assert_eq!((a.len(), b.len()), (4, 6));
    assert_eq!(b.get(0, 0), 4.0);
    assert!(split_at_boundary(&x, 0).is_err());
    assert!(split_at_boundary(&x, 10).is_err());
}

#[test]
fn cosine_weight_endpoints() {
    assert_eq!(cosine_weights(1), vec![0.5]);
    let w = cosine_weights(3);
    assert!(w[0].abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15 && (w[2] - 1.0).abs() < 1e-15);
}

#[test]
fn fusing_a_segment_with_itself_is_the_identity() {
    let rows: Vec<Vec<f64>> = (0..7)
        .map(|i| vec![(i as f64).sin(), 0.2 * i as f64])
        .collect();
    let a = MotionSequence::from_rows(&rows).unwrap();
    let f = cosine_fuse(&a, &a).unwrap();
    for (x, y) in f.data().iter().zip(a.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn fusion_runs_from_first_to_second() {
    let f = cosine_fuse(&constant(4, 0.0), &constant(6, 1.0)).unwrap();
    assert_eq!(f.len(), 5);
    assert_eq!(f.get(0, 0), 0.0);
    assert_eq!(f.get(4, 0), 1.0);
    assert!((f.get(2, 0) - 0.5).abs() < 1e-12);
}

#[test]
fn two_gloss_plan() {
    let mut m = constant(5, 1.0);
    m = MotionSequence::concat(&[&m, &constant(7, 2.0)]).unwrap();
    let pair = RefinedPair {
        motion: m,
        boundary: 5,
    };
    let out = assemble_sentence(&[pair], &plan(&[5, 7])).unwrap();
    assert_eq!(out.len(), 12);
    assert_eq!(out.get(4, 0), 1.0);
    assert_eq!(out.get(5, 0), 2.0);
    assert!(assemble_sentence(&[], &plan(&[5])).is_err());
}

#[test]
fn shared_middle_gloss_is_fused() {
    let mk = |a: f64, b: f64, ta: usize, tb: usize| RefinedPair {
        motion: MotionSequence::concat(&[&constant(ta, a), &constant(tb, b)]).unwrap(),
        boundary: ta,
    };
    let out =
        assemble_sentence(&[mk(1.0, 2.0, 4, 6), mk(2.0, 3.0, 6, 5)], &plan(&[4, 6, 5])).unwrap();
    assert_eq!(out.len(), 15);
    for t in 4..10 {
        assert_eq!(out.get(t, 0), 2.0);
    }
    assert!(assemble_sentence(&[mk(1.0, 2.0, 4, 6)], &plan(&[4, 6, 5])).is_err());
}

#[test]
fn single_gloss_rescale() {
    let out = rescale_single(&constant(9, 0.5), &plan(&[4])).unwrap();
    assert_eq!(out.len(), 4);
    assert!(rescale_single(&constant(9, 0.5), &plan(&[4, 4])).is_err());
}

proptest! {
    #[test]
    fn assembled_length_equals_plan_total(
        lens in prop::collection::vec((2usize..12, 2usize..12), 1..5),
        plan_lens in prop::collection::vec(1usize..30, 6),
    ) {
        let pairs: Vec<RefinedPair> = lens
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| RefinedPair {
                motion: MotionSequence::concat(&[&constant(a, i as f64), &constant(b, i as f64 + 1.0)]).unwrap(),
                boundary: a,
            })
            .collect();
        let p = plan(&plan_lens[..pairs.len() + 1]);
        let out = assemble_sentence(&pairs, &p).unwrap();
        prop_assert_eq!(out.len(), p.total);
    }
}
