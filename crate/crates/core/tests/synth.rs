use signstitch_core::dataset::{read_dialogues, read_words, write_records};
use signstitch_core::motion::MotionSequence;
use signstitch_core::synth::*;

fn small() -> SynthSpec {
    SynthSpec {
        vocab: 5,
        variants: 3,
        sentences: 7,
        sentences_per_dialogue: 3,
        ..SynthSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = synth_generate(&small()).unwrap();
    let b = synth_generate(&small()).unwrap();
    assert_eq!(a.words, b.words);
    assert_eq!(a.dialogues, b.dialogues);
    let c = synth_generate(&SynthSpec { seed: 8, ..small() }).unwrap();
    assert_ne!(a.words, c.words);
}

#[test]
fn corpus_shape_and_schema() {
    let spec = small();
    let c = synth_generate(&spec).unwrap();
    assert_eq!(c.words.len(), 15);
    assert_eq!(c.sentences.len(), 7);
    assert_eq!(c.dialogues.len(), 3);
    assert_eq!(c.dialogues[2].conversation.len(), 1);
    let mut buf = Vec::new();
    write_records(&mut buf, &c.words).unwrap();
    assert_eq!(read_words(buf.as_slice(), true).unwrap(), c.words);
    let mut buf = Vec::new();
    write_records(&mut buf, &c.dialogues).unwrap();
    assert_eq!(read_dialogues(buf.as_slice(), true).unwrap(), c.dialogues);
    for s in &c.sentences {
        assert!(s.glosses.windows(2).all(|w| w[0] != w[1]));
        assert!((2..=6).contains(&s.glosses.len()));
    }
    assert!(SynthSpec {
        vocab: 0,
        ..small()
    }
    .validate()
    .is_err());
    assert!(SynthSpec {
        core_len: (3, 10),
        ..small()
    }
    .validate()
    .is_err());
}

#[test]
fn words_rest_outside_the_core() {
    let c = synth_generate(&small()).unwrap();
    let rest = c.rig.rest_frame();
    for (i, w) in c.words.iter().enumerate() {
        let clip = w.to_clip(&format!("w{i:05}")).unwrap();
        assert_eq!(clip.motion.frame(0), rest.as_slice());
        assert_eq!(clip.motion.frame(clip.motion.len() - 1), rest.as_slice());
        assert!(clip.core_span.0 >= small().prep_len.0);
    }
}

#[test]
fn blended_sentences_keep_segments_outside_transitions() {
    let a = MotionSequence::from_rows(&(0..5).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>())
        .unwrap();
    let b = MotionSequence::from_rows(
        &(0..4)
            .map(|i| vec![10.0 - i as f64, 2.0])
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let (m, spans) = blend_segments(&[a.clone(), b.clone()], 3).unwrap();
    assert_eq!(m.len(), 12);
    assert_eq!(spans, vec![[0, 4], [8, 11]]);
    assert_eq!(m.slice(0, 5).unwrap().data(), a.data());
    assert_eq!(m.slice(8, 12).unwrap().data(), b.data());
}

#[test]
fn hermite_transitions_are_smooth() {
    // With matching end slopes a straight line is reproduced exactly.
    let f = hermite_frames(&[0.0], &[1.0], &[4.0], &[1.0], 3);
    for (i, v) in f.iter().enumerate() {
        assert!((v[0] - (i + 1) as f64).abs() < 1e-12);
    }
    assert!(hermite_frames(&[0.0], &[0.0], &[1.0], &[0.0], 0).is_empty());
}

#[test]
fn sentence_ground_truth_matches_canonical_renders() {
    let c = synth_generate(&small()).unwrap();
    let d = &c.dialogues[0].conversation[0].sentences[0];
    let gt = d.arrays.to_motion("s").unwrap();
    let spans = d.gloss_spans.as_ref().unwrap();
    let s = &c.sentences[0];
    for (g, span) in s.glosses.iter().zip(spans) {
        let lex = &c.lexicon[*g];
        let r = c.rig.render_gloss(lex, lex.canonical_len);
        assert_eq!(span[1] - span[0] + 1, lex.canonical_len);
        let seg = gt.slice(span[0], span[1] + 1).unwrap();
        for (x, y) in seg.data().iter().zip(r.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn isolated_cores_run_longer_than_sentence_cores() {
    let c = synth_generate(&SynthSpec {
        variants: 10,
        ..small()
    })
    .unwrap();
    let (mut iso, mut canon) = (0.0, 0.0);
    for w in &c.words {
        let g = c.lexicon.iter().find(|l| l.name == w.gloss).unwrap();
        iso += (w.core_span[1] - w.core_span[0] + 1) as f64;
        canon += g.canonical_len as f64;
    }
    assert!(iso > canon);
}
