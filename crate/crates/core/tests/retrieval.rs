use proptest::prelude::*;
use signstitch_core::motion::{MotionSequence, PartLayout};
use signstitch_core::retrieval::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn person(start: usize, end: usize) -> EntitySpan {
    EntitySpan {
        start,
        end,
        label: EntityLabel::Person,
    }
}

#[test]
fn anonymize_examples() {
    assert_eq!(
        anonymize("John met Mary", &[person(0, 4), person(9, 13)]),
        "someone met someone"
    );
    // Overlapping spans keep the longer one.
    assert_eq!(
        anonymize(
            "John Smith left",
            &[person(0, 4), person(0, 10), person(5, 10)]
        ),
        "someone left"
    );
    let g = Gazetteer {
        entries: vec![
            ("Paris".into(), EntityLabel::Gpe),
            ("Ann".into(), EntityLabel::Person),
        ],
    };
    let text = "Ann flew to Paris, not Annecy";
    assert_eq!(
        anonymize(text, &g.entities(text)),
        "someone flew to some place, not Annecy"
    );
}

#[test]
fn bm25_matches_hand_values() {
    let idx = Bm25Index::new(&[toks("a b"), toks("a c c"), toks("d")]);
    let (k1, b) = (1.5, 0.75);
    let idf_a = (1.5f64 / 2.5 + 1.0).ln();
    let idf_c = (2.5f64 / 1.5 + 1.0).ln();
    assert!((idx.idf("a") - idf_a).abs() < 1e-12);
    let q = toks("a c");
    let s = idx.score_all(&q);
    let k_long = k1 * (1.0 - b + b * 1.5);
    let expect = [
        idf_a,
        idf_a * (k1 + 1.0) / (1.0 + k_long) + idf_c * 2.0 * (k1 + 1.0) / (2.0 + k_long),
        0.0,
    ];
    for (got, want) in s.iter().zip(expect) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn bm25_increases_with_term_frequency() {
    let idx = Bm25Index::new(&[toks("x y y"), toks("x x y"), toks("z z z")]);
    let q = toks("x");
    assert!(idx.score(&q, 1) > idx.score(&q, 0));
    assert_eq!(idx.score(&q, 2), 0.0);
}

fn corpus() -> Vec<Document> {
    let rows = [
        "John bought a new car yesterday",
        "the weather is cold today",
        "Mary bought a new car yesterday",
        "I like to read books at night",
        "the cat sleeps on the sofa",
        "we will travel to Paris next week",
        "my brother works at the hospital",
        "the weather is cold today",
    ];
    rows.iter()
        .enumerate()
        .map(|(i, e)| Document {
            english: e.to_string(),
            gloss: String::new(),
            id: format!("s{i}"),
        })
        .collect()
}

fn names() -> Gazetteer {
    Gazetteer {
        entries: vec![
            ("John".into(), EntityLabel::Person),
            ("Mary".into(), EntityLabel::Person),
        ],
    }
}

#[test]
fn exact_duplicate_is_the_top_hit() {
    let docs = corpus();
    let r = Retriever::with_stubs(&docs, Box::new(names()), RetrievalConfig::default());
    let res = r.retrieve("I like to read books at night").unwrap();
    assert_eq!(res.hits[0].doc, 3);
    assert_eq!(r.anonymized(0), "someone bought a new car yesterday");
}

#[test]
fn hits_are_deduplicated_and_capped() {
    let docs = corpus();
    let r = Retriever::with_stubs(&docs, Box::new(names()), RetrievalConfig::default());
    let res = r.retrieve("the weather is cold").unwrap();
    assert_eq!(res.hits.len(), 6);
    assert!(!res.short);
    let weather = res
        .hits
        .iter()
        .filter(|h| docs[h.doc].english.contains("weather"))
        .count();
    assert_eq!(weather, 1);
    for w in res.hits.windows(2) {
        assert!(w[0].s_final >= w[1].s_final);
    }
}

#[test]
fn single_candidate_normalizes_to_one() {
    let docs = &corpus()[..1];
    let r = Retriever::with_stubs(
        docs,
        Box::new(Gazetteer::default()),
        RetrievalConfig::default(),
    );
    let res = r.retrieve("anything").unwrap();
    assert!(res.short);
    assert_eq!(res.hits[0].s_first, 1.0);
    assert!(Retriever::with_stubs(
        &[],
        Box::new(Gazetteer::default()),
        RetrievalConfig::default()
    )
    .retrieve("x")
    .is_err());
}

#[test]
fn min_max_examples() {
    assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    assert_eq!(min_max(&[4.0, 4.0]), vec![1.0, 1.0]);
}

fn motion(seed: u64, t: usize) -> MotionSequence {
    let d = PartLayout::base().dim();
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            (0..d)
                .map(|j| ((seed as f64 + 1.0) * (j as f64 * 0.37 + i as f64 * 0.11)).sin())
                .collect()
        })
        .collect();
    MotionSequence::from_rows(&rows).unwrap()
}

#[test]
fn equal_segments_cover_the_range() {
    assert_eq!(equal_segments(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
    assert_eq!(equal_segments(2, 3), vec![(0, 1), (0, 1), (1, 2)]);
}

#[test]
fn semantic_eval_finds_the_matching_item() {
    let enc = StatsEncoder {
        layout: PartLayout::base(),
    };
    let clips: Vec<(String, MotionSequence)> =
        (0..4).map(|g| (format!("G{g}"), motion(g, 12))).collect();
    let protos = build_prototypes(clips.iter().map(|(g, m)| (g.as_str(), m)), &enc);
    assert_eq!(protos.len(), 4);
    let sent = |a: usize, b: usize| MotionSequence::concat(&[&clips[a].1, &clips[b].1]).unwrap();
    let memory: Vec<SentenceItem> = [(0, 1), (2, 3), (1, 2), (3, 0)]
        .iter()
        .map(|&(a, b)| SentenceItem {
            id: format!("m{a}{b}"),
            english: String::new(),
            gloss: vec![format!("G{a}"), format!("G{b}")],
            embedding: signstitch_core::retrieval::MotionEncoder::encode(&enc, &sent(a, b)),
        })
        .collect();
    let x = sent(2, 3);
    let res = semantic_eval(&x, &memory, &protos, &enc, &SemanticEvalConfig::default()).unwrap();
    let best = res.best();
    assert_eq!(memory[best.item].id, "m23");
    assert_eq!(best.gloss_evidence, vec!["G2", "G3"]);
    assert!((best.f1 - 1.0).abs() < 1e-12 && (best.s_u - 1.0).abs() < 1e-9);
    assert_eq!(res.rank_of(&memory, "m23"), Some(1));
    assert_eq!(res.ranking.len(), memory.len());
    // Hybrid score recomputed from its parts.
    let cfg = SemanticEvalConfig::default();
    for c in &res.candidates {
        let s = cfg.lambda_u * c.s_u_norm + cfg.lambda_g * c.f1 + cfg.lambda_c * c.c_w;
        assert!((c.score - s).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn fusion_is_affine_invariant(
        raw in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0), 2..20),
        a in 0.1f64..5.0,
        c in -3.0f64..3.0,
    ) {
        let bm: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let sp: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let keys: Vec<String> = (0..raw.len()).map(|i| i.to_string()).collect();
        let cfg = RetrievalConfig::default();
        let rr = |d: usize| (d as f64 * 0.13).fract();
        let base = rank_candidates(&bm, &sp, rr, &keys, &cfg).unwrap();
        let bm2: Vec<f64> = bm.iter().map(|v| a * v + c).collect();
        let moved = rank_candidates(&bm2, &sp, rr, &keys, &cfg).unwrap();
        let order = |r: &RetrievalResult| r.hits.iter().map(|h| h.doc).collect::<Vec<_>>();
        prop_assert_eq!(order(&base), order(&moved));
        for (x, y) in base.hits.iter().zip(&moved.hits) {
            prop_assert!((x.s_first - y.s_first).abs() < 1e-9);
        }
    }
}
