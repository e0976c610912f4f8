use std::path::Path;

use hcsa::metrics::*;
use proptest::prelude::*;

const WORDS: [&str; 12] = ["dog", "cat", "puppy", "kitten", "red", "crimson", "blue", "jump", "run", "sprint", "table", "zzz"];

fn oracle() -> SimilarityOracle {
    SimilarityOracle::Taxonomy(Taxonomy::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/taxonomy.tsv"))).unwrap())
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]).prop_map(str::to_owned), 1..4)
}

#[test]
fn fixture_similarities() {
    let SimilarityOracle::Taxonomy(t) = oracle() else { unreachable!() };
    assert_eq!(t.depth("entity"), Some(1));
    assert_eq!(t.lowest_common_subsumer("dog", "cat"), Some("animal"));
    assert!((t.wu_palmer("dog", "cat") - 2.0 / 3.0).abs() < 1e-15);
    assert!((t.wu_palmer("red", "crimson") - 6.0 / 7.0).abs() < 1e-15);
    assert_eq!(t.wu_palmer("dog", "zzz"), 0.0);
}

#[test]
fn synonym_oracle_from_file() {
    let o = SimilarityOracle::load_synonyms(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/synonyms.tsv"))).unwrap();
    let p = vec![tokenize("a sofa")];
    let r = vec![tokenize("a couch")];
    assert_eq!(wups(&p, &r, 0.9, &o).unwrap(), 1.0);
    assert_eq!(corpus_bleu1(&p, &r).unwrap(), 0.5);
}

#[test]
fn evaluate_reports_per_type() {
    let rec = |id: &str, a: &str, t: &str| AnswerRecord {
        id: id.into(),
        answer: a.into(),
        type_tag: Some(t.into()),
    };
    let refs = vec![rec("1", "dog", "object"), rec("2", "red", "color"), rec("3", "two", "number")];
    let preds = vec![rec("3", "two", "number"), rec("1", "cat", "object"), rec("2", "red", "color")];
    let r = evaluate(&preds, &refs, &oracle()).unwrap();
    assert_eq!(r.overall.count, 3);
    assert!((r.overall.bleu1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.overall.wups_0 - (2.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    assert!((r.overall.wups_09 - (2.0 + 0.2 / 3.0) / 3.0).abs() < 1e-15);
    assert_eq!(r.by_type.keys().collect::<Vec<_>>(), ["color", "number", "object"]);
    assert_eq!(r.by_type.values().map(|s| s.count).sum::<usize>(), 3);
}

proptest! {
    #[test]
    fn wups_bounds_and_threshold_order(preds in prop::collection::vec(sentence(), 1..6), seed in any::<u64>()) {
        let refs: Vec<Vec<String>> = preds.iter().enumerate()
            .map(|(i, p)| p.iter().rev().map(|w| if (seed >> (i % 64)) & 1 == 1 { w.clone() } else { WORDS[(i * 5 + seed as usize) % WORDS.len()].to_owned() }).collect())
            .collect();
        let o = oracle();
        let w0 = wups(&preds, &refs, 0.0, &o).unwrap();
        let w9 = wups(&preds, &refs, 0.9, &o).unwrap();
        prop_assert!((0.0..=1.0).contains(&w0));
        prop_assert!(0.0 <= w9 && w9 <= w0 + 1e-15);
        let b = corpus_bleu1(&preds, &refs).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn wups_symmetric_for_equal_lengths(a in sentence(), b in sentence()) {
        let o = oracle();
        let n = a.len().min(b.len());
        let (a, b) = (vec![a[..n].to_vec()], vec![b[..n].to_vec()]);
        for g in [0.0, 0.9] {
            prop_assert_eq!(wups(&a, &b, g, &o).unwrap(), wups(&b, &a, g, &o).unwrap());
        }
    }

    #[test]
    fn identity_scores_one(a in prop::collection::vec(sentence(), 1..5)) {
        let o = oracle();
        prop_assert_eq!(wups(&a, &a, 0.9, &o).unwrap(), 1.0);
        prop_assert_eq!(corpus_bleu1(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn wup_gamma_monotone_in_similarity(a in 0..12usize, b in 0..12usize, c in 0..12usize, d in 0..12usize, g in 0.0f64..1.0) {
        let o = oracle();
        let mut pairs = [(WORDS[a], WORDS[b]), (WORDS[c], WORDS[d])];
        pairs.sort_by(|x, y| o.similarity(x.0, x.1).total_cmp(&o.similarity(y.0, y.1)));
        let [(p, q), (r, s)] = pairs;
        prop_assert!(wup_gamma(p, q, g, &o) <= wup_gamma(r, s, g, &o));
        prop_assert_eq!(wup_gamma(p, q, g, &o), wup_gamma(q, p, g, &o));
    }
}
