use proptest::prelude::*;

use super::*;

fn corpus(items: &[(&str, &str, &[&str])]) -> EvalCorpus {
    EvalCorpus::from_text(items.iter().map(|(id, c, r)| (*id, *c, r.to_vec()))).unwrap()
}

fn toks(s: &str) -> Vec<String> {
    eval_tokenize(s)
}

#[test]
fn tokenization_lowercases_and_strips_punctuation() {
    assert_eq!(toks("A Dog, running!  \"fast\" ..."), ["a", "dog", "running", "fast"]);
    assert_eq!(toks("l'homme — ça va?"), ["lhomme", "ça", "va"]);
}

#[test]
fn corpus_invariants() {
    assert!(EvalCorpus::new(vec![]).is_err());
    let dup = vec![
        EvalItem {
            id: "a".into(),
            candidate: toks("x"),
            references: vec![toks("x")],
        };
        2
    ];
    assert!(EvalCorpus::new(dup).is_err());
    let norefs = vec![EvalItem {
        id: "a".into(),
        candidate: toks("x"),
        references: vec![],
    }];
    assert!(EvalCorpus::new(norefs).is_err());
}

#[test]
fn perfect_corpus_scores() {
    let c = corpus(&[
        (
            "1",
            "a man rides a horse on the beach",
            &["a man rides a horse on the beach"],
        ),
        ("2", "two dogs play in the snow", &["two dogs play in the snow"]),
        (
            "3",
            "a red bus parked near a tall building",
            &["a red bus parked near a tall building"],
        ),
    ]);
    let r = evaluate(&c);
    assert!((r.bleu4 - 1.0).abs() < 1e-12);
    assert!((r.rouge_l - 1.0).abs() < 1e-12);
    assert!((r.cider - 10.0).abs() < 1e-9);
    let (per_item, flag) = cider_items(&c);
    assert!(!flag);
    assert!(per_item.iter().all(|s| (s - 10.0).abs() < 1e-9));
}

#[test]
fn zero_overlap_scores() {
    let c = corpus(&[
        ("1", "purple elephants", &["a dog runs on grass"]),
        ("2", "quantum soup", &["the cat sits"]),
    ]);
    let r = evaluate(&c);
    assert_eq!(r.bleu4, 0.0);
    assert_eq!(r.rouge_l, 0.0);
    assert_eq!(r.cider, 0.0);
}

#[test]
fn bleu_zero_without_shared_four_gram() {
    let c = corpus(&[("1", "a dog runs on the grass", &["a dog is running on grass"])]);
    assert_eq!(bleu4(&c), 0.0);
}

#[test]
fn bleu_three_item_longhand() {
    let c = corpus(&[
        (
            "1",
            "the cat sat on the mat",
            &["the cat is on the mat", "there is a cat on the mat"],
        ),
        ("2", "a dog runs", &["a dog runs fast"]),
        ("3", "birds fly in the blue sky", &["birds fly in the clear blue sky"]),
    ]);
    // Clipped matches / candidate n-grams per item:
    //   item 1: 1g 5/6 (one "sat"), 2g 3/5, 3g 1/4 ("on the mat"), 4g 0/3
    //   item 2: 1g 3/3, 2g 2/2, 3g 1/1, 4g 0/0
    //   item 3: 1g 6/6, 2g 4/5, 3g 2/4, 4g 1/3 ("birds fly in the")
    let p = [14.0 / 15.0, 9.0 / 12.0, 4.0 / 9.0, 1.0 / 6.0];
    // Candidate length 6 + 3 + 6; closest references 6, 4, 7.
    let bp = (1.0f64 - 17.0 / 15.0).exp();
    let want = bp * (p.iter().product::<f64>()).powf(0.25);
    assert!((bleu4(&c) - want).abs() < 1e-12, "{} vs {want}", bleu4(&c));
}

#[test]
fn bleu_closest_reference_prefers_shorter_on_ties() {
    // Candidate length 4, references of length 3 and 5: the 3 is chosen,
    // so no brevity penalty applies.
    let c = corpus(&[("1", "a b c d", &["a b c d e", "a b c"])]);
    let p = [1.0, 1.0, 1.0, 1.0f64];
    assert!((bleu4(&c) - p.iter().product::<f64>()).abs() < 1e-12);
}

#[test]
fn rouge_longhand() {
    let f = |p: f64, r: f64| (1.0 + 1.44) * p * r / (r + 1.44 * p);
    let c = corpus(&[("1", "a b c d", &["a c d e"])]);
    assert!((rouge_l(&c) - f(0.75, 0.75)).abs() < 1e-12);
    let c = corpus(&[("1", "a b c", &["a c d e"])]);
    assert!((rouge_l(&c) - f(2.0 / 3.0, 0.5)).abs() < 1e-12);
    // Best reference wins, and the corpus score is the item mean.
    let c = corpus(&[("1", "a b c", &["x y", "a c d e"]), ("2", "p q", &["p q"])]);
    assert!((rouge_l(&c) - (f(2.0 / 3.0, 0.5) + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn cider_two_item_longhand() {
    let c = corpus(&[
        ("A", "the dog runs", &["the dog sits"]),
        ("B", "a cat sits down", &["the cat sits"]),
    ]);
    // Document frequencies over reference sets: "the" and "sits" occur in
    // both items (weight 0), every other reference n-gram in one (weight
    // ln 2 per occurrence); candidate-only n-grams also weigh ln 2.
    //
    // A: 1g hyp {dog, runs} vs ref {dog}: 1/√2; 2g {the dog, dog runs} vs
    //    {the dog, dog sits}: 1/2; 3g disjoint; same bigram count.
    let a = 10.0 * (1.0 / 2f64.sqrt() + 0.5) / 4.0;
    // B: 1g {a, cat, down} vs {cat}: 1/√3; 2g {a cat, cat sits, sits down}
    //    vs {the cat, cat sits}: 1/√6; 3g disjoint; 3 vs 2 bigrams.
    let pen = (-1.0f64 / 72.0).exp();
    let b = 10.0 * pen * (1.0 / 3f64.sqrt() + 1.0 / 6f64.sqrt()) / 4.0;
    let (items, flag) = cider_items(&c);
    assert!(!flag);
    assert!((items[0] - a).abs() < 1e-12, "{} vs {a}", items[0]);
    assert!((items[1] - b).abs() < 1e-12, "{} vs {b}", items[1]);
    assert!((cider(&c).score - (a + b) / 2.0).abs() < 1e-12);
}

#[test]
fn cider_multiple_references_average() {
    let c = corpus(&[
        ("A", "the dog runs", &["the dog sits", "a dog runs"]),
        ("B", "a cat", &["the cat sits"]),
    ]);
    let (items, _) = cider_items(&c);
    // Each reference is scored separately and the sum divided by two.
    // df(the) = df(sits) = 2, every other reference n-gram has df 1, so
    // weights are ln 2 or 0.
    // vs "the dog sits": 1g hyp {dog, runs} ref {dog}: 1/√2;
    //   2g hyp {the dog, dog runs} ref {the dog, dog sits}: 1/2; 3g 0.
    // vs "a dog runs": 1g hyp {dog, runs} ref {a, dog, runs}: 2/(√2·√3);
    //   2g hyp {the dog, dog runs} ref {a dog, dog runs}: 1/2;
    //   3g {the dog runs} vs {a dog runs}: 0.
    let s1 = (1.0 / 2f64.sqrt() + 0.5) / 4.0;
    let s2 = (2.0 / 6f64.sqrt() + 0.5) / 4.0;
    let want = 10.0 * (s1 + s2) / 2.0;
    assert!((items[0] - want).abs() < 1e-12, "{} vs {want}", items[0]);
}

#[test]
fn cider_single_item_is_flagged() {
    let c = corpus(&[("1", "a dog", &["a dog"])]);
    let s = cider(&c);
    assert!(s.degenerate_idf);
    assert_eq!(s.score, 0.0);
    assert!(evaluate(&c).degenerate_idf);
}

#[test]
fn scores_are_bit_reproducible() {
    use rand::{Rng, SeedableRng};
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut sentence =
        |len: usize| -> Vec<String> { (0..len).map(|_| words[rng.random_range(0..30)].clone()).collect() };
    let items = (0..40)
        .map(|i| EvalItem {
            id: i.to_string(),
            candidate: sentence(25),
            references: vec![sentence(20), sentence(30)],
        })
        .collect();
    let c = EvalCorpus::new(items).unwrap();
    let first = evaluate(&c);
    for _ in 0..50 {
        let r = evaluate(&c);
        assert_eq!(r.cider.to_bits(), first.cider.to_bits());
        assert_eq!(r.bleu4.to_bits(), first.bleu4.to_bits());
    }
}

#[test]
fn empty_candidate_scores_zero() {
    let c = corpus(&[("1", "", &["a dog runs"]), ("2", "...", &["a cat"])]);
    let r = evaluate(&c);
    assert_eq!((r.bleu4, r.rouge_l, r.cider), (0.0, 0.0, 0.0));
}

#[test]
fn reads_jsonl() {
    let text = r#"{"id": "1", "candidate": "A dog.", "references": ["a dog", "the dog"]}
{"id": "2", "candidate": "a cat", "references": ["a cat"]}
"#;
    let c = read_eval(text.as_bytes()).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.items()[0].candidate, ["a", "dog"]);
    assert!(read_eval(r#"{"id": "1", "candidate": "x", "references": []}"#.as_bytes()).is_err());
    assert!(read_eval(r#"{"id": "1", "candidate": "x"}"#.as_bytes()).is_err());
    let report = serde_json::to_value(evaluate(&c)).unwrap();
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 4);
}

const WORDS: &[&str] = &["a", "dog", "cat", "runs", "on", "the", "grass", "red", "sits"];

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS), 1..9).prop_map(|v| v.into_iter().map(String::from).collect())
}

fn items() -> impl Strategy<Value = Vec<EvalItem>> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..4)), 2..6).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (candidate, references))| EvalItem {
                id: i.to_string(),
                candidate,
                references,
            })
            .collect()
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

proptest! {
    #[test]
    fn metrics_ignore_item_order(items in items(), rot in 0usize..5) {
        let a = EvalCorpus::new(items.clone()).unwrap();
        let mut shuffled = items;
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let b = EvalCorpus::new(shuffled).unwrap();
        let (ra, rb) = (evaluate(&a), evaluate(&b));
        prop_assert!(close(ra.bleu4, rb.bleu4));
        prop_assert!(close(ra.rouge_l, rb.rouge_l));
        prop_assert!(close(ra.cider, rb.cider));
    }

    #[test]
    fn metrics_ignore_reference_order(items in items()) {
        let a = EvalCorpus::new(items.clone()).unwrap();
        let b = EvalCorpus::new(
            items.into_iter().map(|mut it| { it.references.reverse(); it }).collect(),
        ).unwrap();
        let (ra, rb) = (evaluate(&a), evaluate(&b));
        prop_assert!(close(ra.bleu4, rb.bleu4));
        prop_assert!(close(ra.rouge_l, rb.rouge_l));
        prop_assert!(close(ra.cider, rb.cider));
    }

    #[test]
    fn scores_stay_in_range(items in items()) {
        let r = evaluate(&EvalCorpus::new(items).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r.bleu4));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r.rouge_l));
        prop_assert!(r.cider >= 0.0);
    }

    #[test]
    fn appending_a_reference_ngram_keeps_clipped_counts(
        cand in sentence(),
        reference in sentence(),
        n in 1usize..=4,
        pick in 0usize..8,
    ) {
        prop_assume!(reference.len() >= n);
        let start = pick % (reference.len() - n + 1);
        let gram = &reference[start..start + n];
        let clipped = |c: &[String]| -> usize {
            let r = ngrams(&reference, n);
            ngrams(c, n).iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum()
        };
        let mut longer = cand.clone();
        longer.extend_from_slice(gram);
        prop_assert!(clipped(&longer) >= clipped(&cand));
    }
}
