use proptest::prelude::*;

use super::*;
use crate::rng::SeededRng;

/// Minimal `(edits, -subs)` over every alignment path, by exhaustive search.
fn brute_force(r: &[&str], h: &[&str]) -> (usize, usize, usize) {
    fn go(r: &[&str], h: &[&str]) -> Vec<(usize, usize, usize)> {
        if r.is_empty() {
            return vec![(0, 0, h.len())];
        }
        if h.is_empty() {
            return vec![(0, r.len(), 0)];
        }
        let mut out = Vec::new();
        let sub = usize::from(r[0] != h[0]);
        for (s, d, i) in go(&r[1..], &h[1..]) {
            out.push((s + sub, d, i));
        }
        for (s, d, i) in go(&r[1..], h) {
            out.push((s, d + 1, i));
        }
        for (s, d, i) in go(r, &h[1..]) {
            out.push((s, d, i + 1));
        }
        out
    }
    go(r, h)
        .into_iter()
        .min_by_key(|&(s, d, i)| (s + d + i, std::cmp::Reverse(s)))
        .unwrap()
}

fn words(rng: &mut SeededRng, max_len: usize) -> Vec<&'static str> {
    const POOL: [&str; 4] = ["a", "b", "c", "d"];
    let n = rng.below(max_len + 1);
    (0..n).map(|_| POOL[rng.below(POOL.len())]).collect()
}

#[test]
fn normalization_examples() {
    let p = NormalizationPolicy::default();
    assert_eq!(normalize("Ciao,  Mondo!", &p), "ciao mondo");
    assert_eq!(normalize("ciao mondo", &p), "ciao mondo");
    assert_eq!(normalize("L'acqua", &p), "l'acqua");
    let off = NormalizationPolicy {
        lowercase: false,
        strip_punctuation: false,
        collapse_whitespace: false,
    };
    assert_eq!(normalize("A,  b", &off), "A,  b");
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "[ a-zA-Z',.!?é\t-]{0,30}") {
        let p = NormalizationPolicy::default();
        let once = normalize(&s, &p);
        prop_assert_eq!(normalize(&once, &p), once);
    }
}

#[test]
fn wer_examples() {
    let p = NormalizationPolicy::default();
    assert_eq!(wer("a b c", "a b c", &p).wer, 0.0);
    let w = wer("a b c d", "a x c", &p);
    assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 1, 0));
    assert_eq!(w.wer, 0.5);
    let swap = wer("a b", "b a", &p);
    assert_eq!(
        (swap.substitutions, swap.deletions, swap.insertions),
        (2, 0, 0)
    );
    assert_eq!(wer("", "", &p).wer, 0.0);
    let empty = wer("", "x y", &p);
    assert!(empty.degenerate);
    assert_eq!(empty.wer, 2.0);
}

#[test]
fn dp_matches_brute_force() {
    let mut rng = SeededRng::new(5);
    for _ in 0..1000 {
        let r = words(&mut rng, 6);
        let h = words(&mut rng, 6);
        assert_eq!(align_counts(&r, &h), brute_force(&r, &h), "{r:?} vs {h:?}");
    }
}

#[test]
fn swapping_roles_swaps_deletions_and_insertions() {
    let mut rng = SeededRng::new(6);
    for _ in 0..300 {
        let r = words(&mut rng, 6);
        let h = words(&mut rng, 6);
        let (s, d, i) = align_counts(&r, &h);
        assert_eq!(align_counts(&h, &r), (s, i, d));
        let zero = (s + d + i) == 0;
        assert_eq!(zero, r == h);
    }
}

#[test]
fn corpus_wer_is_micro_averaged() {
    let a = WerResult::from_counts(0, 0, 0, 1);
    let b = WerResult::from_counts(3, 0, 0, 9);
    let c = corpus_wer([&a, &b]);
    assert!((c.wer - 0.3).abs() < 1e-15);
}

#[test]
fn report_renders_grid() {
    let mut rep = EvalReport::new("scaling", NormalizationPolicy::default());
    let col_in = ColumnKey {
        test_corpus: "cv-test".into(),
        domain: "CV".into(),
    };
    let col_out = ColumnKey {
        test_corpus: "fl-test".into(),
        domain: "FL".into(),
    };
    for (h, w) in [(10.0, 0.14), (252.0, 0.061)] {
        let row = RowKey {
            train_corpus: "cv".into(),
            hours: h,
            provenance: "Scratch".into(),
        };
        rep.set(
            row.clone(),
            col_in.clone(),
            Cell::from_wer(
                &WerResult::from_counts((w * 1000.0) as usize, 0, 0, 1000),
                None,
            ),
        );
        rep.set(
            row,
            col_out.clone(),
            Cell::from_wer(&WerResult::from_counts(200, 0, 0, 1000), None),
        );
    }
    let text = rep.to_text();
    assert!(text.contains("cv-test (CV)") && text.contains("fl-test (FL)"));
    assert!(text.contains("14.0") && text.contains("6.1") && text.contains("20.0"));
    assert!(text.contains("punctuation stripped"));
    let csv = rep.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("train_corpus,hours,provenance,cv-test (CV),fl-test (FL)"));
}

#[test]
fn results_jsonl_field_names() {
    let r = UtteranceResult {
        id: "u".into(),
        reference: "a b".into(),
        hypothesis: "a".into(),
        substitutions: 0,
        deletions: 1,
        insertions: 0,
        n_ref_words: 2,
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.jsonl");
    write_results_jsonl(&p, std::slice::from_ref(&r)).unwrap();
    let line = std::fs::read_to_string(&p).unwrap();
    for key in [
        "\"id\"", "\"ref\"", "\"hyp\"", "\"S\"", "\"D\"", "\"I\"", "\"N\"",
    ] {
        assert!(line.contains(key));
    }
    assert_eq!(read_results_jsonl(&p).unwrap(), vec![r]);
}
