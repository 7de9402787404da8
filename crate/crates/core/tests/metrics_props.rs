use glyphdit_core::layout::BBox;
use glyphdit_core::metrics::{evaluate_lines, levenshtein, match_lines, ned, OcrLine};
use proptest::prelude::*;

fn line() -> impl Strategy<Value = OcrLine> {
    ("[ab]{0,3}", 0i64..30, 0i64..30, 1i64..15, 1i64..15)
        .prop_map(|(t, l, y, w, h)| OcrLine::new(t, BBox::new(l, y, l + w, y + h).unwrap()))
}

proptest! {
    #[test]
    fn levenshtein_metric_axioms(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        prop_assert_eq!(ned(&a, &b), ned(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ned(&a, &b)));
    }

    #[test]
    fn matching_is_one_to_one_and_thresholded(
        pred in prop::collection::vec(line(), 0..8),
        gt in prop::collection::vec(line(), 0..8),
    ) {
        let m = match_lines(&pred, &gt, 0.5).unwrap();
        let mut p_seen = vec![0; pred.len()];
        let mut g_seen = vec![0; gt.len()];
        for &(i, j, v) in &m.pairs {
            prop_assert!(v >= 0.5);
            p_seen[i] += 1;
            g_seen[j] += 1;
        }
        for &i in &m.unmatched_pred { p_seen[i] += 1; }
        for &j in &m.unmatched_gt { g_seen[j] += 1; }
        prop_assert!(p_seen.iter().all(|&c| c == 1));
        prop_assert!(g_seen.iter().all(|&c| c == 1));

        let r = evaluate_lines(&pred, &gt, 0.5).unwrap();
        let tp = r.counts.true_positives as f64;
        if !pred.is_empty() { prop_assert!((r.precision * pred.len() as f64 - tp).abs() < 1e-9); }
        if !gt.is_empty() { prop_assert!((r.recall * gt.len() as f64 - tp).abs() < 1e-9); }
        for v in [r.precision, r.recall, r.accuracy, r.ned, r.f_score] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
