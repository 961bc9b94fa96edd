//! Metrics against brute-force transcriptions of their definitions.

mod common;

use civdg::metrics::{binary_auroc, ece, PredictionLog};
use civdg::scm::TaskMode;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn single_label_logs_match_oracles(seed in any::<u64>()) {
        let log = common::random_log(&mut common::rng(seed), TaskMode::SingleLabel);
        let gap = common::metric_oracle_gap(&log);
        prop_assert!(gap <= 1e-12, "gap {gap:e}");
    }

    #[test]
    fn multi_label_logs_match_oracles(seed in any::<u64>()) {
        let log = common::random_log(&mut common::rng(seed), TaskMode::MultiLabel);
        let gap = common::metric_oracle_gap(&log);
        prop_assert!(gap <= 1e-12, "gap {gap:e}");
    }

    #[test]
    fn auroc_matches_pair_counting(
        scores in prop::collection::vec(0u8..6, 2..40),
        labels in prop::collection::vec(any::<bool>(), 2..40),
    ) {
        let n = scores.len().min(labels.len());
        let s: Vec<f64> = scores[..n].iter().map(|&v| v as f64 / 5.0).collect();
        let got = binary_auroc(&s, &labels[..n]);
        let want = common::oracle_binary_auroc(&s, &labels[..n]);
        match (got, want) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn auroc_is_invariant_to_monotone_rescaling(seed in any::<u64>()) {
        let log = common::random_log(&mut common::rng(seed), TaskMode::MultiLabel);
        let pos: Vec<bool> = log.labels.iter().map(|r| r[0] == 1.0).collect();
        let s: Vec<f64> = log.scores.iter().map(|r| r[0]).collect();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
        prop_assert_eq!(binary_auroc(&s, &pos), binary_auroc(&t, &pos));
    }
}

#[test]
fn pair_counting_example() {
    // Positives at 0.8 and 0.4, negatives at 0.6 and 0.2: three of four pairs ordered.
    let auc = binary_auroc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap();
    assert_eq!(auc, 0.75);
    assert_eq!(
        common::oracle_binary_auroc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]),
        Some(0.75)
    );
}

#[test]
fn perfectly_calibrated_bins_have_zero_ece() {
    // Confidence 0.75 on four samples, three correct.
    let scores = vec![vec![0.75, 0.25]; 4];
    let labels = vec![
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
    ];
    let log = PredictionLog::new(
        scores,
        labels,
        vec![0; 4],
        vec![0; 4],
        TaskMode::SingleLabel,
    )
    .unwrap();
    assert!(ece(&log, 10).unwrap().ece.abs() < 1e-15);
}
