//! Randomized invariants over the evaluation and preprocessing helpers.

use msvdd::datapipe;
use msvdd::scoring;
use msvdd::trainer;
use proptest::prelude::*;

proptest! {
    /// AUC is a ranking statistic: bounded, and invariant under any strictly
    /// increasing transform of the scores (exp preserves order and ties).
    #[test]
    fn auc_bounded_and_rank_invariant(
        labels in prop::collection::vec(any::<bool>(), 2..60),
        raw in prop::collection::vec(-10.0f64..10.0, 60),
    ) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores = &raw[..labels.len()];
        let auc = scoring::roc_auc(&labels, scores).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        let mapped: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let auc2 = scoring::roc_auc(&labels, &mapped).unwrap();
        prop_assert!((auc - auc2).abs() < 1e-12);
    }

    /// Flipping all scores reflects the AUC around 1/2 when there are no ties.
    #[test]
    fn auc_negation_symmetry(
        labels in prop::collection::vec(any::<bool>(), 2..40),
        raw in prop::collection::vec(-10.0f64..10.0, 40),
    ) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores = &raw[..labels.len()];
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = scoring::roc_auc(&labels, scores).unwrap();
        let b = scoring::roc_auc(&labels, &negated).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    /// Point adjustment only ever adds detections, so raw predictions imply
    /// adjusted ones and recall never decreases.
    #[test]
    fn point_adjust_monotone(
        labels in prop::collection::vec(any::<bool>(), 1..80),
        preds in prop::collection::vec(any::<bool>(), 80),
    ) {
        let preds = &preds[..labels.len()];
        let adjusted = scoring::point_adjust(&labels, preds).unwrap();
        for (i, (&p, &a)) in preds.iter().zip(&adjusted).enumerate() {
            prop_assert!(!p || a, "prediction lost at {i}");
            // adjustment may add positives only inside true anomaly segments
            prop_assert!(p || !a || labels[i]);
        }
    }

    /// Confusion counts partition the sample.
    #[test]
    fn prf1_counts_partition(
        labels in prop::collection::vec(any::<bool>(), 1..60),
        preds in prop::collection::vec(any::<bool>(), 60),
    ) {
        let m = scoring::prf1(&labels, &preds[..labels.len()]).unwrap();
        prop_assert_eq!(m.tp + m.fp + m.fn_ + m.tn, labels.len());
    }

    /// Quantiles stay within the data range and respect ordering in q.
    #[test]
    fn quantile_bounds_and_monotone(
        values in prop::collection::vec(-100.0f64..100.0, 1..50),
        q1 in 0.0f64..=1.0,
        q2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = (q1.min(q2), q1.max(q2));
        let a = trainer::quantile(&values, lo).unwrap();
        let b = trainer::quantile(&values, hi).unwrap();
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= a && a <= b && b <= max);
    }

    /// Constant streams pass through smoothing and decimation unchanged.
    #[test]
    fn preprocessing_preserves_constants(c in -5.0f64..5.0, n in 1usize..200) {
        let x = vec![c; n];
        for y in smooth_then_decimate(&x) {
            prop_assert!((y - c).abs() < 1e-12);
        }
    }

    /// Float32 WAV serialization round-trips samples bit-exactly.
    #[test]
    fn wav_f32_round_trip(
        raw in prop::collection::vec(-1.0f64..1.0, 2..64),
        rate in 1000u32..48000,
    ) {
        // even length: interleaved stereo
        let stereo: Vec<f64> = raw[..raw.len() & !1].iter().map(|&v| v as f32 as f64).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wav");
        datapipe::write_wav_f32(&path, &stereo, rate).unwrap();
        let (back, got_rate) = datapipe::load_wav(&path).unwrap();
        prop_assert_eq!(got_rate, rate);
        prop_assert_eq!(back, stereo);
    }
}

fn smooth_then_decimate(x: &[f64]) -> Vec<f64> {
    let smoothed = datapipe::smooth_moving_average(x, 5);
    datapipe::decimate_boxcar(&smoothed, 2)
}
