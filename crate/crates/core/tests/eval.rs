use bevmap::eval::{average_precision, chamfer_distance, evaluate, score_matrix, EvalConfig, EvalError};
use bevmap::map::{Category, MapElement, Point, VectorMap};
use proptest::prelude::*;

mod common;

use common::eval_oracle::{micro_dataset, INTERVAL};
use common::{eval_oracle, pass};

#[test]
fn evaluate_equals_brute_force_on_micro_datasets() {
    pass(eval_oracle::matches_brute_force(40));
}

#[test]
fn ap_is_monotone_and_scale_invariant_on_fixed_seeds() {
    pass(eval_oracle::monotone_in_threshold(40));
    pass(eval_oracle::confidence_scale_invariant(40));
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let (_, gts) = micro_dataset(3);
    let report = evaluate(&gts, &gts, &EvalConfig::default()).unwrap();
    assert_eq!(report.map("hard"), 1.0);
    assert_eq!(report.map("easy"), 1.0);
}

#[test]
fn empty_predictions_score_zero_and_missing_categories_are_noted() {
    let el = |c, pts: Vec<Point>| MapElement { id: 0, category: c, confidence: 1.0, points: pts };
    let gts = vec![VectorMap::new("a", vec![el(Category::Divider, vec![[0.0, 0.0], [0.0, 3.0]])])];
    let preds = vec![VectorMap::new("a", vec![])];
    let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
    assert_eq!(r.map("hard"), 0.0);
    let hard = r.setting("hard").unwrap();
    assert_eq!(hard.category_ap[Category::PedCrossing], None);
    assert_eq!(hard.category_ap[Category::Divider], Some(0.0));
    assert_eq!(r.notes.len(), 2);
    let table = r.table();
    assert!(table.contains("AP_ped") && table.contains("AP_div") && table.contains("AP_bou") && table.contains("mAP"));
}

#[test]
fn scene_mismatch_is_rejected() {
    let a = VectorMap::new("a", vec![]);
    let b = VectorMap::new("b", vec![]);
    assert!(matches!(evaluate(&[a.clone()], &[b], &EvalConfig::default()), Err(EvalError::SceneMismatch(_))));
    assert!(matches!(evaluate(&[a.clone(), a.clone()], &[a], &EvalConfig::default()), Err(EvalError::SceneMismatch(_))));
}

#[test]
fn chamfer_matches_dense_sampling_limit() {
    // Two parallel 10 m segments 1 m apart: every sample is 1 m from the other line.
    let a = [[0.0, 0.0], [10.0, 0.0]];
    let b = [[0.0, 1.0], [10.0, 1.0]];
    assert!((chamfer_distance(&a, &b, INTERVAL).unwrap() - 1.0).abs() < 1e-12);
    // Symmetry and identity.
    let c = [[0.0, 0.0], [3.0, 4.0], [6.0, 0.0]];
    let d = chamfer_distance(&a, &c, INTERVAL).unwrap();
    assert_eq!(d, chamfer_distance(&c, &a, INTERVAL).unwrap());
    assert_eq!(chamfer_distance(&c, &c, INTERVAL).unwrap(), 0.0);
}

/// Greedy confidence-ordered matching can end with fewer true positives
/// than the best one-to-one assignment: the confident prediction takes the
/// only ground truth the second one could reach.
#[test]
fn greedy_matching_differs_from_maximum_matching() {
    let conf = [0.9, 0.8];
    let dists = vec![vec![0.3, 0.4], vec![0.2, 5.0]];
    let s = score_matrix(&conf, &dists, 2, 0.5);
    // Prediction 0 claims its nearest ground truth (0); prediction 1 is then
    // left with ground truth 1 at 5 m.
    assert_eq!(s.flags, vec![(0.9, true), (0.8, false)]);
    assert_eq!(s.matches, vec![(0, 0, 0.3)]);
    // A maximum matching (0 -> 1, 1 -> 0) would have two hits.
    assert!(dists[0][1] < 0.5 && dists[1][0] < 0.5);
}

proptest! {
    #[test]
    fn ap_is_monotone_in_threshold(seed in 0u64..400) {
        let (preds, gts) = micro_dataset(seed);
        let cfg = EvalConfig { hard: vec![0.3, 0.6, 0.9, 1.2, 2.0, 5.0], easy: vec![10.0], interval: INTERVAL };
        let r = evaluate(&preds, &gts, &cfg).unwrap();
        let hard = r.setting("hard").unwrap();
        for c in Category::ALL {
            let aps: Vec<Option<f64>> = hard.per_category[c].iter().map(|t| t.ap).collect();
            for w in aps.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    prop_assert!(a <= b + 1e-12, "{c}: {aps:?}");
                }
            }
        }
    }

    #[test]
    fn ap_is_invariant_to_confidence_scale(seed in 0u64..400, scale in 0.01f64..1.0) {
        let (preds, gts) = micro_dataset(seed);
        let scaled: Vec<VectorMap> = preds
            .iter()
            .map(|m| {
                let mut m = m.clone();
                for e in &mut m.elements {
                    e.confidence *= scale;
                }
                m
            })
            .collect();
        let cfg = EvalConfig::default();
        let a = evaluate(&preds, &gts, &cfg).unwrap();
        let b = evaluate(&scaled, &gts, &cfg).unwrap();
        prop_assert_eq!(a.settings, b.settings);
    }

    #[test]
    fn ap_lies_in_unit_interval(flags in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 0..30), extra in 0usize..5) {
        let hits = flags.iter().filter(|f| f.1).count();
        let ap = average_precision(&flags, hits + extra).unwrap_or(0.0);
        prop_assert!((0.0..=1.0).contains(&ap));
    }
}
