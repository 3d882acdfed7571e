//! Ranking metrics depend on score order only, so dropping the normalizer Z is harmless.

mod common;

use densehybrid::labels::LabelMap;
use densehybrid::math::AnomalyScoreMap;
use densehybrid::metrics::{auroc, average_precision, fpr_at_tpr, fuse_labels, ScoredPixelSet};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Transform {
    Affine(f64, f64),
    ExpShift(f64),
    CubeLinear(f64),
}

impl Transform {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Transform::Affine(a, b) => a * x + b,
            Transform::ExpShift(c) => (x + c).exp(),
            Transform::CubeLinear(a) => x * x * x + a * x,
        }
    }
}

fn transform() -> impl Strategy<Value = Transform> {
    prop_oneof![
        (0.01f64..100.0, -50.0f64..50.0).prop_map(|(a, b)| Transform::Affine(a, b)),
        (-3.0f64..3.0).prop_map(Transform::ExpShift),
        (0.01f64..10.0).prop_map(Transform::CubeLinear),
    ]
}

/// Scores on a 0.25 grid keep distinct values distinct after every transform.
fn map_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (4usize..80).prop_flat_map(|n| {
        (
            proptest::collection::vec((-12i32..12).prop_map(|v| v as f64 * 0.25), n),
            proptest::collection::vec(prop_oneof![3 => 0u8..2, 1 => Just(2u8), 1 => Just(255u8)], n),
        )
    })
}

proptest! {
    #[test]
    fn ranking_metrics_are_invariant((scores, mut gt) in map_and_labels(), t in transform()) {
        gt[0] = 2;
        gt[1] = 0;
        let w = scores.len();
        let labels = LabelMap::new(1, w, 2, gt).unwrap();
        let map = AnomalyScoreMap::new(1, w, scores.clone()).unwrap();
        let moved = AnomalyScoreMap::new(1, w, scores.iter().map(|&x| t.apply(x)).collect()).unwrap();
        let a = ScoredPixelSet::from_map(&map, &labels).unwrap();
        let b = ScoredPixelSet::from_map(&moved, &labels).unwrap();
        prop_assert!((average_precision(&a).unwrap() - average_precision(&b).unwrap()).abs() <= 1e-9);
        prop_assert!((auroc(&a).unwrap() - auroc(&b).unwrap()).abs() <= 1e-9);
        let (ca, cb) = (fpr_at_tpr(&a, 0.95).unwrap(), fpr_at_tpr(&b, 0.95).unwrap());
        prop_assert!((ca.fpr - cb.fpr).abs() <= 1e-9);
        // The calibrated threshold moves with the scores, so the fused maps agree.
        prop_assert_eq!(cb.tau, t.apply(ca.tau));
        let closed = LabelMap::new(1, w, 2, vec![0; w]).unwrap();
        prop_assert_eq!(
            fuse_labels(&closed, &map, ca.tau).unwrap(),
            fuse_labels(&closed, &moved, cb.tau).unwrap()
        );
    }
}
