use forge_core::evalkit::{coco_map, rec_accuracy, CocoParams, GroundTruthBox, Prediction, RecAnswer, RecOptions, RecQuery};
use forge_core::model::BBox;
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = Vec<(u8, [u16; 4])>> {
    prop::collection::vec((0u8..3, [0u16..200, 0u16..200, 1u16..120, 1u16..120]), 1..12)
}

fn to_box(b: [u16; 4], k: f64) -> BBox {
    let (x, y) = (b[0] as f64 * k, b[1] as f64 * k);
    BBox::pixels(x, y, x + b[2] as f64 * k, y + b[3] as f64 * k)
}

fn build(gt: &[(u8, [u16; 4])], pr: &[(u8, [u16; 4])], k: f64) -> (Vec<Prediction>, Vec<GroundTruthBox>) {
    let g = gt
        .iter()
        .map(|(l, b)| GroundTruthBox { image_id: "im".into(), label: format!("c{l}"), bbox: to_box(*b, k) })
        .collect();
    let p = pr
        .iter()
        .enumerate()
        .map(|(i, (l, b))| Prediction::new("im", &format!("c{l}"), to_box(*b, k), 1.0 - i as f64 / 64.0, i).unwrap())
        .collect();
    (p, g)
}

proptest! {
    #[test]
    fn prediction_order_does_not_matter(gt in boxes(), pr in boxes(), rot in 0usize..12) {
        let params = CocoParams::default();
        let (p, g) = build(&gt, &pr, 1.0);
        let mut shuffled = p.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        prop_assert_eq!(coco_map(&p, &g, &params).map, coco_map(&shuffled, &g, &params).map);
    }

    #[test]
    fn uniform_scaling_keeps_map(gt in boxes(), pr in boxes()) {
        let params = CocoParams::default();
        let (p1, g1) = build(&gt, &pr, 1.0);
        let (p2, g2) = build(&gt, &pr, 4.0);
        prop_assert_eq!(coco_map(&p1, &g1, &params).map, coco_map(&p2, &g2, &params).map);
    }

    #[test]
    fn ground_truth_as_predictions_is_perfect(gt in boxes()) {
        let params = CocoParams::default();
        let (p, g) = build(&gt, &gt, 1.0);
        let m = coco_map(&p, &g, &params);
        prop_assert_eq!(m.map, Some(1.0));
        prop_assert_eq!(m.unmatched_ground_truth, 0);
    }

    #[test]
    fn inclusive_threshold_never_lowers_rec(gt in boxes(), pr in boxes()) {
        let queries: Vec<RecQuery> = gt
            .iter()
            .enumerate()
            .map(|(i, (_, b))| RecQuery { query_id: i.to_string(), split: "val".into(), bbox: to_box(*b, 1.0) })
            .collect();
        let answers: Vec<RecAnswer> = queries
            .iter()
            .zip(pr.iter().cycle())
            .map(|(q, (_, b))| RecAnswer { query_id: q.query_id.clone(), bbox: Some(to_box(*b, 1.0)) })
            .collect();
        let strict = rec_accuracy(&answers, &queries, RecOptions { iou_geq: false }).unwrap();
        let geq = rec_accuracy(&answers, &queries, RecOptions { iou_geq: true }).unwrap();
        prop_assert!(geq.overall.correct >= strict.overall.correct);
    }
}

#[test]
fn no_predictions_scores_zero() {
    let g = vec![GroundTruthBox { image_id: "im".into(), label: "cat".into(), bbox: BBox::pixels(0.0, 0.0, 10.0, 10.0) }];
    let m = coco_map(&[], &g, &CocoParams::default());
    assert_eq!(m.map, Some(0.0));
    assert_eq!(m.unmatched_ground_truth, 1);
}
