//! Grounding reorganization: each image becomes one query over 0-10 labels,
//! mixing labels present in the image with labels known to be absent.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::model::{
    normalize_whitespace, LabeledBoxes, Payload, TaskKind, TaskSample, MAX_GROUNDING_QUERIES,
};
use crate::seed::keyed_rng;

pub fn grounding_sample_id(image_id: &str) -> String {
    format!("{image_id}#grd")
}

/// Chooses `k` query labels: positives first (a random subset of the image's
/// labels), then absent labels drawn from `absent` to fill the rest.
pub fn choose_queries<R: Rng>(
    present: &[String],
    absent: &[String],
    k: usize,
    rng: &mut R,
) -> (Vec<String>, Vec<String>) {
    let p = k.min(present.len());
    let n = (k - p).min(absent.len());
    let pos = present.choose_multiple(rng, p).cloned().collect();
    let neg = absent.choose_multiple(rng, n).cloned().collect();
    (pos, neg)
}

/// Reorganizes detection samples into grounding samples.
///
/// The absent-label pool is every label seen across `detections` plus the
/// image's own no-target expressions. For each image `k` is drawn uniformly
/// from `0..=min(10, present + absent)`. Output is deterministic in `seed`
/// and independent of input order.
pub fn reorganize_grounding(
    detections: &[TaskSample],
    negatives: &BTreeMap<String, Vec<String>>,
    seed: u64,
) -> Vec<TaskSample> {
    let pool: BTreeSet<&str> = detections
        .iter()
        .flat_map(|s| s.labels())
        .collect();
    detections
        .iter()
        .filter_map(|s| {
            let (Payload::Detection { width, height, objects }, Some(image_id)) =
                (&s.payload, &s.image_id)
            else {
                return None;
            };
            let present: Vec<String> = objects.iter().map(|o| o.label.clone()).collect();
            let mut absent: BTreeSet<String> = pool
                .iter()
                .filter(|l| !present.iter().any(|p| p == *l))
                .map(|l| l.to_string())
                .collect();
            for n in negatives.get(image_id).into_iter().flatten() {
                let n = normalize_whitespace(&n.to_lowercase());
                if !present.contains(&n) {
                    absent.insert(n);
                }
            }
            let absent: Vec<String> = absent.into_iter().collect();
            let mut rng = keyed_rng(seed, &grounding_sample_id(image_id));
            let k_max = MAX_GROUNDING_QUERIES.min(present.len() + absent.len());
            let k = rng.gen_range(0..=k_max);
            let (pos, neg) = choose_queries(&present, &absent, k, &mut rng);
            let mut queries: Vec<LabeledBoxes> = objects
                .iter()
                .filter(|o| pos.contains(&o.label))
                .cloned()
                .chain(neg.into_iter().map(|label| LabeledBoxes {
                    label,
                    boxes: Vec::new(),
                }))
                .collect();
            queries.sort_by(|a, b| a.label.cmp(&b.label));
            Some(
                TaskSample::new(
                    grounding_sample_id(image_id),
                    TaskKind::Grounding,
                    Some(image_id.clone()),
                    Payload::Grounding {
                        width: *width,
                        height: *height,
                        queries,
                    },
                )
                .expect("at most 10 distinct queries"),
            )
        })
        .collect()
}
