//! COCO-style average precision over labelled boxes.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GroundTruthBox, Prediction};
use crate::model::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CocoParams {
    pub iou_thresholds: Vec<f64>,
    /// Number of evenly spaced recall points in `[0, 1]`, both ends included.
    pub recall_points: usize,
    /// Areas below this are small.
    pub small_max_area: f64,
    /// Areas below this (and not small) are medium; the rest are large.
    pub medium_max_area: f64,
    /// Highest-scoring predictions kept per image and category.
    pub max_dets: usize,
}

impl Default for CocoParams {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            small_max_area: 32.0 * 32.0,
            medium_max_area: 96.0 * 96.0,
            max_dets: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const ALL: [AreaRange; 4] = [AreaRange::All, AreaRange::Small, AreaRange::Medium, AreaRange::Large];

    pub fn contains(self, area: f64, p: &CocoParams) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < p.small_max_area,
            AreaRange::Medium => area >= p.small_max_area && area < p.medium_max_area,
            AreaRange::Large => area >= p.medium_max_area,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched an out-of-range GT, or unmatched and itself out of range.
    Ignored,
}

/// Greedy matching of score-sorted predictions against one image's GTs for a
/// single category. Each prediction takes the unmatched GT with the highest
/// IoU at or above `threshold`; ties go to the earlier GT. In-range GTs are
/// preferred over out-of-range ones. Returns one outcome per prediction and
/// the number of in-range GTs.
pub fn match_image(
    dts: &[&Prediction],
    gts: &[&GroundTruthBox],
    ious: &[Vec<f64>],
    threshold: f64,
    area: AreaRange,
    p: &CocoParams,
) -> (Vec<Outcome>, u64) {
    let ignored: Vec<bool> = gts.iter().map(|g| !area.contains(g.bbox.area(), p)).collect();
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| ignored[g]);
    let mut taken = vec![false; gts.len()];
    let outcomes = dts
        .iter()
        .enumerate()
        .map(|(d, dt)| {
            let mut best: Option<(usize, f64)> = None;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if let Some((b, _)) = best {
                    if !ignored[b] && ignored[g] {
                        break;
                    }
                }
                let v = ious[d][g];
                if v < threshold {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    if ignored[g] {
                        Outcome::Ignored
                    } else {
                        Outcome::TruePositive
                    }
                }
                None if !area.contains(dt.bbox.area(), p) => Outcome::Ignored,
                None => Outcome::FalsePositive,
            }
        })
        .collect();
    (outcomes, ignored.iter().filter(|i| !**i).count() as u64)
}

/// Interpolated AP from outcomes already sorted by confidence.
///
/// Precision is made monotone from the right, then sampled at the first
/// position whose recall reaches each recall point; recall points that are
/// never reached contribute zero. Recall comparisons are done in integers.
pub fn interpolated_ap(outcomes: &[Outcome], n_gt: u64, recall_points: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = Vec::new();
    let mut precision = Vec::new();
    let (mut t, mut f) = (0u64, 0u64);
    for o in outcomes {
        match o {
            Outcome::TruePositive => t += 1,
            Outcome::FalsePositive => f += 1,
            Outcome::Ignored => continue,
        }
        tp.push(t);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let steps = (recall_points.max(2) - 1) as u64;
    let mut sum = 0.0;
    let mut j = 0;
    for i in 0..=steps {
        // recall >= i / steps  <=>  tp * steps >= i * n_gt
        while j < tp.len() && tp[j] * steps < i * n_gt {
            j += 1;
        }
        if j < tp.len() {
            sum += precision[j];
        }
    }
    Some(sum / (steps + 1) as f64)
}

/// Per-category results: `ap[area][threshold]`, `None` where the category has
/// no in-range GT.
#[derive(Debug, Clone)]
pub struct CategoryEval {
    pub label: String,
    pub ap: BTreeMap<AreaRange, Vec<Option<f64>>>,
    /// Counts at the first threshold over all areas.
    pub matched: u64,
    pub unmatched_predictions: u64,
    pub unmatched_ground_truth: u64,
}

/// Ranks predictions by score, then input rank.
pub fn confidence_order(a: &Prediction, b: &Prediction) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.rank.cmp(&b.rank))
}

pub fn evaluate_category(
    label: &str,
    preds: &[&Prediction],
    gts: &[&GroundTruthBox],
    p: &CocoParams,
) -> CategoryEval {
    let mut by_image: BTreeMap<&str, (Vec<&Prediction>, Vec<&GroundTruthBox>)> = BTreeMap::new();
    for d in preds {
        by_image.entry(d.image_id.as_str()).or_default().0.push(d);
    }
    for g in gts {
        by_image.entry(g.image_id.as_str()).or_default().1.push(g);
    }
    struct Img<'a> {
        dts: Vec<&'a Prediction>,
        gts: Vec<&'a GroundTruthBox>,
        ious: Vec<Vec<f64>>,
    }
    let per_image: Vec<Img> = by_image
        .into_values()
        .map(|(mut dts, gts)| {
            dts.sort_by(|a, b| confidence_order(a, b));
            dts.truncate(p.max_dets);
            let ious = dts
                .iter()
                .map(|d| gts.iter().map(|g| iou(&d.bbox, &g.bbox)).collect())
                .collect();
            Img { dts, gts, ious }
        })
        .collect();

    let mut ap = BTreeMap::new();
    let mut counts = (0, 0, 0);
    for area in AreaRange::ALL {
        let mut row = Vec::with_capacity(p.iou_thresholds.len());
        for (ti, &t) in p.iou_thresholds.iter().enumerate() {
            let mut scored: Vec<(&Prediction, Outcome)> = Vec::new();
            let mut n_gt = 0;
            for img in &per_image {
                let (o, n) = match_image(&img.dts, &img.gts, &img.ious, t, area, p);
                n_gt += n;
                scored.extend(img.dts.iter().copied().zip(o));
            }
            scored.sort_by(|a, b| confidence_order(a.0, b.0));
            let outcomes: Vec<Outcome> = scored.iter().map(|s| s.1).collect();
            if area == AreaRange::All && ti == 0 {
                let tp = outcomes.iter().filter(|o| **o == Outcome::TruePositive).count() as u64;
                let fp = outcomes.iter().filter(|o| **o == Outcome::FalsePositive).count() as u64;
                counts = (tp, fp, n_gt - tp);
            }
            row.push(interpolated_ap(&outcomes, n_gt, p.recall_points));
        }
        ap.insert(area, row);
    }
    CategoryEval {
        label: label.to_string(),
        ap,
        matched: counts.0,
        unmatched_predictions: counts.1,
        unmatched_ground_truth: counts.2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// `None` when no category has ground truth in the relevant range.
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub aps: Option<f64>,
    pub apm: Option<f64>,
    pub apl: Option<f64>,
    /// AP averaged over thresholds, all areas.
    pub per_category: BTreeMap<String, f64>,
    pub matched: u64,
    pub unmatched_predictions: u64,
    pub unmatched_ground_truth: u64,
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores predictions against ground truth. Categories come from the ground
/// truth; predictions for other labels are reported in `warnings`.
pub fn coco_map(preds: &[Prediction], gts: &[GroundTruthBox], p: &CocoParams) -> DetectionMetrics {
    let labels: BTreeSet<&str> = gts.iter().map(|g| g.label.as_str()).collect();
    let warnings: Vec<String> = preds
        .iter()
        .map(|d| d.label.as_str())
        .filter(|l| !labels.contains(l))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|l| format!("EmptyGroundTruth: category {l:?} has predictions but no ground truth; skipped"))
        .collect();
    let cats: Vec<CategoryEval> = labels
        .par_iter()
        .map(|l| {
            let d: Vec<&Prediction> = preds.iter().filter(|x| x.label == *l).collect();
            let g: Vec<&GroundTruthBox> = gts.iter().filter(|x| x.label == *l).collect();
            evaluate_category(l, &d, &g, p)
        })
        .collect();

    let at = |area: AreaRange, ti: Option<usize>| {
        mean(cats.iter().flat_map(|c| {
            let row = &c.ap[&area];
            match ti {
                Some(i) => row.get(i).copied().flatten().into_iter().collect::<Vec<_>>(),
                None => row.iter().flatten().copied().collect(),
            }
        }))
    };
    let index_of = |t: f64| p.iou_thresholds.iter().position(|x| (x - t).abs() < 1e-9);
    DetectionMetrics {
        map: at(AreaRange::All, None),
        ap50: index_of(0.5).and_then(|i| at(AreaRange::All, Some(i))),
        ap75: index_of(0.75).and_then(|i| at(AreaRange::All, Some(i))),
        aps: at(AreaRange::Small, None),
        apm: at(AreaRange::Medium, None),
        apl: at(AreaRange::Large, None),
        per_category: cats
            .iter()
            .filter_map(|c| mean(c.ap[&AreaRange::All].iter().flatten().copied()).map(|v| (c.label.clone(), v)))
            .collect(),
        matched: cats.iter().map(|c| c.matched).sum(),
        unmatched_predictions: cats.iter().map(|c| c.unmatched_predictions).sum(),
        unmatched_ground_truth: cats.iter().map(|c| c.unmatched_ground_truth).sum(),
        warnings,
    }
}
