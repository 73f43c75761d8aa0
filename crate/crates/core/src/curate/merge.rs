//! Task-level curation: all localized regions of one image become a single
//! detection-format sample.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::classify::{head_noun, Lexicon};
use super::CurateError;
use crate::model::{
    iou, normalize_whitespace, AnnotatedImage, BBox, LabeledBoxes, Payload, RegionAnnotation,
    TaskKind, TaskSample,
};

/// Default IoU at or above which two same-label boxes count as one object.
pub const DEFAULT_DEDUP_IOU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub sample: TaskSample,
    pub input_boxes: u64,
    pub emitted_boxes: u64,
    pub deduped_boxes: u64,
}

/// Label a region is grouped under: its category when present, else the head
/// noun of its expression.
pub fn region_label(r: &RegionAnnotation, lex: &Lexicon) -> Option<String> {
    match &r.category {
        Some(c) => Some(normalize_whitespace(&c.to_lowercase())).filter(|c| !c.is_empty()),
        None => head_noun(&r.expression, lex),
    }
}

/// Total order on boxes: `(x1, y1)` then `(x2, y2)`.
pub fn box_order(a: &BBox, b: &BBox) -> Ordering {
    a.x1.total_cmp(&b.x1)
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Keeps a box unless it overlaps an already kept box at `>= threshold`.
fn dedup_keep_first(boxes: &[BBox], threshold: f64) -> Vec<BBox> {
    let mut kept: Vec<BBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if !kept.iter().any(|k| iou(k, b) >= threshold) {
            kept.push(*b);
        }
    }
    kept
}

pub fn detection_sample_id(image_id: &str) -> String {
    format!("{image_id}#det")
}

/// Groups an image's regions by label, dedups near-identical boxes within a
/// label (first one wins) and emits labels sorted lexicographically with boxes
/// sorted by position.
pub fn merge_to_detection(
    img: &AnnotatedImage,
    lex: &Lexicon,
    dedup_iou: f64,
) -> Result<MergeOutcome, CurateError> {
    let mut groups: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for r in &img.regions {
        if let Some(label) = region_label(r, lex) {
            groups.entry(label).or_default().push(r.bbox);
        }
    }
    let input_boxes = groups.values().map(|v| v.len() as u64).sum::<u64>();
    if input_boxes == 0 {
        return Err(CurateError::NoRegions(img.image_id.clone()));
    }
    let objects: Vec<LabeledBoxes> = groups
        .into_iter()
        .map(|(label, boxes)| {
            let mut kept = dedup_keep_first(&boxes, dedup_iou);
            kept.sort_by(box_order);
            LabeledBoxes { label, boxes: kept }
        })
        .collect();
    let emitted_boxes = objects.iter().map(|o| o.boxes.len() as u64).sum::<u64>();
    let sample = TaskSample::new(
        detection_sample_id(&img.image_id),
        TaskKind::Detection,
        Some(img.image_id.clone()),
        Payload::Detection {
            width: img.width,
            height: img.height,
            objects,
        },
    )
    .expect("labels come from a map and are distinct");
    Ok(MergeOutcome {
        sample,
        input_boxes,
        emitted_boxes,
        deduped_boxes: input_boxes - emitted_boxes,
    })
}
