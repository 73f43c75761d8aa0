//! JSONL loaders for `forge eval`.
//!
//! Ground truth is either canonical `samples.jsonl` rows (anything with a
//! `kind`) or flat rows. Predictions are either raw model text, parsed with
//! the conversation grammar, or pre-parsed boxes:
//!
//! | task      | flat ground truth                      | prediction                                          |
//! |-----------|----------------------------------------|-----------------------------------------------------|
//! | detection | `{image_id, label, bbox, width?, height?}` | `{image_id, raw_text}` or `{image_id, label, bbox, score?}` |
//! | rec       | `{query_id, bbox, split?, width?, height?}` | `{query_id, raw_text}` or `{query_id, bbox}`        |
//! | counting  | `{query_id, count}`                    | `{query_id, raw_text}` or `{query_id, count}`        |
//!
//! `sample_id` is accepted wherever `query_id` is. Raw-text grid boxes are
//! mapped back to pixels with the image size from the ground truth or the
//! prediction row.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    coco_map, counting_mae, rec_accuracy, CocoParams, EvalError, EvalReport, GroundTruthBox,
    Prediction, RecAnswer, RecOptions, RecQuery,
};
use crate::convo::parse_localization;
use crate::model::{from_grid, records, BBox, Payload, TaskSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Detection,
    Rec,
    Counting,
}

impl FromStr for EvalTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "detection" => Ok(EvalTask::Detection),
            "rec" => Ok(EvalTask::Rec),
            "counting" => Ok(EvalTask::Counting),
            other => Err(format!("unknown eval task {other:?}")),
        }
    }
}

type Sizes = BTreeMap<String, (u32, u32)>;

fn field<T: DeserializeOwned>(v: &Value, key: &str) -> Option<T> {
    v.get(key).and_then(|x| serde_json::from_value(x.clone()).ok())
}

fn query_id(v: &Value) -> Option<String> {
    field(v, "query_id").or_else(|| field(v, "sample_id"))
}

fn gt_err(n: usize, message: impl Into<String>) -> EvalError {
    EvalError::InvalidGroundTruth {
        locator: format!("record {n}"),
        message: message.into(),
    }
}

fn pred_err(n: usize, message: impl Into<String>) -> EvalError {
    EvalError::InvalidPrediction {
        locator: format!("record {n}"),
        message: message.into(),
    }
}

fn sample(v: &Value, n: usize) -> Result<Option<TaskSample>, EvalError> {
    if v.get("kind").is_none() {
        return Ok(None);
    }
    serde_json::from_value(v.clone())
        .map(Some)
        .map_err(|e| gt_err(n, e.to_string()))
}

fn size_of(v: &Value) -> Option<(u32, u32)> {
    Some((field(v, "width")?, field(v, "height")?))
}

/// Grid boxes in raw text, mapped to pixels.
fn raw_boxes(text: &str, size: Option<(u32, u32)>, bins: u32, n: usize) -> Result<Vec<(String, BBox)>, EvalError> {
    let Ok(parsed) = parse_localization(text, bins) else {
        return Ok(Vec::new());
    };
    let boxes: Vec<_> = parsed.boxes().map(|(l, b)| (l.to_string(), *b)).collect();
    if boxes.is_empty() {
        return Ok(boxes);
    }
    let (w, h) = size.ok_or_else(|| pred_err(n, "raw_text needs the image size (width/height)"))?;
    Ok(boxes
        .into_iter()
        .map(|(l, b)| (l, from_grid(b, w as f64, h as f64)))
        .collect())
}

pub fn load_detection_gt(rows: &[Value]) -> Result<(Vec<GroundTruthBox>, Sizes), EvalError> {
    let mut gts = Vec::new();
    let mut sizes = Sizes::new();
    for (i, v) in rows.iter().enumerate() {
        let n = i + 1;
        if let Some(s) = sample(v, n)? {
            let image_id = s.image_id.clone().ok_or_else(|| gt_err(n, "sample without image"))?;
            let entries = match &s.payload {
                Payload::Detection { width, height, objects } => {
                    sizes.insert(image_id.clone(), (*width, *height));
                    objects
                }
                Payload::Grounding { width, height, queries } => {
                    sizes.insert(image_id.clone(), (*width, *height));
                    queries
                }
                _ => return Err(gt_err(n, format!("{} is not a detection sample", s.kind))),
            };
            for e in entries {
                for b in &e.boxes {
                    gts.push(GroundTruthBox { image_id: image_id.clone(), label: e.label.clone(), bbox: *b });
                }
            }
        } else {
            let (Some(image_id), Some(label), Some(bbox)) =
                (field::<String>(v, "image_id"), field::<String>(v, "label"), field::<BBox>(v, "bbox"))
            else {
                return Err(gt_err(n, "expected image_id, label and bbox"));
            };
            if let Some(sz) = size_of(v) {
                sizes.insert(image_id.clone(), sz);
            }
            gts.push(GroundTruthBox { image_id, label, bbox });
        }
    }
    Ok((gts, sizes))
}

pub fn load_detection_preds(rows: &[Value], sizes: &Sizes, bins: u32) -> Result<Vec<Prediction>, EvalError> {
    let mut preds = Vec::new();
    for (i, v) in rows.iter().enumerate() {
        let n = i + 1;
        let image_id: String = field(v, "image_id").ok_or_else(|| pred_err(n, "missing image_id"))?;
        if let Some(text) = field::<String>(v, "raw_text") {
            let size = size_of(v).or_else(|| sizes.get(&image_id).copied());
            for (label, b) in raw_boxes(&text, size, bins, n)? {
                let rank = preds.len();
                preds.push(Prediction::new(&image_id, &label, b, 1.0, rank)?);
            }
        } else {
            let (Some(label), Some(b)) = (field::<String>(v, "label"), field::<BBox>(v, "bbox")) else {
                return Err(pred_err(n, "expected raw_text or label and bbox"));
            };
            let score = field(v, "score").unwrap_or(1.0);
            let rank = preds.len();
            preds.push(Prediction::new(&image_id, &label, b, score, rank)?);
        }
    }
    Ok(preds)
}

pub fn load_rec_gt(rows: &[Value]) -> Result<(Vec<RecQuery>, Sizes), EvalError> {
    let mut out = Vec::new();
    let mut sizes = Sizes::new();
    for (i, v) in rows.iter().enumerate() {
        let n = i + 1;
        if let Some(s) = sample(v, n)? {
            let Payload::Rec { width, height, bbox, .. } = &s.payload else {
                return Err(gt_err(n, format!("{} is not a REC sample", s.kind)));
            };
            sizes.insert(s.sample_id.clone(), (*width, *height));
            let split = s.source().map_or_else(|| "default".to_string(), |src| src.to_string());
            out.push(RecQuery { query_id: s.sample_id.clone(), split, bbox: *bbox });
        } else {
            let (Some(query_id), Some(bbox)) = (query_id(v), field::<BBox>(v, "bbox")) else {
                return Err(gt_err(n, "expected query_id and bbox"));
            };
            if let Some(sz) = size_of(v) {
                sizes.insert(query_id.clone(), sz);
            }
            let split = field(v, "split").unwrap_or_else(|| "default".to_string());
            out.push(RecQuery { query_id, split, bbox });
        }
    }
    Ok((out, sizes))
}

pub fn load_rec_answers(rows: &[Value], sizes: &Sizes, bins: u32) -> Result<Vec<RecAnswer>, EvalError> {
    rows.iter()
        .enumerate()
        .map(|(i, v)| {
            let n = i + 1;
            let query_id = query_id(v).ok_or_else(|| pred_err(n, "missing query_id"))?;
            let bbox = if let Some(text) = field::<String>(v, "raw_text") {
                let size = size_of(v).or_else(|| sizes.get(&query_id).copied());
                raw_boxes(&text, size, bins, n)?.into_iter().next().map(|(_, b)| b)
            } else {
                field::<Option<BBox>>(v, "bbox").flatten()
            };
            Ok(RecAnswer { query_id, bbox })
        })
        .collect()
}

pub fn load_counting_gt(rows: &[Value]) -> Result<BTreeMap<String, u64>, EvalError> {
    let mut out = BTreeMap::new();
    for (i, v) in rows.iter().enumerate() {
        let n = i + 1;
        if let Some(s) = sample(v, n)? {
            let Payload::Counting { boxes, .. } = &s.payload else {
                return Err(gt_err(n, format!("{} is not a counting sample", s.kind)));
            };
            out.insert(s.sample_id.clone(), boxes.len() as u64);
        } else {
            let (Some(q), Some(c)) = (query_id(v), field::<u64>(v, "count")) else {
                return Err(gt_err(n, "expected query_id and count"));
            };
            out.insert(q, c);
        }
    }
    Ok(out)
}

/// Predicted counts are the number of parsed boxes, not any stated total.
pub fn load_counting_preds(rows: &[Value], bins: u32) -> Result<BTreeMap<String, u64>, EvalError> {
    let mut out = BTreeMap::new();
    for (i, v) in rows.iter().enumerate() {
        let n = i + 1;
        let q = query_id(v).ok_or_else(|| pred_err(n, "missing query_id"))?;
        let c = if let Some(text) = field::<String>(v, "raw_text") {
            parse_localization(&text, bins).map_or(0, |p| p.boxes().count() as u64)
        } else {
            field(v, "count").ok_or_else(|| pred_err(n, "expected raw_text or count"))?
        };
        out.entry(q).or_insert(c);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub task: EvalTask,
    pub bins: u32,
    pub coco: CocoParams,
    pub rec: RecOptions,
}

pub fn evaluate_rows(req: &EvalRequest, preds: &[Value], gt: &[Value]) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport::default();
    match req.task {
        EvalTask::Detection => {
            let (gts, sizes) = load_detection_gt(gt)?;
            let p = load_detection_preds(preds, &sizes, req.bins)?;
            report.detection = Some(coco_map(&p, &gts, &req.coco));
        }
        EvalTask::Rec => {
            let (gts, sizes) = load_rec_gt(gt)?;
            let a = load_rec_answers(preds, &sizes, req.bins)?;
            report.rec = Some(rec_accuracy(&a, &gts, req.rec)?);
        }
        EvalTask::Counting => {
            let g = load_counting_gt(gt)?;
            let p = load_counting_preds(preds, req.bins)?;
            report.counting = Some(counting_mae(&p, &g));
        }
    }
    Ok(report)
}

pub fn evaluate_files(req: &EvalRequest, preds: &Path, gt: &Path) -> Result<EvalReport, EvalError> {
    let p: Vec<Value> = records::read_jsonl(preds)?;
    let g: Vec<Value> = records::read_jsonl(gt)?;
    evaluate_rows(req, &p, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn req(task: EvalTask) -> EvalRequest {
        EvalRequest { task, bins: 1000, coco: CocoParams::default(), rec: RecOptions { iou_geq: false } }
    }

    #[test]
    fn detection_from_raw_text_and_samples() {
        let gt = vec![json!({
            "sample_id": "mscoco:1#det", "kind": "Detection", "image_id": "mscoco:1",
            "payload": {"width": 200, "height": 100, "objects": [{"label": "dog", "boxes": [[0, 0, 100, 50]]}]}
        })];
        let preds = vec![json!({"image_id": "mscoco:1", "raw_text": "dog-[0, 0, 500, 500]"})];
        let r = evaluate_rows(&req(EvalTask::Detection), &preds, &gt).unwrap();
        assert_eq!(r.detection.unwrap().map, Some(1.0));
    }

    #[test]
    fn rec_flat_rows() {
        let gt = vec![
            json!({"query_id": "q1", "bbox": [0, 0, 10, 10], "split": "val", "width": 100, "height": 100}),
            json!({"query_id": "q2", "bbox": [0, 0, 10, 10], "width": 100, "height": 100}),
        ];
        let preds = vec![
            json!({"query_id": "q1", "raw_text": "It is at [0, 0, 100, 100]."}),
            json!({"query_id": "q2", "raw_text": "no idea"}),
        ];
        let r = evaluate_rows(&req(EvalTask::Rec), &preds, &gt).unwrap().rec.unwrap();
        assert_eq!((r.overall.correct, r.overall.total, r.unparsed), (1, 2, 1));
        assert!(r.per_split.contains_key("val") && r.per_split.contains_key("default"));
    }

    #[test]
    fn counting_counts_parsed_boxes() {
        let gt = vec![json!({"query_id": "c1", "count": 3})];
        let preds = vec![json!({"query_id": "c1", "raw_text": "person-[0, 0, 10, 10][10, 10, 20, 20]\n7"})];
        let r = evaluate_rows(&req(EvalTask::Counting), &preds, &gt).unwrap().counting.unwrap();
        assert_eq!(r.mae, 1.0);
    }

    #[test]
    fn raw_text_without_size_is_rejected() {
        let gt = vec![json!({"image_id": "x", "label": "dog", "bbox": [0, 0, 1, 1]})];
        let preds = vec![json!({"image_id": "x", "raw_text": "dog-[0, 0, 1, 1]"})];
        assert!(matches!(
            evaluate_rows(&req(EvalTask::Detection), &preds, &gt),
            Err(EvalError::InvalidPrediction { .. })
        ));
    }
}
