//! Scoring of parsed predictions: COCO-style AP for detection, top-1
//! accuracy at IoU 0.5 for REC, and mean absolute error for counting.

pub mod coco;
pub mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coco::{coco_map, AreaRange, CocoParams, DetectionMetrics};

use crate::model::{iou, BBox, RecordError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query {0} has ground truth but no prediction record")]
    MissingQuery(String),
    #[error("invalid prediction {locator}: {message}")]
    InvalidPrediction { locator: String, message: String },
    #[error("invalid ground truth {locator}: {message}")]
    InvalidGroundTruth { locator: String, message: String },
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// One predicted box in absolute pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub label: String,
    pub bbox: BBox,
    pub score: f64,
    /// Emission order; breaks score ties.
    pub rank: usize,
}

impl Prediction {
    pub fn new(image_id: &str, label: &str, bbox: BBox, score: f64, rank: usize) -> Result<Self, EvalError> {
        let bad = |message: String| EvalError::InvalidPrediction {
            locator: format!("{image_id} rank {rank}"),
            message,
        };
        if !(0.0..=1.0).contains(&score) {
            return Err(bad(format!("score {score} outside [0, 1]")));
        }
        if !bbox.coords().iter().all(|v| v.is_finite()) || bbox.x1 > bbox.x2 || bbox.y1 > bbox.y2 {
            return Err(bad(format!("invalid box {:?}", bbox.coords())));
        }
        Ok(Self {
            image_id: image_id.to_string(),
            label: label.to_string(),
            bbox,
            score,
            rank,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub label: String,
    pub bbox: BBox,
}

/// Ground truth for one REC query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecQuery {
    pub query_id: String,
    #[serde(default = "default_split")]
    pub split: String,
    pub bbox: BBox,
}

fn default_split() -> String {
    "default".to_string()
}

/// The top-1 box for a REC query; `None` when nothing could be parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecAnswer {
    pub query_id: String,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecOptions {
    /// Count IoU exactly at the threshold as correct.
    pub iou_geq: bool,
}

pub const REC_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
}

impl SplitAccuracy {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as u64;
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecReport {
    pub overall: SplitAccuracy,
    pub per_split: BTreeMap<String, SplitAccuracy>,
    pub unparsed: u64,
    /// Answers whose query has no ground truth.
    pub extra_answers: u64,
}

/// Fraction of queries whose top-1 box has IoU above 0.5 with the ground
/// truth. Unparseable answers count as wrong; a query with no answer record at
/// all is an error. When several records answer one query the first is used.
pub fn rec_accuracy(answers: &[RecAnswer], gts: &[RecQuery], opts: RecOptions) -> Result<RecReport, EvalError> {
    let mut first: BTreeMap<&str, &RecAnswer> = BTreeMap::new();
    for a in answers {
        first.entry(a.query_id.as_str()).or_insert(a);
    }
    let mut overall = SplitAccuracy::default();
    let mut per_split: BTreeMap<String, SplitAccuracy> = BTreeMap::new();
    let mut unparsed = 0;
    for q in gts {
        let a = first
            .get(q.query_id.as_str())
            .ok_or_else(|| EvalError::MissingQuery(q.query_id.clone()))?;
        let ok = match &a.bbox {
            None => {
                unparsed += 1;
                false
            }
            Some(b) => {
                let v = iou(b, &q.bbox);
                if opts.iou_geq {
                    v >= REC_IOU_THRESHOLD
                } else {
                    v > REC_IOU_THRESHOLD
                }
            }
        };
        overall.add(ok);
        per_split.entry(q.split.clone()).or_default().add(ok);
    }
    let known: std::collections::BTreeSet<&str> = gts.iter().map(|q| q.query_id.as_str()).collect();
    Ok(RecReport {
        overall,
        per_split,
        unparsed,
        extra_answers: first.keys().filter(|k| !known.contains(*k)).count() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingReport {
    pub mae: f64,
    pub queries: u64,
    /// Queries with no prediction record, scored as a count of zero.
    pub missing: u64,
}

/// Mean absolute count error over the ground-truth queries. A query without
/// a prediction counts as predicting zero.
pub fn counting_mae(preds: &BTreeMap<String, u64>, gts: &BTreeMap<String, u64>) -> CountingReport {
    let mut missing = 0;
    let total: u64 = gts
        .iter()
        .map(|(q, &g)| {
            let p = preds.get(q).copied().unwrap_or_else(|| {
                missing += 1;
                0
            });
            p.abs_diff(g)
        })
        .sum();
    CountingReport {
        mae: if gts.is_empty() { 0.0 } else { total as f64 / gts.len() as f64 },
        queries: gts.len() as u64,
        missing,
    }
}

/// Everything `forge eval` can report; sections not evaluated are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec: Option<RecReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counting: Option<CountingReport>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, split: &str, b: [f64; 4]) -> RecQuery {
        RecQuery { query_id: id.into(), split: split.into(), bbox: BBox::pixels(b[0], b[1], b[2], b[3]) }
    }

    fn a(id: &str, b: Option<[f64; 4]>) -> RecAnswer {
        RecAnswer { query_id: id.into(), bbox: b.map(|b| BBox::pixels(b[0], b[1], b[2], b[3])) }
    }

    #[test]
    fn rec_strict_threshold() {
        let gts = vec![q("1", "val", [0., 0., 100., 100.]), q("2", "testA", [0., 0., 100., 100.]), q("3", "val", [0., 0., 10., 10.])];
        // Query 2: 50 x 100 inside 100 x 100, IoU exactly 0.5.
        let answers = vec![a("1", Some([0., 0., 100., 100.])), a("2", Some([0., 0., 50., 100.])), a("3", None)];
        let r = rec_accuracy(&answers, &gts, RecOptions { iou_geq: false }).unwrap();
        assert_eq!((r.overall.correct, r.overall.total, r.unparsed), (1, 3, 1));
        assert_eq!(r.per_split["val"].correct, 1);
        assert_eq!(r.per_split["testA"].correct, 0);
        let r = rec_accuracy(&answers, &gts, RecOptions { iou_geq: true }).unwrap();
        assert_eq!(r.overall.correct, 2);
    }

    #[test]
    fn rec_missing_query() {
        let gts = vec![q("1", "val", [0., 0., 1., 1.])];
        assert!(matches!(
            rec_accuracy(&[], &gts, RecOptions { iou_geq: false }),
            Err(EvalError::MissingQuery(id)) if id == "1"
        ));
    }

    #[test]
    fn counting() {
        let m = |v: &[(&str, u64)]| v.iter().map(|(k, n)| (k.to_string(), *n)).collect::<BTreeMap<_, _>>();
        assert_eq!(counting_mae(&m(&[("a", 3), ("b", 2)]), &m(&[("a", 3), ("b", 2)])).mae, 0.0);
        assert_eq!(counting_mae(&m(&[("a", 3), ("b", 2)]), &m(&[("a", 5), ("b", 2)])).mae, 1.0);
        let r = counting_mae(&m(&[]), &m(&[("a", 4)]));
        assert_eq!((r.mae, r.missing), (4.0, 1));
    }

    #[test]
    fn prediction_validation() {
        assert!(Prediction::new("i", "l", BBox::pixels(0., 0., 1., 1.), 1.5, 0).is_err());
        assert!(Prediction::new("i", "l", BBox::pixels(2., 0., 1., 1.), 0.5, 0).is_err());
        assert!(Prediction::new("i", "l", BBox::pixels(0., 0., 1., 1.), 0.0, 0).is_ok());
    }
}
