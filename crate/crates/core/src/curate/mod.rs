//! Task-level and annotation-level curation.
//!
//! Task level merges every localized region of an image into one detection
//! sample and reorganizes those into multi-label grounding queries. Annotation
//! level classifies region descriptions, drops class-level ones and turns the
//! rest into REG samples (detailed ones are flagged so rendering can add a
//! responsive phrase). Referring sources additionally pass through as REC.

pub mod classify;
pub mod grounding;
pub mod merge;

use std::collections::BTreeMap;
use std::ops::AddAssign;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classify::{classify_expression, head_noun, tokenize, ExpressionClass, ExpressionLevel, Lexicon};
pub use grounding::reorganize_grounding;
pub use merge::{merge_to_detection, MergeOutcome, DEFAULT_DEDUP_IOU};

use crate::model::{
    AnnotatedImage, DetailLevel, Payload, RegDetail, SourceName, TaskKind, TaskSample,
};

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("empty expression")]
    EmptyExpression,
    #[error("image {0} has no labeled regions")]
    NoRegions(String),
    #[error("lexicon {path}: {message}")]
    Lexicon { path: PathBuf, message: String },
}

/// Per-source task-level counts. `input_regions == merged_boxes + deduped_boxes`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLevelCounts {
    pub input_regions: u64,
    pub merged_samples: u64,
    pub merged_boxes: u64,
    pub deduped_boxes: u64,
}

/// Per-source annotation-level counts. `input_regions` equals the sum of the
/// four outcome counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationLevelCounts {
    pub input_regions: u64,
    pub dropped_class_level: u64,
    pub dropped_unparseable: u64,
    pub retained_concise: u64,
    pub retained_detailed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub task_level: TaskLevelCounts,
    pub annotation_level: AnnotationLevelCounts,
    pub rec_samples: u64,
    pub grounding_samples: u64,
}

impl AddAssign for SourceCounts {
    fn add_assign(&mut self, o: Self) {
        let t = &mut self.task_level;
        t.input_regions += o.task_level.input_regions;
        t.merged_samples += o.task_level.merged_samples;
        t.merged_boxes += o.task_level.merged_boxes;
        t.deduped_boxes += o.task_level.deduped_boxes;
        let a = &mut self.annotation_level;
        a.input_regions += o.annotation_level.input_regions;
        a.dropped_class_level += o.annotation_level.dropped_class_level;
        a.dropped_unparseable += o.annotation_level.dropped_unparseable;
        a.retained_concise += o.annotation_level.retained_concise;
        a.retained_detailed += o.annotation_level.retained_detailed;
        self.rec_samples += o.rec_samples;
        self.grounding_samples += o.grounding_samples;
    }
}

impl SourceCounts {
    pub fn conserved(&self) -> bool {
        let t = &self.task_level;
        let a = &self.annotation_level;
        t.input_regions == t.merged_boxes + t.deduped_boxes
            && a.input_regions
                == a.dropped_class_level
                    + a.dropped_unparseable
                    + a.retained_concise
                    + a.retained_detailed
    }
}

/// Commutative per-source counters; ledgers from parallel workers merge by addition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationLedger {
    pub sources: BTreeMap<SourceName, SourceCounts>,
}

impl CurationLedger {
    pub fn entry(&mut self, s: SourceName) -> &mut SourceCounts {
        self.sources.entry(s).or_default()
    }

    pub fn merge(&mut self, other: CurationLedger) {
        for (s, c) in other.sources {
            *self.entry(s) += c;
        }
    }

    pub fn conserved(&self) -> bool {
        self.sources.values().all(SourceCounts::conserved)
    }

    pub fn total(&self) -> SourceCounts {
        let mut t = SourceCounts::default();
        for c in self.sources.values() {
            t += *c;
        }
        t
    }
}

/// Classifies every unclassified region. Levels already set are kept.
pub fn classify_regions(img: &mut AnnotatedImage, lex: &Lexicon) {
    for r in &mut img.regions {
        if r.detail_level != DetailLevel::Unclassified {
            continue;
        }
        if let Ok(c) = classify_expression(&r.expression, lex) {
            r.classify_once(c.level.into());
        }
    }
}

/// Annotation-level curation of one image's regions into REG samples.
/// Regions must already be classified; unclassified ones count as unparseable.
pub fn curate_reg(img: &AnnotatedImage, ledger: &mut CurationLedger) -> Vec<TaskSample> {
    let mut out = Vec::new();
    for (i, r) in img.regions.iter().enumerate() {
        let counts = &mut ledger.entry(r.source).annotation_level;
        counts.input_regions += 1;
        let detail = match r.detail_level {
            DetailLevel::ClassLevel => {
                counts.dropped_class_level += 1;
                continue;
            }
            DetailLevel::Unclassified => {
                counts.dropped_unparseable += 1;
                continue;
            }
            DetailLevel::Concise => {
                counts.retained_concise += 1;
                RegDetail::Concise
            }
            DetailLevel::Detailed => {
                counts.retained_detailed += 1;
                RegDetail::Detailed
            }
        };
        out.push(
            TaskSample::new(
                format!("{}#reg{i}", img.image_id),
                TaskKind::Reg,
                Some(img.image_id.clone()),
                Payload::Reg {
                    width: img.width,
                    height: img.height,
                    bbox: r.bbox,
                    description: r.expression.clone(),
                    detail,
                },
            )
            .expect("REG sample has an image"),
        );
    }
    out
}

/// One REC sample per region of a referring source.
pub fn rec_samples(img: &AnnotatedImage) -> Vec<TaskSample> {
    img.regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            TaskSample::new(
                format!("{}#rec{i}", img.image_id),
                TaskKind::Rec,
                Some(img.image_id.clone()),
                Payload::Rec {
                    width: img.width,
                    height: img.height,
                    expression: r.expression.clone(),
                    bbox: r.bbox,
                },
            )
            .expect("REC sample has an image")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CurateOptions {
    pub task_level: bool,
    pub annotation_level: bool,
    pub dedup_iou: f64,
    pub seed: u64,
    pub lexicon: Lexicon,
}

impl Default for CurateOptions {
    fn default() -> Self {
        Self {
            task_level: true,
            annotation_level: true,
            dedup_iou: DEFAULT_DEDUP_IOU,
            seed: 0,
            lexicon: Lexicon::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CurateOutput {
    /// Sorted by `sample_id`.
    pub samples: Vec<TaskSample>,
    /// Input images with region detail levels filled in.
    pub images: Vec<AnnotatedImage>,
    pub ledger: CurationLedger,
}

/// Curates a corpus. Routing follows each image's source: detection sources
/// are merged (and grounding sources reorganized) at task level, referring
/// sources pass through as REC, description sources go through
/// annotation-level REG curation. `passthrough` samples (captions, dialogues)
/// are carried unchanged. Merging never crosses sources.
pub fn curate(
    mut images: Vec<AnnotatedImage>,
    passthrough: Vec<TaskSample>,
    opts: &CurateOptions,
) -> CurateOutput {
    struct PerImage {
        detection: Option<TaskSample>,
        rest: Vec<TaskSample>,
        ledger: CurationLedger,
    }

    let per_image: Vec<PerImage> = images
        .par_iter_mut()
        .map(|img| {
            let mut ledger = CurationLedger::default();
            let mut rest = Vec::new();
            let mut detection = None;
            let src = img.source;
            if opts.annotation_level && src.feeds_reg() {
                classify_regions(img, &opts.lexicon);
                rest.extend(curate_reg(img, &mut ledger));
            }
            if src.feeds_rec() {
                let rec = rec_samples(img);
                ledger.entry(src).rec_samples += rec.len() as u64;
                rest.extend(rec);
            }
            if opts.task_level && src.feeds_detection() && !img.regions.is_empty() {
                if let Ok(m) = merge_to_detection(img, &opts.lexicon, opts.dedup_iou) {
                    let t = &mut ledger.entry(src).task_level;
                    t.input_regions += m.input_boxes;
                    t.merged_samples += 1;
                    t.merged_boxes += m.emitted_boxes;
                    t.deduped_boxes += m.deduped_boxes;
                    detection = Some(m.sample);
                }
            }
            PerImage {
                detection,
                rest,
                ledger,
            }
        })
        .collect();

    let mut ledger = CurationLedger::default();
    let mut samples = Vec::new();
    let mut grounding_inputs = Vec::new();
    for (img, p) in images.iter().zip(per_image) {
        ledger.merge(p.ledger);
        if let Some(d) = p.detection {
            if img.source.feeds_grounding() {
                grounding_inputs.push(d.clone());
            }
            samples.push(d);
        }
        samples.extend(p.rest);
    }
    if opts.task_level {
        let negatives: BTreeMap<String, Vec<String>> = images
            .iter()
            .filter(|i| !i.negatives.is_empty())
            .map(|i| (i.image_id.clone(), i.negatives.clone()))
            .collect();
        let grounding = reorganize_grounding(&grounding_inputs, &negatives, opts.seed);
        for g in &grounding {
            if let Some(s) = g.source() {
                ledger.entry(s).grounding_samples += 1;
            }
        }
        samples.extend(grounding);
    }
    samples.extend(passthrough);
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    CurateOutput {
        samples,
        images,
        ledger,
    }
}
