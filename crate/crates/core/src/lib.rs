//! Dataset engineering and evaluation toolkit for grounding-capable multimodal
//! models.
//!
//! The crate turns raw detection, referring-expression, region-description,
//! caption and text-dialogue annotations into curated task samples, mixes them
//! into quota-driven training splits, renders them as conversations with
//! bracketed integer box coordinates, and scores model text output with
//! COCO-style detection metrics, referring accuracy and counting error. It also
//! emits the three-stage training plans and the high-resolution token shape
//! calculus consumed by an external trainer.
//!
//! Stages, in pipeline order:
//!
//! 1. [`ingest`]: external formats into [`model::AnnotatedImage`] / [`model::TaskSample`].
//! 2. [`curate`]: task-level merging, expression classification, grounding reorganization.
//! 3. [`consolidate`]: seeded per-entry quotas with global dedup.
//! 4. [`convo`]: textual-coordinate conversations and the matching parser.
//! 5. [`evalkit`]: mAP family, REC accuracy, counting MAE.
//!
//! [`planner`] and [`pipeline`] sit beside these.

pub mod consolidate;
pub mod convo;
pub mod curate;
pub mod evalkit;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod planner;
pub mod seed;
