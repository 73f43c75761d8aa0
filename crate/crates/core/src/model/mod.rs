//! Canonical data model shared by every stage.

pub mod geometry;
pub mod records;
pub mod types;

pub use geometry::{
    from_grid, iou, to_grid, validate_box, BBox, BoxError, CoordSpace, DEFAULT_COORD_BINS,
};
pub use records::{ImageRecord, RecordError, RegionRecord};
pub use types::{
    namespaced, normalize_whitespace, source_of, turns_alternate, AnnotatedImage,
    ConversationRecord, DetailLevel, LabeledBoxes, Payload, RegDetail, RegionAnnotation, Role,
    SampleError, SourceName, TaskKind, TaskSample, Turn, MAX_GROUNDING_QUERIES,
};
