use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use super::geometry::BBox;

/// Upstream datasets the pre-training and instruction splits are assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceName {
    ShareGpt4v,
    RefCoco,
    RefCocoPlus,
    RefCocog,
    GRefCoco,
    Osprey,
    Flickr30kEntities,
    VisualGenome,
    Objects365,
    MsCoco,
    V3Det,
    UltraChat,
    FlanMini,
    OpenOrca,
    ShareGpt,
    MetaMathQa,
    MathInstruct,
    WizardCoder,
    Llava,
    Allava,
    LvisInstruct4v,
    TextCaps,
    VqaV2,
    Gqa,
    OkVqa,
    AOkVqa,
    Sqa,
    VizWiz,
    TextVqa,
    OcrVqa,
    Ai2d,
    Synthdog,
    Dvqa,
    ChartQa,
    DocVqa,
    InfoVqa,
    DeepForm,
    Klc,
    Wtq,
    TabFact,
    OpenImages,
    Fscd,
    GriffonV2,
}

const SOURCE_NAMES: &[(SourceName, &str)] = &[
    (SourceName::ShareGpt4v, "sharegpt4v"),
    (SourceName::RefCoco, "refcoco"),
    (SourceName::RefCocoPlus, "refcoco+"),
    (SourceName::RefCocog, "refcocog"),
    (SourceName::GRefCoco, "grefcoco"),
    (SourceName::Osprey, "osprey"),
    (SourceName::Flickr30kEntities, "flickr30k-entities"),
    (SourceName::VisualGenome, "visual-genome"),
    (SourceName::Objects365, "objects365"),
    (SourceName::MsCoco, "mscoco"),
    (SourceName::V3Det, "v3det"),
    (SourceName::UltraChat, "ultrachat"),
    (SourceName::FlanMini, "flan-mini"),
    (SourceName::OpenOrca, "openorca"),
    (SourceName::ShareGpt, "sharegpt"),
    (SourceName::MetaMathQa, "metamathqa"),
    (SourceName::MathInstruct, "mathinstruct"),
    (SourceName::WizardCoder, "wizardcoder"),
    (SourceName::Llava, "llava"),
    (SourceName::Allava, "allava"),
    (SourceName::LvisInstruct4v, "lvis-instruct4v"),
    (SourceName::TextCaps, "textcaps"),
    (SourceName::VqaV2, "vqav2"),
    (SourceName::Gqa, "gqa"),
    (SourceName::OkVqa, "ok-vqa"),
    (SourceName::AOkVqa, "a-okvqa"),
    (SourceName::Sqa, "sqa"),
    (SourceName::VizWiz, "vizwiz"),
    (SourceName::TextVqa, "textvqa"),
    (SourceName::OcrVqa, "ocr-vqa"),
    (SourceName::Ai2d, "ai2d"),
    (SourceName::Synthdog, "synthdog"),
    (SourceName::Dvqa, "dvqa"),
    (SourceName::ChartQa, "chartqa"),
    (SourceName::DocVqa, "docvqa"),
    (SourceName::InfoVqa, "infovqa"),
    (SourceName::DeepForm, "deepform"),
    (SourceName::Klc, "klc"),
    (SourceName::Wtq, "wtq"),
    (SourceName::TabFact, "tabfact"),
    (SourceName::OpenImages, "open-images"),
    (SourceName::Fscd, "fscd"),
    (SourceName::GriffonV2, "griffon-v2"),
];

impl SourceName {
    pub fn all() -> impl Iterator<Item = SourceName> {
        SOURCE_NAMES.iter().map(|(s, _)| *s)
    }

    pub fn as_str(self) -> &'static str {
        SOURCE_NAMES
            .iter()
            .find(|(s, _)| *s == self)
            .map(|(_, n)| *n)
            .expect("every source has a name")
    }

    /// Region sources whose descriptions are already detailed and skip the
    /// expression classifier.
    pub fn is_detailed_description_source(self) -> bool {
        matches!(self, SourceName::Osprey | SourceName::Flickr30kEntities)
    }

    /// Sources that feed detection-format merging.
    pub fn feeds_detection(self) -> bool {
        matches!(
            self,
            SourceName::Objects365 | SourceName::MsCoco | SourceName::V3Det | SourceName::VisualGenome
        )
    }

    pub fn feeds_rec(self) -> bool {
        matches!(
            self,
            SourceName::RefCoco | SourceName::RefCocoPlus | SourceName::RefCocog | SourceName::GRefCoco
        )
    }

    pub fn feeds_reg(self) -> bool {
        matches!(
            self,
            SourceName::Osprey
                | SourceName::Flickr30kEntities
                | SourceName::RefCoco
                | SourceName::RefCocoPlus
                | SourceName::RefCocog
                | SourceName::VisualGenome
        )
    }

    pub fn feeds_grounding(self) -> bool {
        matches!(self, SourceName::VisualGenome | SourceName::V3Det)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown source `{0}`")]
pub struct UnknownSource(pub String);

impl FromStr for SourceName {
    type Err = UnknownSource;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        SOURCE_NAMES
            .iter()
            .find(|(_, n)| *n == key)
            .map(|(s, _)| *s)
            .ok_or_else(|| UnknownSource(s.to_string()))
    }
}

impl fmt::Display for SourceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for SourceName {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SourceName {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How specific a region description is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetailLevel {
    ClassLevel,
    Concise,
    Detailed,
    #[default]
    Unclassified,
}

/// One described region of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAnnotation {
    pub bbox: BBox,
    pub expression: String,
    pub category: Option<String>,
    pub detail_level: DetailLevel,
    pub source: SourceName,
}

impl RegionAnnotation {
    /// Sets the detail level once. A region that already carries a level keeps it.
    pub fn classify_once(&mut self, level: DetailLevel) {
        if self.detail_level == DetailLevel::Unclassified {
            self.detail_level = level;
        }
    }
}

/// An image with all of its region annotations; the unit of curation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    /// Namespaced by source, e.g. `refcoco:581857`.
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub uri: String,
    pub source: SourceName,
    pub regions: Vec<RegionAnnotation>,
    /// Expressions known to match nothing in the image (no-target referring records).
    pub negatives: Vec<String>,
}

/// Collapses runs of whitespace and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Builds a source-namespaced identifier.
pub fn namespaced(source: SourceName, local: &str) -> String {
    format!("{}:{}", source.as_str(), local)
}

/// Source prefix of a namespaced identifier.
pub fn source_of(id: &str) -> Option<SourceName> {
    id.split_once(':').and_then(|(p, _)| p.parse().ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Caption,
    #[serde(rename = "REC")]
    Rec,
    #[serde(rename = "REG")]
    Reg,
    Detection,
    Grounding,
    Counting,
    GeneralVQA,
    SceneTextVQA,
    DocVQA,
    LanguageOnly,
    VLInstruction,
}

impl TaskKind {
    pub const ALL: [TaskKind; 11] = [
        TaskKind::Caption,
        TaskKind::Rec,
        TaskKind::Reg,
        TaskKind::Detection,
        TaskKind::Grounding,
        TaskKind::Counting,
        TaskKind::GeneralVQA,
        TaskKind::SceneTextVQA,
        TaskKind::DocVQA,
        TaskKind::LanguageOnly,
        TaskKind::VLInstruction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Caption => "Caption",
            TaskKind::Rec => "REC",
            TaskKind::Reg => "REG",
            TaskKind::Detection => "Detection",
            TaskKind::Grounding => "Grounding",
            TaskKind::Counting => "Counting",
            TaskKind::GeneralVQA => "GeneralVQA",
            TaskKind::SceneTextVQA => "SceneTextVQA",
            TaskKind::DocVQA => "DocVQA",
            TaskKind::LanguageOnly => "LanguageOnly",
            TaskKind::VLInstruction => "VLInstruction",
        }
    }

    /// Row name used by the corpus tables.
    pub fn table_row(self) -> &'static str {
        match self {
            TaskKind::Caption => "Image Caption",
            TaskKind::Rec => "REC",
            TaskKind::Reg => "REG",
            TaskKind::Detection => "Object Detection",
            TaskKind::Grounding => "Visual Grounding",
            TaskKind::Counting => "Object Counting",
            TaskKind::GeneralVQA => "General VQAs",
            TaskKind::SceneTextVQA => "Scene Text-centric VQAs",
            TaskKind::DocVQA => "Document-related VQAs",
            TaskKind::LanguageOnly => "Language Instruction",
            TaskKind::VLInstruction => "VL Instruction",
        }
    }

    pub fn needs_image(self) -> bool {
        self != TaskKind::LanguageOnly
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown task kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// Checks that turns alternate strictly, starting with the user.
pub fn turns_alternate(turns: &[Turn]) -> bool {
    turns.iter().enumerate().all(|(i, t)| {
        t.role
            == if i % 2 == 0 {
                Role::User
            } else {
                Role::Assistant
            }
    })
}

/// A label with its boxes, in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBoxes {
    pub label: String,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegDetail {
    Concise,
    Detailed,
}

/// Kind-specific body of a [`TaskSample`]. Boxes are in absolute pixels and
/// visual payloads carry the image size needed to place them on the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Caption {
        width: u32,
        height: u32,
        text: String,
    },
    Rec {
        width: u32,
        height: u32,
        expression: String,
        bbox: BBox,
    },
    Reg {
        width: u32,
        height: u32,
        bbox: BBox,
        description: String,
        detail: RegDetail,
    },
    Detection {
        width: u32,
        height: u32,
        objects: Vec<LabeledBoxes>,
    },
    Grounding {
        width: u32,
        height: u32,
        queries: Vec<LabeledBoxes>,
    },
    Counting {
        width: u32,
        height: u32,
        label: String,
        boxes: Vec<BBox>,
    },
    /// Dialogue-shaped kinds (VQA families, VL instruction, language-only).
    Dialogue { turns: Vec<Turn> },
}

#[derive(Serialize, Deserialize)]
struct SizedText {
    width: u32,
    height: u32,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct RecBody {
    width: u32,
    height: u32,
    expression: String,
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct RegBody {
    width: u32,
    height: u32,
    bbox: BBox,
    description: String,
    detail: RegDetail,
}

#[derive(Serialize, Deserialize)]
struct ObjectsBody {
    width: u32,
    height: u32,
    objects: Vec<LabeledBoxes>,
}

#[derive(Serialize, Deserialize)]
struct QueriesBody {
    width: u32,
    height: u32,
    queries: Vec<LabeledBoxes>,
}

#[derive(Serialize, Deserialize)]
struct CountingBody {
    width: u32,
    height: u32,
    label: String,
    boxes: Vec<BBox>,
}

#[derive(Serialize, Deserialize)]
struct DialogueBody {
    turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("sample {id}: {kind} requires an image reference")]
    MissingImage { id: String, kind: TaskKind },
    #[error("sample {id}: LanguageOnly samples must not reference an image")]
    UnexpectedImage { id: String },
    #[error("sample {id}: payload does not fit {kind}: {reason}")]
    PayloadMismatch {
        id: String,
        kind: TaskKind,
        reason: String,
    },
    #[error("sample {id}: label `{label}` repeated")]
    DuplicateLabel { id: String, label: String },
    #[error("sample {id}: grounding queries {count} labels, at most 10 allowed")]
    TooManyQueries { id: String, count: usize },
}

/// Maximum number of categories queried by one grounding sample.
pub const MAX_GROUNDING_QUERIES: usize = 10;

/// A typed training record; the unit of consolidation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSample", into = "RawSample")]
pub struct TaskSample {
    pub sample_id: String,
    pub kind: TaskKind,
    pub image_id: Option<String>,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct RawSample {
    sample_id: String,
    kind: TaskKind,
    image_id: Option<String>,
    payload: Value,
}

impl TaskSample {
    pub fn new(
        sample_id: String,
        kind: TaskKind,
        image_id: Option<String>,
        payload: Payload,
    ) -> Result<Self, SampleError> {
        let s = Self {
            sample_id,
            kind,
            image_id,
            payload,
        };
        s.check()?;
        Ok(s)
    }

    /// Source prefix of the sample id.
    pub fn source(&self) -> Option<SourceName> {
        source_of(&self.sample_id)
    }

    pub fn image_size(&self) -> Option<(u32, u32)> {
        match &self.payload {
            Payload::Caption { width, height, .. }
            | Payload::Rec { width, height, .. }
            | Payload::Reg { width, height, .. }
            | Payload::Detection { width, height, .. }
            | Payload::Grounding { width, height, .. }
            | Payload::Counting { width, height, .. } => Some((*width, *height)),
            Payload::Dialogue { .. } => None,
        }
    }

    /// Number of boxes carried by the sample.
    pub fn box_count(&self) -> usize {
        match &self.payload {
            Payload::Rec { .. } | Payload::Reg { .. } => 1,
            Payload::Detection { objects: l, .. } | Payload::Grounding { queries: l, .. } => {
                l.iter().map(|o| o.boxes.len()).sum()
            }
            Payload::Counting { boxes, .. } => boxes.len(),
            Payload::Caption { .. } | Payload::Dialogue { .. } => 0,
        }
    }

    pub fn labels(&self) -> Vec<&str> {
        match &self.payload {
            Payload::Detection { objects: l, .. } | Payload::Grounding { queries: l, .. } => {
                l.iter().map(|o| o.label.as_str()).collect()
            }
            Payload::Counting { label, .. } => vec![label.as_str()],
            _ => Vec::new(),
        }
    }

    pub fn payload_json(&self) -> Value {
        payload_to_value(&self.payload)
    }

    fn check(&self) -> Result<(), SampleError> {
        let id = || self.sample_id.clone();
        match (self.kind.needs_image(), self.image_id.is_some()) {
            (true, false) => {
                return Err(SampleError::MissingImage {
                    id: id(),
                    kind: self.kind,
                })
            }
            (false, true) => return Err(SampleError::UnexpectedImage { id: id() }),
            _ => {}
        }
        let fits = matches!(
            (self.kind, &self.payload),
            (TaskKind::Caption, Payload::Caption { .. })
                | (TaskKind::Rec, Payload::Rec { .. })
                | (TaskKind::Reg, Payload::Reg { .. })
                | (TaskKind::Detection, Payload::Detection { .. })
                | (TaskKind::Grounding, Payload::Grounding { .. })
                | (TaskKind::Counting, Payload::Counting { .. })
                | (
                    TaskKind::GeneralVQA
                        | TaskKind::SceneTextVQA
                        | TaskKind::DocVQA
                        | TaskKind::LanguageOnly
                        | TaskKind::VLInstruction,
                    Payload::Dialogue { .. }
                )
        );
        if !fits {
            return Err(SampleError::PayloadMismatch {
                id: id(),
                kind: self.kind,
                reason: "payload variant does not match kind".into(),
            });
        }
        if let Payload::Detection { objects: l, .. } | Payload::Grounding { queries: l, .. } =
            &self.payload
        {
            let mut seen = BTreeSet::new();
            for o in l {
                if !seen.insert(o.label.as_str()) {
                    return Err(SampleError::DuplicateLabel {
                        id: id(),
                        label: o.label.clone(),
                    });
                }
            }
        }
        if let Payload::Grounding { queries, .. } = &self.payload {
            if queries.len() > MAX_GROUNDING_QUERIES {
                return Err(SampleError::TooManyQueries {
                    id: id(),
                    count: queries.len(),
                });
            }
        }
        Ok(())
    }
}

fn payload_to_value(p: &Payload) -> Value {
    let v = match p.clone() {
        Payload::Caption {
            width,
            height,
            text,
        } => serde_json::to_value(SizedText {
            width,
            height,
            text,
        }),
        Payload::Rec {
            width,
            height,
            expression,
            bbox,
        } => serde_json::to_value(RecBody {
            width,
            height,
            expression,
            bbox,
        }),
        Payload::Reg {
            width,
            height,
            bbox,
            description,
            detail,
        } => serde_json::to_value(RegBody {
            width,
            height,
            bbox,
            description,
            detail,
        }),
        Payload::Detection {
            width,
            height,
            objects,
        } => serde_json::to_value(ObjectsBody {
            width,
            height,
            objects,
        }),
        Payload::Grounding {
            width,
            height,
            queries,
        } => serde_json::to_value(QueriesBody {
            width,
            height,
            queries,
        }),
        Payload::Counting {
            width,
            height,
            label,
            boxes,
        } => serde_json::to_value(CountingBody {
            width,
            height,
            label,
            boxes,
        }),
        Payload::Dialogue { turns } => serde_json::to_value(DialogueBody { turns }),
    };
    v.expect("payload bodies serialize infallibly")
}

fn payload_from_value(kind: TaskKind, v: Value) -> Result<Payload, serde_json::Error> {
    Ok(match kind {
        TaskKind::Caption => {
            let b: SizedText = serde_json::from_value(v)?;
            Payload::Caption {
                width: b.width,
                height: b.height,
                text: b.text,
            }
        }
        TaskKind::Rec => {
            let b: RecBody = serde_json::from_value(v)?;
            Payload::Rec {
                width: b.width,
                height: b.height,
                expression: b.expression,
                bbox: b.bbox,
            }
        }
        TaskKind::Reg => {
            let b: RegBody = serde_json::from_value(v)?;
            Payload::Reg {
                width: b.width,
                height: b.height,
                bbox: b.bbox,
                description: b.description,
                detail: b.detail,
            }
        }
        TaskKind::Detection => {
            let b: ObjectsBody = serde_json::from_value(v)?;
            Payload::Detection {
                width: b.width,
                height: b.height,
                objects: b.objects,
            }
        }
        TaskKind::Grounding => {
            let b: QueriesBody = serde_json::from_value(v)?;
            Payload::Grounding {
                width: b.width,
                height: b.height,
                queries: b.queries,
            }
        }
        TaskKind::Counting => {
            let b: CountingBody = serde_json::from_value(v)?;
            Payload::Counting {
                width: b.width,
                height: b.height,
                label: b.label,
                boxes: b.boxes,
            }
        }
        _ => {
            let b: DialogueBody = serde_json::from_value(v)?;
            Payload::Dialogue { turns: b.turns }
        }
    })
}

impl TryFrom<RawSample> for TaskSample {
    type Error = SampleError;

    fn try_from(raw: RawSample) -> Result<Self, Self::Error> {
        let payload =
            payload_from_value(raw.kind, raw.payload).map_err(|e| SampleError::PayloadMismatch {
                id: raw.sample_id.clone(),
                kind: raw.kind,
                reason: e.to_string(),
            })?;
        TaskSample::new(raw.sample_id, raw.kind, raw.image_id, payload)
    }
}

impl From<TaskSample> for RawSample {
    fn from(s: TaskSample) -> Self {
        RawSample {
            payload: payload_to_value(&s.payload),
            sample_id: s.sample_id,
            kind: s.kind,
            image_id: s.image_id,
        }
    }
}

/// A serialized instruction sample with textual coordinates; the unit of output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub sample_id: String,
    pub image_id: Option<String>,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub token_estimate: u64,
}
