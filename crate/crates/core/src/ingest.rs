//! Adapters from external annotation formats into the canonical model.
//!
//! Every adapter reads only the documented field subset and ignores anything
//! else. Record-level problems are fatal by default; with `lenient` they are
//! dropped and logged in the [`IngestLedger`]. Output order follows source
//! record order, so the same file always produces the same canonical rows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::records::{self, RecordError, IMAGES_FILE, REGIONS_FILE, SAMPLES_FILE};
use crate::model::{
    namespaced, normalize_whitespace, turns_alternate, validate_box, AnnotatedImage, BBox,
    BoxError, DetailLevel, Payload, RegionAnnotation, SourceName, TaskKind, TaskSample, Turn,
};

/// Largest overflow (pixels) that lenient mode clamps instead of dropping.
pub const LENIENT_CLAMP_PX: f64 = 2.0;

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    CocoDetectionJson,
    RegionDescriptionJson,
    ReferringJson,
    CaptionJsonl,
    PlainTextJsonl,
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.trim().to_ascii_lowercase()))
            .map_err(|_| format!("unknown source format `{s}`"))
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().expect("string tag"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub name: SourceName,
    pub format: SourceFormat,
    pub path: PathBuf,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: malformed JSON: {message}")]
    MalformedJson {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{locator}: malformed record: {message}")]
    MalformedRecord { locator: String, message: String },
    #[error("{locator}: unknown category id {id}")]
    DanglingCategoryId { locator: String, id: String },
    #[error("{locator}: unknown image id {id}")]
    DanglingImageId { locator: String, id: String },
    #[error("{locator}: empty expression")]
    EmptyExpression { locator: String },
    #[error("{locator}: {source}")]
    BadBox {
        locator: String,
        #[source]
        source: BoxError,
    },
    #[error("{locator}: text-only source record carries an image field")]
    HasImageInTextSource { locator: String },
    #[error("{locator}: duplicate image id {id}")]
    DuplicateImageId { locator: String, id: String },
    #[error("{0}")]
    Write(#[from] RecordError),
}

impl IngestError {
    /// Errors that `--lenient` may skip; file-level failures are always fatal.
    fn is_record_level(&self) -> bool {
        !matches!(
            self,
            IngestError::Io { .. } | IngestError::MalformedJson { .. } | IngestError::Write(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub locator: String,
    pub reason: String,
}

/// Per-run accounting. `read == emitted + dropped` for region candidates
/// (or text records), and `clamped` counts emitted boxes that were clamped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestLedger {
    pub source: Option<SourceName>,
    pub read: u64,
    pub emitted: u64,
    pub clamped: u64,
    pub dropped: u64,
    pub images: u64,
    pub negatives: u64,
    pub issues: Vec<Issue>,
}

impl IngestLedger {
    pub fn balanced(&self) -> bool {
        self.read == self.emitted + self.dropped
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOutput {
    pub images: Vec<AnnotatedImage>,
    pub samples: Vec<TaskSample>,
    pub ledger: IngestLedger,
}

impl IngestOutput {
    /// Writes `images.jsonl` + `regions.jsonl` (when images exist),
    /// `samples.jsonl` (when samples exist) and `ledger.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), RecordError> {
        if !self.images.is_empty() || self.samples.is_empty() {
            let (im, rg) = records::image_rows(&self.images);
            records::write_jsonl(&dir.join(IMAGES_FILE), &im)?;
            records::write_jsonl(&dir.join(REGIONS_FILE), &rg)?;
        }
        if !self.samples.is_empty() {
            records::write_jsonl(&dir.join(SAMPLES_FILE), &self.samples)?;
        }
        records::write_json(&dir.join(LEDGER_FILE), &self.ledger)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    pub lenient: bool,
}

/// Dispatches on the descriptor's format.
pub fn ingest(src: &SourceDescriptor, opts: IngestOptions) -> Result<IngestOutput, IngestError> {
    match src.format {
        SourceFormat::CocoDetectionJson => ingest_coco_detection(src, opts),
        SourceFormat::ReferringJson => ingest_referring(src, opts),
        SourceFormat::RegionDescriptionJson => ingest_region_descriptions(src, opts),
        SourceFormat::CaptionJsonl => ingest_captions(src, opts),
        SourceFormat::PlainTextJsonl => ingest_text_only(src, opts),
    }
}

struct Run {
    source: SourceName,
    lenient: bool,
    ledger: IngestLedger,
}

impl Run {
    fn new(source: SourceName, opts: IngestOptions) -> Self {
        Self {
            source,
            lenient: opts.lenient,
            ledger: IngestLedger {
                source: Some(source),
                ..Default::default()
            },
        }
    }

    /// Routes a record-level error: fatal when strict, ledgered when lenient.
    fn reject(&mut self, err: IngestError, candidates: u64) -> Result<(), IngestError> {
        if self.lenient && err.is_record_level() {
            self.ledger.read += candidates;
            self.ledger.dropped += candidates;
            let locator = match &err {
                IngestError::MalformedRecord { locator, .. }
                | IngestError::DanglingCategoryId { locator, .. }
                | IngestError::DanglingImageId { locator, .. }
                | IngestError::EmptyExpression { locator }
                | IngestError::BadBox { locator, .. }
                | IngestError::HasImageInTextSource { locator }
                | IngestError::DuplicateImageId { locator, .. } => locator.clone(),
                _ => String::new(),
            };
            self.ledger.issues.push(Issue {
                locator,
                reason: err.to_string(),
            });
            Ok(())
        } else {
            Err(err)
        }
    }

    /// Validates a pixel box, clamping small overflows in lenient mode.
    fn admit_box(
        &mut self,
        b: BBox,
        width: u32,
        height: u32,
        locator: &str,
    ) -> Result<(BBox, bool), IngestError> {
        let (w, h) = (width as f64, height as f64);
        match validate_box(b, w, h) {
            Ok(b) => Ok((b, false)),
            Err(BoxError::OutOfBounds { .. }) if self.lenient => {
                let (clamped, shift) = b.clamp_to(w, h);
                if shift <= LENIENT_CLAMP_PX {
                    validate_box(clamped, w, h)
                        .map(|b| (b, true))
                        .map_err(|source| IngestError::BadBox {
                            locator: locator.to_string(),
                            source,
                        })
                } else {
                    Err(IngestError::BadBox {
                        locator: locator.to_string(),
                        source: BoxError::OutOfBounds {
                            x1: b.x1,
                            y1: b.y1,
                            x2: b.x2,
                            y2: b.y2,
                            width: w,
                            height: h,
                        },
                    })
                }
            }
            Err(source) => Err(IngestError::BadBox {
                locator: locator.to_string(),
                source,
            }),
        }
    }

    /// Pushes one region candidate onto `img`, or ledgers why it was dropped.
    fn push_region(
        &mut self,
        img: &mut AnnotatedImage,
        bbox: BBox,
        expression: &str,
        category: Option<String>,
        locator: &str,
    ) -> Result<(), IngestError> {
        let expression = normalize_whitespace(expression);
        if expression.is_empty() {
            return self.reject(
                IngestError::EmptyExpression {
                    locator: locator.to_string(),
                },
                1,
            );
        }
        let (bbox, clamped) = match self.admit_box(bbox, img.width, img.height, locator) {
            Ok(v) => v,
            Err(e) => return self.reject(e, 1),
        };
        let detail_level = if self.source.is_detailed_description_source() {
            DetailLevel::Detailed
        } else {
            DetailLevel::Unclassified
        };
        img.regions.push(RegionAnnotation {
            bbox,
            expression,
            category,
            detail_level,
            source: self.source,
        });
        self.ledger.read += 1;
        self.ledger.emitted += 1;
        self.ledger.clamped += u64::from(clamped);
        Ok(())
    }

    fn finish(mut self, images: Vec<AnnotatedImage>, samples: Vec<TaskSample>) -> IngestOutput {
        self.ledger.images = images.len() as u64;
        self.ledger.negatives = images.iter().map(|i| i.negatives.len() as u64).sum();
        IngestOutput {
            images,
            samples,
            ledger: self.ledger,
        }
    }
}

fn read_file(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_document(path: &Path) -> Result<Value, IngestError> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| IngestError::MalformedJson {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Identifier values may be numbers or strings in the wild.
fn id_key(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn field<'a>(v: &'a Value, name: &str) -> Option<&'a Value> {
    v.get(name).filter(|x| !x.is_null())
}

fn malformed(locator: String, message: impl Into<String>) -> IngestError {
    IngestError::MalformedRecord {
        locator,
        message: message.into(),
    }
}

fn parse_xywh(v: &Value) -> Option<BBox> {
    let a: [f64; 4] = serde_json::from_value(v.clone()).ok()?;
    Some(BBox::from_xywh(a[0], a[1], a[2], a[3]))
}

fn array<'a>(doc: &'a Value, name: &str, locator: &str) -> Result<&'a [Value], IngestError> {
    match doc.get(name) {
        Some(Value::Array(a)) => Ok(a),
        None | Some(Value::Null) => Ok(&[]),
        Some(_) => Err(malformed(locator.to_string(), format!("`{name}` is not an array"))),
    }
}

#[derive(Deserialize)]
struct ImageHeader {
    id: Value,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: Option<String>,
    #[serde(default)]
    coco_url: Option<String>,
    #[serde(default)]
    url: Option<String>,
}

/// Parses the `images` array shared by the COCO and referring formats into
/// ordered images plus a local-id index.
fn parse_image_headers(
    run: &mut Run,
    doc: &Value,
    path: &Path,
) -> Result<(Vec<AnnotatedImage>, HashMap<String, usize>), IngestError> {
    let mut images = Vec::new();
    let mut index = HashMap::new();
    let root = path.display().to_string();
    for (i, raw) in array(doc, "images", &root)?.iter().enumerate() {
        let locator = format!("{root}: images[{i}]");
        let header: ImageHeader = match serde_json::from_value(raw.clone()) {
            Ok(h) => h,
            Err(e) => {
                run.reject(malformed(locator, e.to_string()), 0)?;
                continue;
            }
        };
        let Some(local) = id_key(&header.id) else {
            run.reject(malformed(locator, "image id must be a string or number"), 0)?;
            continue;
        };
        if header.width == 0 || header.height == 0 {
            run.reject(malformed(locator, "image has zero extent"), 0)?;
            continue;
        }
        if index.contains_key(&local) {
            run.reject(
                IngestError::DuplicateImageId {
                    locator,
                    id: local,
                },
                0,
            )?;
            continue;
        }
        index.insert(local.clone(), images.len());
        let uri = header
            .file_name
            .or(header.coco_url)
            .or(header.url)
            .unwrap_or_default();
        images.push(AnnotatedImage {
            image_id: namespaced(run.source, &local),
            width: header.width,
            height: header.height,
            uri,
            source: run.source,
            regions: Vec::new(),
            negatives: Vec::new(),
        });
    }
    Ok((images, index))
}

/// COCO detection JSON (`images`, `annotations` with `[x, y, w, h]`, `categories`).
///
/// Each annotation becomes one region whose expression is the category name.
/// Images without annotations are still emitted.
pub fn ingest_coco_detection(
    src: &SourceDescriptor,
    opts: IngestOptions,
) -> Result<IngestOutput, IngestError> {
    let doc = parse_document(&src.path)?;
    let mut run = Run::new(src.name, opts);
    let root = src.path.display().to_string();
    let (mut images, index) = parse_image_headers(&mut run, &doc, &src.path)?;

    let mut categories = HashMap::new();
    for (i, c) in array(&doc, "categories", &root)?.iter().enumerate() {
        let name = field(c, "name").and_then(Value::as_str).map(normalize_whitespace);
        match (field(c, "id").and_then(id_key), name) {
            (Some(id), Some(name)) if !name.is_empty() => {
                categories.insert(id, name);
            }
            _ => run.reject(
                malformed(format!("{root}: categories[{i}]"), "needs `id` and `name`"),
                0,
            )?,
        }
    }

    for (i, ann) in array(&doc, "annotations", &root)?.iter().enumerate() {
        let locator = format!("{root}: annotations[{i}]");
        let image_id = field(ann, "image_id").and_then(id_key);
        let category_id = field(ann, "category_id").and_then(id_key);
        let bbox = field(ann, "bbox").and_then(parse_xywh);
        let (Some(image_id), Some(category_id), Some(bbox)) = (image_id, category_id, bbox) else {
            run.reject(
                malformed(locator, "needs `image_id`, `category_id` and a 4-number `bbox`"),
                1,
            )?;
            continue;
        };
        let Some(&slot) = index.get(&image_id) else {
            run.reject(
                IngestError::DanglingImageId {
                    locator,
                    id: image_id,
                },
                1,
            )?;
            continue;
        };
        let Some(name) = categories.get(&category_id).cloned() else {
            run.reject(
                IngestError::DanglingCategoryId {
                    locator,
                    id: category_id,
                },
                1,
            )?;
            continue;
        };
        run.push_region(&mut images[slot], bbox, &name.clone(), Some(name), &locator)?;
    }
    Ok(run.finish(images, Vec::new()))
}

/// Referring-expression JSON.
///
/// ```json
/// {"images": [{"id": 1, "width": 640, "height": 480, "file_name": "..."}],
///  "refs": [{"image_id": 1, "sentences": ["left sandwich"], "bbox": [x, y, w, h]},
///           {"image_id": 1, "expression": "the cat", "bboxes": []}]}
/// ```
///
/// `sentences` (or a single `expression`) fan out over `bbox` / `bboxes`; an
/// empty `bboxes` list marks the expressions as no-target negatives.
pub fn ingest_referring(
    src: &SourceDescriptor,
    opts: IngestOptions,
) -> Result<IngestOutput, IngestError> {
    let doc = parse_document(&src.path)?;
    let mut run = Run::new(src.name, opts);
    let root = src.path.display().to_string();
    let (mut images, index) = parse_image_headers(&mut run, &doc, &src.path)?;

    for (i, r) in array(&doc, "refs", &root)?.iter().enumerate() {
        let locator = format!("{root}: refs[{i}]");
        let expressions: Option<Vec<String>> = match (field(r, "sentences"), field(r, "expression"))
        {
            (Some(Value::Array(a)), _) => a
                .iter()
                .map(|s| s.as_str().map(str::to_string))
                .collect(),
            (None, Some(Value::String(s))) => Some(vec![s.clone()]),
            _ => None,
        };
        let boxes: Option<Vec<BBox>> = match (field(r, "bbox"), field(r, "bboxes")) {
            (Some(b), None) => parse_xywh(b).map(|b| vec![b]),
            (None, Some(Value::Array(bs))) => bs.iter().map(parse_xywh).collect(),
            _ => None,
        };
        let image_id = field(r, "image_id").and_then(id_key);
        let (Some(expressions), Some(boxes), Some(image_id)) = (expressions, boxes, image_id) else {
            run.reject(
                malformed(
                    locator,
                    "needs `image_id`, `sentences`/`expression` and `bbox`/`bboxes`",
                ),
                1,
            )?;
            continue;
        };
        let candidates = (expressions.len() * boxes.len().max(1)) as u64;
        let Some(&slot) = index.get(&image_id) else {
            run.reject(
                IngestError::DanglingImageId {
                    locator,
                    id: image_id,
                },
                candidates,
            )?;
            continue;
        };
        if expressions.is_empty() {
            run.reject(IngestError::EmptyExpression { locator }, 1)?;
            continue;
        }
        for (j, expr) in expressions.iter().enumerate() {
            let loc = format!("{locator}.sentences[{j}]");
            if boxes.is_empty() {
                let expr = normalize_whitespace(expr);
                if expr.is_empty() {
                    run.reject(IngestError::EmptyExpression { locator: loc }, 1)?;
                } else {
                    images[slot].negatives.push(expr);
                }
                continue;
            }
            for b in &boxes {
                run.push_region(&mut images[slot], *b, expr, None, &loc)?;
            }
        }
    }
    Ok(run.finish(images, Vec::new()))
}

/// Region-description JSON, one entry per image (Visual Genome layout with the
/// image size inlined):
///
/// ```json
/// [{"id": 1, "width": 800, "height": 600, "url": "...",
///   "regions": [{"phrase": "a man riding a bike", "x": 1, "y": 2, "width": 30, "height": 40}]}]
/// ```
///
/// Osprey and Flickr30K Entities regions arrive pre-labeled `Detailed`.
pub fn ingest_region_descriptions(
    src: &SourceDescriptor,
    opts: IngestOptions,
) -> Result<IngestOutput, IngestError> {
    let doc = parse_document(&src.path)?;
    let mut run = Run::new(src.name, opts);
    let root = src.path.display().to_string();
    let entries = match &doc {
        Value::Array(a) => a.as_slice(),
        _ => array(&doc, "images", &root)?,
    };
    let mut images: Vec<AnnotatedImage> = Vec::new();
    let mut seen = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        let locator = format!("{root}: [{i}]");
        let id = field(e, "id")
            .or_else(|| field(e, "image_id"))
            .and_then(id_key);
        let width = field(e, "width").and_then(Value::as_u64).unwrap_or(0) as u32;
        let height = field(e, "height").and_then(Value::as_u64).unwrap_or(0) as u32;
        let regions = match field(e, "regions") {
            Some(Value::Array(a)) => a.as_slice(),
            None => &[],
            Some(_) => {
                run.reject(malformed(locator, "`regions` is not an array"), 1)?;
                continue;
            }
        };
        let Some(id) = id.filter(|_| width > 0 && height > 0) else {
            run.reject(
                malformed(locator, "needs `id` and positive `width`/`height`"),
                regions.len() as u64,
            )?;
            continue;
        };
        if seen.insert(id.clone(), i).is_some() {
            run.reject(
                IngestError::DuplicateImageId { locator, id },
                regions.len() as u64,
            )?;
            continue;
        }
        let mut img = AnnotatedImage {
            image_id: namespaced(run.source, &id),
            width,
            height,
            uri: field(e, "url")
                .or_else(|| field(e, "file_name"))
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            source: run.source,
            regions: Vec::new(),
            negatives: Vec::new(),
        };
        for (j, r) in regions.iter().enumerate() {
            let loc = format!("{locator}.regions[{j}]");
            let num = |k: &str| field(r, k).and_then(Value::as_f64);
            let phrase = field(r, "phrase").and_then(Value::as_str);
            let (Some(phrase), Some(x), Some(y), Some(w), Some(h)) =
                (phrase, num("x"), num("y"), num("width"), num("height"))
            else {
                run.reject(malformed(loc, "needs `phrase`, `x`, `y`, `width`, `height`"), 1)?;
                continue;
            };
            run.push_region(&mut img, BBox::from_xywh(x, y, w, h), phrase, None, &loc)?;
        }
        images.push(img);
    }
    Ok(run.finish(images, Vec::new()))
}

fn jsonl_records(path: &Path) -> Result<Vec<(usize, Result<Value, String>)>, IngestError> {
    let text = read_file(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str(l).map_err(|e| e.to_string())))
        .collect())
}

/// Caption JSONL: `{"id"?, "image_id", "width", "height", "uri"?, "caption"}` per line.
/// Emits one image per distinct `image_id` and one Caption sample per line.
pub fn ingest_captions(
    src: &SourceDescriptor,
    opts: IngestOptions,
) -> Result<IngestOutput, IngestError> {
    let mut run = Run::new(src.name, opts);
    let root = src.path.display().to_string();
    let mut images: Vec<AnnotatedImage> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut samples = Vec::new();
    for (line, rec) in jsonl_records(&src.path)? {
        let locator = format!("{root}:{line}");
        let rec = match rec {
            Ok(v) => v,
            Err(e) => {
                run.reject(malformed(locator, e), 1)?;
                continue;
            }
        };
        let image = field(&rec, "image_id").and_then(id_key);
        let caption = field(&rec, "caption")
            .and_then(Value::as_str)
            .map(normalize_whitespace);
        let width = field(&rec, "width").and_then(Value::as_u64).unwrap_or(0) as u32;
        let height = field(&rec, "height").and_then(Value::as_u64).unwrap_or(0) as u32;
        let (Some(image), Some(caption)) = (image, caption) else {
            run.reject(malformed(locator, "needs `image_id` and `caption`"), 1)?;
            continue;
        };
        if caption.is_empty() {
            run.reject(IngestError::EmptyExpression { locator }, 1)?;
            continue;
        }
        if width == 0 || height == 0 {
            run.reject(malformed(locator, "needs positive `width`/`height`"), 1)?;
            continue;
        }
        let image_id = namespaced(run.source, &image);
        if !seen.contains_key(&image_id) {
            seen.insert(image_id.clone(), images.len());
            images.push(AnnotatedImage {
                image_id: image_id.clone(),
                width,
                height,
                uri: field(&rec, "uri")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
                source: run.source,
                regions: Vec::new(),
                negatives: Vec::new(),
            });
        }
        let local = field(&rec, "id")
            .and_then(id_key)
            .unwrap_or_else(|| format!("cap{line}"));
        let sample = TaskSample::new(
            namespaced(run.source, &local),
            TaskKind::Caption,
            Some(image_id),
            Payload::Caption {
                width,
                height,
                text: caption,
            },
        )
        .map_err(|e| malformed(locator.clone(), e.to_string()));
        match sample {
            Ok(s) => {
                run.ledger.read += 1;
                run.ledger.emitted += 1;
                samples.push(s);
            }
            Err(e) => run.reject(e, 1)?,
        }
    }
    Ok(run.finish(images, samples))
}

#[derive(Deserialize)]
struct TextRecord {
    #[serde(default)]
    id: Option<Value>,
    turns: Vec<Turn>,
}

/// Text-only dialogue JSONL: `{"id"?, "turns": [{"role": "user", "text": ...}, ...]}`.
///
/// Records carrying an `image` or `image_id` field are rejected.
pub fn ingest_text_only(
    src: &SourceDescriptor,
    opts: IngestOptions,
) -> Result<IngestOutput, IngestError> {
    let mut run = Run::new(src.name, opts);
    let root = src.path.display().to_string();
    let mut samples = Vec::new();
    for (line, rec) in jsonl_records(&src.path)? {
        let locator = format!("{root}:{line}");
        let rec = match rec {
            Ok(v) => v,
            Err(e) => {
                run.reject(malformed(locator, e), 1)?;
                continue;
            }
        };
        if field(&rec, "image").is_some() || field(&rec, "image_id").is_some() {
            run.reject(IngestError::HasImageInTextSource { locator }, 1)?;
            continue;
        }
        let parsed: TextRecord = match serde_json::from_value(rec) {
            Ok(r) => r,
            Err(e) => {
                run.reject(malformed(locator, e.to_string()), 1)?;
                continue;
            }
        };
        if parsed.turns.is_empty() || !turns_alternate(&parsed.turns) {
            run.reject(
                malformed(locator, "turns must be non-empty and alternate from user"),
                1,
            )?;
            continue;
        }
        let local = parsed
            .id
            .as_ref()
            .and_then(id_key)
            .unwrap_or_else(|| format!("txt{line}"));
        let s = TaskSample::new(
            namespaced(run.source, &local),
            TaskKind::LanguageOnly,
            None,
            Payload::Dialogue {
                turns: parsed.turns,
            },
        )
        .expect("text sample satisfies invariants");
        run.ledger.read += 1;
        run.ledger.emitted += 1;
        samples.push(s);
    }
    Ok(run.finish(Vec::new(), samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(dir: &Path, name: &str, v: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, v).unwrap();
        p
    }

    fn desc(name: SourceName, format: SourceFormat, path: PathBuf) -> SourceDescriptor {
        SourceDescriptor { name, format, path }
    }

    const STRICT: IngestOptions = IngestOptions { lenient: false };
    const LENIENT: IngestOptions = IngestOptions { lenient: true };

    #[test]
    fn coco_converts_xywh_and_keeps_empty_images() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({
            "images": [{"id": 1, "width": 100, "height": 100, "file_name": "a.jpg"},
                       {"id": 2, "width": 50, "height": 50}],
            "annotations": [{"image_id": 1, "category_id": 7, "bbox": [10, 20, 30, 40], "area": 1}],
            "categories": [{"id": 7, "name": "dog"}],
            "info": {"ignored": true}
        });
        let p = write(dir.path(), "c.json", &doc.to_string());
        let out = ingest(&desc(SourceName::MsCoco, SourceFormat::CocoDetectionJson, p), STRICT).unwrap();
        assert_eq!(out.images.len(), 2);
        let r = &out.images[0].regions[0];
        assert_eq!(r.bbox.coords(), [10., 20., 40., 60.]);
        assert_eq!(r.category.as_deref(), Some("dog"));
        assert_eq!(r.expression, "dog");
        assert_eq!(out.images[0].image_id, "mscoco:1");
        assert!(out.images[1].regions.is_empty());
        assert!(out.ledger.balanced());
    }

    #[test]
    fn coco_without_annotations_emits_images() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({"images": [{"id": "a", "width": 3, "height": 3}], "annotations": [], "categories": []});
        let p = write(dir.path(), "c.json", &doc.to_string());
        let out = ingest_coco_detection(&desc(SourceName::V3Det, SourceFormat::CocoDetectionJson, p), STRICT).unwrap();
        assert_eq!(out.images.len(), 1);
        assert!(out.images[0].regions.is_empty());
    }

    #[test]
    fn coco_dangling_ids() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({
            "images": [{"id": 1, "width": 100, "height": 100}],
            "annotations": [{"image_id": 9, "category_id": 7, "bbox": [0, 0, 1, 1]},
                            {"image_id": 1, "category_id": 8, "bbox": [0, 0, 1, 1]},
                            {"image_id": 1, "category_id": 7, "bbox": [0, 0, 1, 1]}],
            "categories": [{"id": 7, "name": "dog"}]
        });
        let p = write(dir.path(), "c.json", &doc.to_string());
        let d = desc(SourceName::MsCoco, SourceFormat::CocoDetectionJson, p);
        assert!(matches!(ingest(&d, STRICT), Err(IngestError::DanglingImageId { .. })));
        let out = ingest(&d, LENIENT).unwrap();
        assert_eq!((out.ledger.read, out.ledger.emitted, out.ledger.dropped), (3, 1, 2));
        assert!(out.ledger.issues[1].reason.contains("category"));
    }

    #[test]
    fn malformed_json_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.json", "{\n\"images\": [,]}");
        let d = desc(SourceName::MsCoco, SourceFormat::CocoDetectionJson, p);
        match ingest(&d, LENIENT) {
            Err(IngestError::MalformedJson { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn referring_fan_out_and_negatives() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({
            "images": [{"id": 5, "width": 200, "height": 100}],
            "refs": [
                {"image_id": 5, "sentences": ["left sandwich"], "bbox": [0, 0, 50, 50]},
                {"image_id": 5, "expression": "the cat", "bboxes": []},
                {"image_id": 5, "sentences": ["a red car", "the  red vehicle"], "bbox": [10, 10, 20, 20]}
            ]
        });
        let p = write(dir.path(), "r.json", &doc.to_string());
        let out = ingest(&desc(SourceName::GRefCoco, SourceFormat::ReferringJson, p), STRICT).unwrap();
        let img = &out.images[0];
        assert_eq!(img.regions.len(), 3);
        assert_eq!(img.regions[0].expression, "left sandwich");
        assert_eq!(img.regions[0].category, None);
        assert_eq!(img.negatives, vec!["the cat".to_string()]);
        assert_eq!(img.regions[1].bbox, img.regions[2].bbox);
        assert_eq!(img.regions[2].expression, "the red vehicle");
        assert_eq!(out.ledger.negatives, 1);
    }

    #[test]
    fn referring_empty_expression() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({
            "images": [{"id": 5, "width": 200, "height": 100}],
            "refs": [{"image_id": 5, "sentences": ["   "], "bbox": [0, 0, 5, 5]}, {"bad": 1}]
        });
        let p = write(dir.path(), "r.json", &doc.to_string());
        let d = desc(SourceName::RefCoco, SourceFormat::ReferringJson, p);
        assert!(matches!(ingest(&d, STRICT), Err(IngestError::EmptyExpression { .. })));
        let out = ingest(&d, LENIENT).unwrap();
        assert_eq!(out.ledger.dropped, 2);
        assert!(out.ledger.balanced());
    }

    #[test]
    fn region_descriptions_keep_duplicates_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!([{
            "id": 3, "width": 100, "height": 100,
            "regions": [
                {"phrase": "a man riding a bike", "x": 0, "y": 0, "width": 10, "height": 10},
                {"phrase": "a man riding a bike", "x": 0, "y": 0, "width": 10, "height": 10},
                {"phrase": "tree", "x": 95, "y": 0, "width": 6.5, "height": 10},
                {"phrase": "sky", "x": 90, "y": 0, "width": 15, "height": 10}
            ]
        }]);
        let p = write(dir.path(), "vg.json", &doc.to_string());
        let d = desc(SourceName::VisualGenome, SourceFormat::RegionDescriptionJson, p);
        assert!(matches!(ingest(&d, STRICT), Err(IngestError::BadBox { .. })));
        let out = ingest(&d, LENIENT).unwrap();
        let regions = &out.images[0].regions;
        assert_eq!(regions.len(), 3);
        assert_eq!(regions[0], regions[1]);
        assert_eq!(regions[2].bbox.coords(), [95., 0., 100., 10.]);
        assert_eq!(regions[0].detail_level, DetailLevel::Unclassified);
        assert_eq!(
            (out.ledger.read, out.ledger.emitted, out.ledger.clamped, out.ledger.dropped),
            (4, 3, 1, 1)
        );
    }

    #[test]
    fn detailed_sources_are_prelabeled() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!([{"id": 1, "width": 10, "height": 10,
            "regions": [{"phrase": "dog", "x": 0, "y": 0, "width": 1, "height": 1}]}]);
        let p = write(dir.path(), "o.json", &doc.to_string());
        let out = ingest(&desc(SourceName::Osprey, SourceFormat::RegionDescriptionJson, p), STRICT).unwrap();
        assert_eq!(out.images[0].regions[0].detail_level, DetailLevel::Detailed);
    }

    #[test]
    fn text_only_records() {
        let dir = tempfile::tempdir().unwrap();
        let six: Vec<_> = (0..6)
            .map(|i| json!({"role": if i % 2 == 0 { "user" } else { "assistant" }, "text": format!("t{i}")}))
            .collect();
        let body = [
            json!({"turns": [{"role": "user", "text": "q"}, {"role": "assistant", "text": "a"}]}).to_string(),
            json!({"id": "x", "image": "a.jpg", "turns": []}).to_string(),
            json!({"turns": six}).to_string(),
        ]
        .join("\n");
        let p = write(dir.path(), "t.jsonl", &body);
        let d = desc(SourceName::UltraChat, SourceFormat::PlainTextJsonl, p);
        assert!(matches!(ingest(&d, STRICT), Err(IngestError::HasImageInTextSource { .. })));
        let out = ingest(&d, LENIENT).unwrap();
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.samples[0].kind, TaskKind::LanguageOnly);
        assert_eq!(out.samples[0].image_id, None);
        assert_eq!(out.samples[0].sample_id, "ultrachat:txt1");
        match &out.samples[1].payload {
            Payload::Dialogue { turns } => {
                assert_eq!(turns.len(), 6);
                assert_eq!(turns[5].text, "t5");
            }
            p => panic!("{p:?}"),
        }
        assert!(out.ledger.balanced());
    }

    #[test]
    fn captions_emit_images_and_samples() {
        let dir = tempfile::tempdir().unwrap();
        let body = [
            json!({"image_id": 1, "width": 10, "height": 20, "caption": "a  dog"}).to_string(),
            json!({"image_id": 1, "width": 10, "height": 20, "caption": "another"}).to_string(),
        ]
        .join("\n");
        let p = write(dir.path(), "c.jsonl", &body);
        let out = ingest(&desc(SourceName::ShareGpt4v, SourceFormat::CaptionJsonl, p), STRICT).unwrap();
        assert_eq!(out.images.len(), 1);
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.samples[0].sample_id, "sharegpt4v:cap1");
    }

    #[test]
    fn output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({
            "images": [{"id": 2, "width": 9, "height": 9}, {"id": 1, "width": 9, "height": 9}],
            "annotations": [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1]},
                            {"image_id": 2, "category_id": 1, "bbox": [1, 1, 1, 1]}],
            "categories": [{"id": 1, "name": "x"}]
        });
        let p = write(dir.path(), "c.json", &doc.to_string());
        let d = desc(SourceName::Objects365, SourceFormat::CocoDetectionJson, p);
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        ingest(&d, STRICT).unwrap().write_to(&a).unwrap();
        ingest(&d, STRICT).unwrap().write_to(&b).unwrap();
        for f in [IMAGES_FILE, REGIONS_FILE, LEDGER_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        let first = fs::read_to_string(a.join(IMAGES_FILE)).unwrap();
        assert!(first.starts_with("{\"image_id\":\"objects365:2\""));
    }

    #[test]
    fn format_names_parse() {
        assert_eq!("referring-json".parse::<SourceFormat>().unwrap(), SourceFormat::ReferringJson);
        assert_eq!(SourceFormat::PlainTextJsonl.to_string(), "plain-text-jsonl");
        assert!("xml".parse::<SourceFormat>().is_err());
    }
}
