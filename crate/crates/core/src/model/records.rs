//! Canonical JSONL record shapes and file helpers.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::geometry::BBox;
use super::types::{AnnotatedImage, DetailLevel, RegionAnnotation, SourceName};

pub const IMAGES_FILE: &str = "images.jsonl";
pub const REGIONS_FILE: &str = "regions.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const CONVERSATIONS_FILE: &str = "conversations.jsonl";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl RecordError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RecordError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One line of `images.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub uri: String,
    /// Expressions with no target in this image.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<String>,
}

/// One line of `regions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub expression: String,
    pub category: Option<String>,
    pub source: SourceName,
    #[serde(default)]
    pub detail_level: DetailLevel,
}

/// Splits images into their `images.jsonl` / `regions.jsonl` rows.
pub fn image_rows(images: &[AnnotatedImage]) -> (Vec<ImageRecord>, Vec<RegionRecord>) {
    let mut im = Vec::with_capacity(images.len());
    let mut rg = Vec::new();
    for img in images {
        im.push(ImageRecord {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            uri: img.uri.clone(),
            negatives: img.negatives.clone(),
        });
        rg.extend(img.regions.iter().map(|r| RegionRecord {
            image_id: img.image_id.clone(),
            bbox: r.bbox,
            expression: r.expression.clone(),
            category: r.category.clone(),
            source: r.source,
            detail_level: r.detail_level,
        }));
    }
    (im, rg)
}

/// Reassembles images from canonical rows, keeping `images.jsonl` order and
/// region order within each image. Regions pointing at unknown images are
/// returned separately.
pub fn assemble_images(
    images: Vec<ImageRecord>,
    regions: Vec<RegionRecord>,
) -> (Vec<AnnotatedImage>, Vec<RegionRecord>) {
    let mut index = BTreeMap::new();
    let mut out: Vec<AnnotatedImage> = images
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            index.insert(r.image_id.clone(), i);
            let source = super::types::source_of(&r.image_id).unwrap_or(SourceName::GriffonV2);
            AnnotatedImage {
                image_id: r.image_id,
                width: r.width,
                height: r.height,
                uri: r.uri,
                source,
                regions: Vec::new(),
                negatives: r.negatives,
            }
        })
        .collect();
    let mut orphans = Vec::new();
    for r in regions {
        match index.get(&r.image_id) {
            Some(&i) => {
                out[i].source = r.source;
                out[i].regions.push(RegionAnnotation {
                    bbox: r.bbox,
                    expression: r.expression,
                    category: r.category,
                    detail_level: r.detail_level,
                    source: r.source,
                })
            }
            None => orphans.push(r),
        }
    }
    (out, orphans)
}

/// Reads every line of a JSONL file. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = File::open(path).map_err(|e| RecordError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RecordError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| RecordError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Like [`read_jsonl`] but an absent file reads as empty.
pub fn read_jsonl_opt<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

/// Serializes rows to JSONL bytes.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("records serialize infallibly");
        buf.push(b'\n');
    }
    buf
}

/// Writes `bytes` to `path` through a temp file in the same directory and an
/// atomic rename, so readers never observe a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RecordError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| RecordError::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| RecordError::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(bytes).map_err(|e| RecordError::io(path, e))?;
        w.flush().map_err(|e| RecordError::io(path, e))?;
    }
    tmp.as_file()
        .sync_all()
        .map_err(|e| RecordError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| RecordError::io(path, e.error))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RecordError> {
    write_atomic(path, &to_jsonl(rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RecordError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize infallibly");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RecordError> {
    let bytes = fs::read(path).map_err(|e| RecordError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| RecordError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over every regular file under `dir`, keyed by relative path in sorted
/// order. Identical trees hash identically regardless of write order.
pub fn tree_hash(dir: &Path) -> Result<String, RecordError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), RecordError> {
        for entry in fs::read_dir(dir).map_err(|e| RecordError::io(dir, e))? {
            let entry = entry.map_err(|e| RecordError::io(dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                out.push((rel, p));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        let bytes = fs::read(&p).map_err(|e| RecordError::io(&p, e))?;
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
