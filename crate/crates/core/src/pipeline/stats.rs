//! Corpus statistics shaped like the per-task tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::records::{read_jsonl_opt, RecordError, RegionRecord, REGIONS_FILE, SAMPLES_FILE};
use crate::model::{DetailLevel, Payload, RegDetail, TaskKind, TaskSample};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub samples: u64,
    pub boxes: u64,
    pub mean_boxes_per_sample: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub samples: u64,
    pub boxes: u64,
    pub mean_boxes_per_sample: f64,
    /// Sample counts keyed by table row name; every row is present.
    pub rows: BTreeMap<String, u64>,
    pub per_kind: BTreeMap<String, KindStats>,
    /// Number of samples carrying exactly `k` boxes.
    pub boxes_histogram: BTreeMap<u64, u64>,
    pub label_vocabulary: u64,
    /// Detail of REG samples (`concise` / `detailed`).
    pub reg_detail: BTreeMap<String, u64>,
    /// Detail levels of canonical regions, when `regions.jsonl` is present.
    pub region_detail_levels: BTreeMap<String, u64>,
}

fn mean(total: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        total as f64 / n as f64
    }
}

fn tag<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn corpus_stats(samples: &[TaskSample], regions: &[RegionRecord]) -> StatsReport {
    let mut r = StatsReport {
        rows: TaskKind::ALL.iter().map(|k| (k.table_row().to_string(), 0)).collect(),
        reg_detail: [RegDetail::Concise, RegDetail::Detailed].iter().map(|d| (tag(d), 0)).collect(),
        ..Default::default()
    };
    let mut vocab = BTreeSet::new();
    for s in samples {
        let n = s.box_count() as u64;
        r.samples += 1;
        r.boxes += n;
        *r.rows.entry(s.kind.table_row().to_string()).or_default() += 1;
        let k = r.per_kind.entry(s.kind.as_str().to_string()).or_default();
        k.samples += 1;
        k.boxes += n;
        *r.boxes_histogram.entry(n).or_default() += 1;
        vocab.extend(s.labels().into_iter().map(str::to_string));
        if let Payload::Reg { detail, .. } = &s.payload {
            *r.reg_detail.entry(tag(detail)).or_default() += 1;
        }
    }
    for k in r.per_kind.values_mut() {
        k.mean_boxes_per_sample = mean(k.boxes, k.samples);
    }
    r.mean_boxes_per_sample = mean(r.boxes, r.samples);
    r.label_vocabulary = vocab.len() as u64;
    if !regions.is_empty() {
        for level in [DetailLevel::ClassLevel, DetailLevel::Concise, DetailLevel::Detailed, DetailLevel::Unclassified] {
            r.region_detail_levels.insert(tag(&level), 0);
        }
        for g in regions {
            *r.region_detail_levels.entry(tag(&g.detail_level)).or_default() += 1;
        }
    }
    r
}

/// Statistics over `samples.jsonl` and `regions.jsonl` in `dir` (either may
/// be absent), or over a single samples file.
pub fn stats(path: &Path) -> Result<StatsReport, RecordError> {
    if path.is_file() {
        return Ok(corpus_stats(&read_jsonl_opt(path)?, &[]));
    }
    let samples: Vec<TaskSample> = read_jsonl_opt(&path.join(SAMPLES_FILE))?;
    let regions: Vec<RegionRecord> = read_jsonl_opt(&path.join(REGIONS_FILE))?;
    Ok(corpus_stats(&samples, &regions))
}
