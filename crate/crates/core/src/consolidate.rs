//! Quota-driven assembly of training splits.
//!
//! Inputs are first deduplicated globally by `(image_id, payload hash)` and by
//! `sample_id` (first occurrence wins). Each [`MixEntry`] then draws its quota
//! from the matching stream with reservoir sampling keyed by `(seed, entry
//! index)`, so entries are independent of one another. A final pass in entry
//! order drops samples already claimed by an earlier, overlapping entry.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::records::{self, RecordError};
use crate::model::{SourceName, TaskKind, TaskSample};
use crate::seed::keyed_rng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Instruction,
}

impl Split {
    pub fn allows(self, kind: TaskKind) -> bool {
        match self {
            Split::Instruction => true,
            Split::Pretrain => matches!(
                kind,
                TaskKind::Caption
                    | TaskKind::Rec
                    | TaskKind::Reg
                    | TaskKind::Detection
                    | TaskKind::LanguageOnly
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quota {
    Count(u64),
    /// Share of the entry's (deduplicated) input stream, rounded down.
    Fraction(f64),
}

impl Quota {
    fn resolve(self, available: usize) -> u64 {
        match self {
            Quota::Count(n) => n,
            Quota::Fraction(f) => (f * available as f64).floor() as u64,
        }
    }

    fn is_zero(self) -> bool {
        match self {
            Quota::Count(n) => n == 0,
            Quota::Fraction(f) => f == 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    /// Row name; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: TaskKind,
    /// Accepted sources; empty accepts any.
    #[serde(default)]
    pub sources: Vec<SourceName>,
    pub quota: Quota,
}

impl MixEntry {
    pub fn row_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.to_string())
    }

    fn accepts(&self, s: &TaskSample) -> bool {
        s.kind == self.kind
            && (self.sources.is_empty() || s.source().is_some_and(|src| self.sources.contains(&src)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub split: Split,
    pub seed: u64,
    pub entries: Vec<MixEntry>,
}

#[derive(Debug, Error)]
pub enum ConsolidateError {
    #[error("mix entry {index} ({name}): {reason}")]
    InvalidMix {
        index: usize,
        name: String,
        reason: String,
    },
    #[error("mix entry {index} ({name}) has quota but no matching input samples")]
    UnresolvedSource { index: usize, name: String },
    #[error(transparent)]
    Record(#[from] RecordError),
}

impl MixSpec {
    pub fn load(path: &Path) -> Result<Self, ConsolidateError> {
        let mix: MixSpec = records::read_json(path)?;
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), ConsolidateError> {
        let mut names = BTreeSet::new();
        for (index, e) in self.entries.iter().enumerate() {
            let bad = |reason: String| ConsolidateError::InvalidMix {
                index,
                name: e.row_name(),
                reason,
            };
            if let Quota::Fraction(f) = e.quota {
                if !(0.0..=1.0).contains(&f) {
                    return Err(bad(format!("fraction {f} outside [0, 1]")));
                }
            }
            if !self.split.allows(e.kind) {
                return Err(bad(format!("{} is not allowed in the {:?} split", e.kind, self.split)));
            }
            if !names.insert(e.row_name()) {
                return Err(bad("duplicate entry name".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryReport {
    pub name: String,
    pub kind: TaskKind,
    pub requested: u64,
    pub available: u64,
    pub selected: u64,
    pub shortfall: u64,
    /// Samples this entry drew that an earlier entry had already claimed.
    pub overlap_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub seed: u64,
    pub entries: Vec<EntryReport>,
    /// Inputs removed by global dedup plus cross-entry overlaps.
    pub deduped: u64,
    pub total: u64,
    /// sha256 of the emitted `samples.jsonl` bytes.
    pub content_hash: String,
    pub warnings: Vec<String>,
}

impl SplitManifest {
    pub fn entry(&self, name: &str) -> Option<&EntryReport> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Canonical dedup key: image reference plus a hash of kind and payload.
pub fn dedup_key(s: &TaskSample) -> (Option<String>, String) {
    let mut h = Sha256::new();
    h.update(s.kind.as_str().as_bytes());
    h.update([0]);
    // serde_json maps are ordered, so this rendering is canonical.
    h.update(s.payload_json().to_string().as_bytes());
    (s.image_id.clone(), hex::encode(h.finalize()))
}

/// Algorithm R over `items`, keeping at most `k`.
pub fn reservoir_sample<'a, T, R: Rng>(items: impl Iterator<Item = &'a T>, k: usize, rng: &mut R) -> Vec<&'a T> {
    let mut res: Vec<&T> = Vec::with_capacity(k);
    if k == 0 {
        return res;
    }
    for (i, item) in items.enumerate() {
        if i < k {
            res.push(item);
        } else {
            let j = rng.gen_range(0..=i);
            if j < k {
                res[j] = item;
            }
        }
    }
    res
}

pub fn consolidate(
    mix: &MixSpec,
    inputs: Vec<TaskSample>,
) -> Result<(Vec<TaskSample>, SplitManifest), ConsolidateError> {
    mix.validate()?;
    let mut deduped = 0u64;
    let mut seen_keys = HashSet::new();
    let mut seen_ids = HashSet::new();
    let mut pool = Vec::with_capacity(inputs.len());
    for s in inputs {
        if seen_ids.contains(&s.sample_id) || !seen_keys.insert(dedup_key(&s)) {
            deduped += 1;
            continue;
        }
        seen_ids.insert(s.sample_id.clone());
        pool.push(s);
    }

    let picks: Vec<(usize, u64, Vec<&TaskSample>)> = mix
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let available = pool.iter().filter(|s| e.accepts(s)).count();
            let quota = e.quota.resolve(available);
            let mut rng = keyed_rng(mix.seed, &format!("mix-entry:{i}"));
            let k = usize::try_from(quota).unwrap_or(usize::MAX).min(available);
            let mut chosen = reservoir_sample(pool.iter().filter(|s| e.accepts(s)), k, &mut rng);
            chosen.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            (available, quota, chosen)
        })
        .collect();

    let mut out = Vec::new();
    let mut emitted = HashSet::new();
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for (index, (e, (available, requested, chosen))) in mix.entries.iter().zip(picks).enumerate() {
        if available == 0 && !e.quota.is_zero() {
            return Err(ConsolidateError::UnresolvedSource {
                index,
                name: e.row_name(),
            });
        }
        let mut overlap = 0;
        let before = out.len();
        for s in chosen {
            if emitted.insert(s.sample_id.clone()) {
                out.push(s.clone());
            } else {
                overlap += 1;
            }
        }
        let selected = (out.len() - before) as u64;
        let shortfall = requested.saturating_sub(selected);
        if shortfall > 0 {
            warnings.push(format!(
                "QuotaShortfall: {} requested {requested}, selected {selected}",
                e.row_name()
            ));
        }
        deduped += overlap;
        reports.push(EntryReport {
            name: e.row_name(),
            kind: e.kind,
            requested,
            available: available as u64,
            selected,
            shortfall,
            overlap_dropped: overlap,
        });
    }
    let manifest = SplitManifest {
        split: mix.split,
        seed: mix.seed,
        total: out.len() as u64,
        entries: reports,
        deduped,
        content_hash: records::sha256_hex(&records::to_jsonl(&out)),
        warnings,
    };
    Ok((out, manifest))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub entry: String,
    pub expected: u64,
    #[serde(default)]
    pub tolerance: u64,
    /// Full-scale targets cannot be reproduced without the original corpora.
    #[serde(default)]
    pub full_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub name: String,
    pub rows: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RowStatus {
    Pass,
    Fail { delta: i64 },
    NotDeskVerifiable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowResult {
    pub entry: String,
    pub expected: u64,
    pub achieved: Option<u64>,
    #[serde(flatten)]
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub table: String,
    pub rows: Vec<RowResult>,
    pub all_pass: bool,
}

/// Compares achieved entry counts with a reference table. Full-scale rows are
/// reported but neither pass nor fail.
pub fn verify_manifest(manifest: &SplitManifest, table: &ReferenceTable) -> VerifyReport {
    let rows: Vec<RowResult> = table
        .rows
        .iter()
        .map(|r| {
            let achieved = manifest.entry(&r.entry).map(|e| e.selected);
            let status = if r.full_scale {
                RowStatus::NotDeskVerifiable
            } else {
                let got = achieved.unwrap_or(0);
                if got.abs_diff(r.expected) <= r.tolerance && achieved.is_some() {
                    RowStatus::Pass
                } else {
                    RowStatus::Fail {
                        delta: got as i64 - r.expected as i64,
                    }
                }
            };
            RowResult {
                entry: r.entry.clone(),
                expected: r.expected,
                achieved,
                status,
            }
        })
        .collect();
    let all_pass = rows
        .iter()
        .all(|r| !matches!(r.status, RowStatus::Fail { .. }));
    VerifyReport {
        table: table.name.clone(),
        rows,
        all_pass,
    }
}

/// Rows of the pre-training split: (row, kind, sources, samples).
pub const PRETRAIN_ROWS: &[(&str, TaskKind, &[SourceName], u64)] = &[
    ("Caption", TaskKind::Caption, &[SourceName::ShareGpt4v], 1_246_000),
    (
        "REC",
        TaskKind::Rec,
        &[SourceName::RefCoco, SourceName::RefCocoPlus, SourceName::RefCocog, SourceName::GRefCoco],
        428_000,
    ),
    (
        "REG",
        TaskKind::Reg,
        &[
            SourceName::Osprey,
            SourceName::Flickr30kEntities,
            SourceName::RefCoco,
            SourceName::RefCocoPlus,
            SourceName::RefCocog,
            SourceName::VisualGenome,
        ],
        411_000,
    ),
    (
        "Object Detection",
        TaskKind::Detection,
        &[SourceName::Objects365, SourceName::MsCoco, SourceName::V3Det, SourceName::VisualGenome],
        2_107_000,
    ),
];

/// Rows of the instruction split.
pub const INSTRUCTION_ROWS: &[(&str, TaskKind, &[SourceName], u64)] = &[
    (
        "Language Instruction",
        TaskKind::LanguageOnly,
        &[
            SourceName::UltraChat,
            SourceName::FlanMini,
            SourceName::OpenOrca,
            SourceName::ShareGpt,
            SourceName::MetaMathQa,
            SourceName::MathInstruct,
            SourceName::WizardCoder,
        ],
        418_000,
    ),
    (
        "VL Instruction",
        TaskKind::VLInstruction,
        &[SourceName::Llava, SourceName::Allava, SourceName::LvisInstruct4v],
        1_086_000,
    ),
    ("Image Caption", TaskKind::Caption, &[SourceName::ShareGpt4v, SourceName::TextCaps], 122_000),
    (
        "General VQAs",
        TaskKind::GeneralVQA,
        &[
            SourceName::VqaV2,
            SourceName::Gqa,
            SourceName::OkVqa,
            SourceName::AOkVqa,
            SourceName::Sqa,
            SourceName::VizWiz,
        ],
        313_000,
    ),
    (
        "Scene Text-centric VQAs",
        TaskKind::SceneTextVQA,
        &[SourceName::TextVqa, SourceName::OcrVqa, SourceName::Ai2d, SourceName::Synthdog],
        206_000,
    ),
    (
        "Document-related VQAs",
        TaskKind::DocVQA,
        &[
            SourceName::Dvqa,
            SourceName::ChartQa,
            SourceName::DocVqa,
            SourceName::InfoVqa,
            SourceName::DeepForm,
            SourceName::Klc,
            SourceName::Wtq,
            SourceName::TabFact,
        ],
        255_000,
    ),
    (
        "Object Detection",
        TaskKind::Detection,
        &[SourceName::Objects365, SourceName::MsCoco, SourceName::V3Det, SourceName::VisualGenome],
        463_000,
    ),
    (
        "REC",
        TaskKind::Rec,
        &[SourceName::RefCoco, SourceName::RefCocoPlus, SourceName::RefCocog, SourceName::GRefCoco],
        256_000,
    ),
    (
        "Visual Grounding",
        TaskKind::Grounding,
        &[SourceName::VisualGenome, SourceName::V3Det],
        157_000,
    ),
    (
        "REG",
        TaskKind::Reg,
        &[
            SourceName::Osprey,
            SourceName::Flickr30kEntities,
            SourceName::RefCoco,
            SourceName::RefCocoPlus,
            SourceName::RefCocog,
            SourceName::VisualGenome,
        ],
        171_000,
    ),
    (
        "Object Counting",
        TaskKind::Counting,
        &[SourceName::OpenImages, SourceName::Fscd, SourceName::GriffonV2],
        598_000,
    ),
];

fn rows_for(split: Split) -> &'static [(&'static str, TaskKind, &'static [SourceName], u64)] {
    match split {
        Split::Pretrain => PRETRAIN_ROWS,
        Split::Instruction => INSTRUCTION_ROWS,
    }
}

/// The full-size mix scaled down by `divisor` (1 = full scale).
pub fn ccmd8m_mix(split: Split, seed: u64, divisor: u64) -> MixSpec {
    MixSpec {
        split,
        seed,
        entries: rows_for(split)
            .iter()
            .map(|(name, kind, sources, n)| MixEntry {
                name: Some(name.to_string()),
                kind: *kind,
                sources: sources.to_vec(),
                quota: Quota::Count(n / divisor.max(1)),
            })
            .collect(),
    }
}

/// Reference table for a split; `divisor == 1` marks rows as full-scale targets.
pub fn ccmd8m_reference(split: Split, divisor: u64) -> ReferenceTable {
    ReferenceTable {
        name: format!("ccmd8m-{split:?}-1:{divisor}").to_lowercase(),
        rows: rows_for(split)
            .iter()
            .map(|(name, _, _, n)| ReferenceRow {
                entry: name.to_string(),
                expected: n / divisor.max(1),
                tolerance: 0,
                full_scale: divisor <= 1,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, LabeledBoxes, Payload};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(source: SourceName, i: usize) -> TaskSample {
        let id = crate::model::namespaced(source, &i.to_string());
        TaskSample::new(
            format!("{id}#det"),
            TaskKind::Detection,
            Some(id),
            Payload::Detection {
                width: 100,
                height: 100,
                objects: vec![LabeledBoxes {
                    label: "x".into(),
                    boxes: vec![BBox::pixels(0., 0., i as f64 % 50. + 1., 1.)],
                }],
            },
        )
        .unwrap()
    }

    fn mix(entries: Vec<MixEntry>) -> MixSpec {
        MixSpec {
            split: Split::Pretrain,
            seed: 7,
            entries,
        }
    }

    fn entry(kind: TaskKind, n: u64) -> MixEntry {
        MixEntry {
            name: None,
            kind,
            sources: vec![],
            quota: Quota::Count(n),
        }
    }

    #[test]
    fn reservoir_matches_algorithm_r_by_hand() {
        // Independent replay of Algorithm R with the same random stream.
        let items: Vec<u32> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let got: Vec<u32> = reservoir_sample(items.iter(), 5, &mut rng).into_iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut want = vec![0, 1, 2, 3, 4];
        for i in 5..100u32 {
            let j = rng.gen_range(0..=i as usize);
            if j < 5 {
                want[j] = i;
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn reservoir_is_roughly_uniform() {
        let items: Vec<usize> = (0..10).collect();
        let mut hits = [0usize; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20_000 {
            for &x in reservoir_sample(items.iter(), 3, &mut rng) {
                hits[x] += 1;
            }
        }
        // Expected 6000 each.
        assert!(hits.iter().all(|&h| (5600..6400).contains(&h)), "{hits:?}");
    }

    #[test]
    fn quota_is_exact_and_reproducible() {
        let inputs: Vec<_> = (0..100).map(|i| det(SourceName::MsCoco, i)).collect();
        let m = mix(vec![entry(TaskKind::Detection, 5)]);
        let (a, ma) = consolidate(&m, inputs.clone()).unwrap();
        let (b, mb) = consolidate(&m, inputs).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.windows(2).all(|w| w[0].sample_id < w[1].sample_id));
    }

    #[test]
    fn zero_quota_and_shortfall() {
        let inputs: Vec<_> = (0..3).map(|i| det(SourceName::MsCoco, i)).collect();
        let m = mix(vec![entry(TaskKind::Reg, 0), entry(TaskKind::Detection, 10)]);
        let (out, man) = consolidate(&m, inputs).unwrap();
        assert_eq!(man.entries[0].selected, 0);
        assert_eq!(man.entries[1].selected, 3);
        assert_eq!(man.entries[1].shortfall, 7);
        assert_eq!(out.len(), 3);
        assert_eq!(man.warnings.len(), 1);
    }

    #[test]
    fn unresolved_source() {
        let m = mix(vec![entry(TaskKind::Caption, 1)]);
        assert!(matches!(
            consolidate(&m, vec![det(SourceName::MsCoco, 0)]),
            Err(ConsolidateError::UnresolvedSource { .. })
        ));
    }

    #[test]
    fn duplicate_payloads_survive_once() {
        let a = det(SourceName::MsCoco, 1);
        let mut b = a.clone();
        b.sample_id = "mscoco:copy#det".into();
        let m = mix(vec![entry(TaskKind::Detection, 10)]);
        let (out, man) = consolidate(&m, vec![a, b]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(man.deduped, 1);
    }

    #[test]
    fn source_filter_and_fraction() {
        let inputs: Vec<_> = (0..10)
            .map(|i| det(SourceName::MsCoco, i))
            .chain((0..10).map(|i| det(SourceName::V3Det, i)))
            .collect();
        let m = mix(vec![MixEntry {
            name: Some("coco half".into()),
            kind: TaskKind::Detection,
            sources: vec![SourceName::MsCoco],
            quota: Quota::Fraction(0.5),
        }]);
        let (out, man) = consolidate(&m, inputs).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|s| s.source() == Some(SourceName::MsCoco)));
        assert_eq!(man.entries[0].available, 10);
    }

    #[test]
    fn overlapping_entries_do_not_duplicate() {
        let inputs: Vec<_> = (0..4).map(|i| det(SourceName::MsCoco, i)).collect();
        let mut e2 = entry(TaskKind::Detection, 4);
        e2.name = Some("again".into());
        let m = mix(vec![entry(TaskKind::Detection, 4), e2]);
        let (out, man) = consolidate(&m, inputs).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(man.entries[1].overlap_dropped, 4);
        let ids: HashSet<_> = out.iter().map(|s| &s.sample_id).collect();
        assert_eq!(ids.len(), out.len());
    }

    #[test]
    fn raising_one_quota_keeps_other_entries() {
        let inputs: Vec<_> = (0..50)
            .map(|i| det(SourceName::MsCoco, i))
            .chain((0..50).map(|i| det(SourceName::V3Det, i)))
            .collect();
        let build = |coco: u64| {
            mix(vec![
                MixEntry { name: Some("coco".into()), kind: TaskKind::Detection, sources: vec![SourceName::MsCoco], quota: Quota::Count(coco) },
                MixEntry { name: Some("v3det".into()), kind: TaskKind::Detection, sources: vec![SourceName::V3Det], quota: Quota::Count(7) },
            ])
        };
        let pick = |m: &MixSpec| -> BTreeSet<String> {
            consolidate(m, inputs.clone())
                .unwrap()
                .0
                .into_iter()
                .filter(|s| s.source() == Some(SourceName::V3Det))
                .map(|s| s.sample_id)
                .collect()
        };
        assert_eq!(pick(&build(3)), pick(&build(30)));
    }

    #[test]
    fn mix_validation() {
        let mut m = mix(vec![entry(TaskKind::GeneralVQA, 1)]);
        assert!(matches!(m.validate(), Err(ConsolidateError::InvalidMix { .. })));
        m.split = Split::Instruction;
        assert!(m.validate().is_ok());
        m.entries[0].quota = Quota::Fraction(1.5);
        assert!(m.validate().is_err());
        let json = r#"{"split":"pretrain","seed":1,"entries":[{"kind":"REC","quota":{"count":3}},{"kind":"Caption","quota":{"fraction":0.25}}]}"#;
        let m: MixSpec = serde_json::from_str(json).unwrap();
        assert_eq!(m.entries[1].quota, Quota::Fraction(0.25));
    }

    #[test]
    fn verify_rows() {
        let inputs: Vec<_> = (0..10).map(|i| det(SourceName::MsCoco, i)).collect();
        let mut e = entry(TaskKind::Detection, 4);
        e.name = Some("Object Detection".into());
        let (_, man) = consolidate(&mix(vec![e]), inputs).unwrap();
        let exact = ReferenceTable {
            name: "t".into(),
            rows: vec![ReferenceRow { entry: "Object Detection".into(), expected: 4, tolerance: 0, full_scale: false }],
        };
        assert!(verify_manifest(&man, &exact).all_pass);
        let full = ccmd8m_reference(Split::Pretrain, 1);
        let r = verify_manifest(&man, &full);
        let det_row = r.rows.iter().find(|r| r.entry == "Object Detection").unwrap();
        assert_eq!(det_row.expected, 2_107_000);
        assert_eq!(det_row.status, RowStatus::NotDeskVerifiable);
        let short = ReferenceTable {
            name: "t".into(),
            rows: vec![ReferenceRow { entry: "Object Detection".into(), expected: 6, tolerance: 0, full_scale: false }],
        };
        let r = verify_manifest(&man, &short);
        assert!(!r.all_pass);
        assert_eq!(r.rows[0].status, RowStatus::Fail { delta: -2 });
    }

    #[test]
    fn reference_totals() {
        let pre: u64 = PRETRAIN_ROWS.iter().map(|r| r.3).sum();
        let ins: u64 = INSTRUCTION_ROWS.iter().map(|r| r.3).sum();
        assert_eq!(pre, 4_192_000);
        // The instruction rows add up to 4045K although the stated total is 4.1M.
        assert_eq!(ins, 4_045_000);
        assert!(ccmd8m_mix(Split::Pretrain, 0, 1).validate().is_ok());
        assert!(ccmd8m_mix(Split::Instruction, 0, 1).validate().is_ok());
    }
}
