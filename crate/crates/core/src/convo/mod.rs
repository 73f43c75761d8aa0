//! Conversation rendering with textual coordinates, and the matching parser.
//!
//! Boxes are written on a `NormalizedGrid` as `[x1, y1, x2, y2]`. Localization
//! answers put one label per line, `label-[..][..]`, with `label-None` for a
//! queried label that is absent.

pub mod parse;
pub mod templates;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_localization, Diagnostic, Localization, ParseError, ParseOutput};
pub use templates::{TemplatePack, TEMPLATED_KINDS};

use crate::model::{
    to_grid, turns_alternate, BBox, BoxError, ConversationRecord, LabeledBoxes, Payload,
    RegDetail, TaskKind, TaskSample, Turn,
};
use crate::seed::keyed_rng;

/// Sequence budget of the first training stage.
pub const STAGE1_BUDGET: u64 = 2048;
/// Sequence budget of the second and third stages.
pub const LATER_STAGE_BUDGET: u64 = 4096;
/// Multiplier applied to whitespace tokens, in tenths.
const SAFETY_FACTOR_TENTHS: u64 = 13;

#[derive(Debug, Error)]
pub enum ConvoError {
    #[error("no template for {0}")]
    MissingTemplate(TaskKind),
    #[error("template pack {path}: {message}")]
    TemplatePack { path: String, message: String },
    #[error("{kind} template {template:?}: placeholder {placeholder} {reason}")]
    BadPlaceholder {
        kind: TaskKind,
        template: String,
        placeholder: String,
        reason: String,
    },
    #[error("{sample_id}: {error}")]
    BadBox { sample_id: String, error: BoxError },
    #[error("{sample_id}: label {label:?} cannot be written in the answer grammar")]
    UnserializableLabel { sample_id: String, label: String },
    #[error("{sample_id}: dialogue turns do not alternate starting with the user")]
    BadDialogue { sample_id: String },
    #[error("{sample_id}: answer holds an invalid coordinate group {group}")]
    InvalidCoordinateText { sample_id: String, group: String },
    #[error("budget must be {STAGE1_BUDGET} or {LATER_STAGE_BUDGET}, got {0}")]
    BadBudget(u64),
}

impl ConvoError {
    /// Short stable name used as a ledger key.
    pub fn reason(&self) -> &'static str {
        match self {
            ConvoError::MissingTemplate(_) => "missing_template",
            ConvoError::TemplatePack { .. } => "template_pack",
            ConvoError::BadPlaceholder { .. } => "bad_placeholder",
            ConvoError::BadBox { .. } => "bad_box",
            ConvoError::UnserializableLabel { .. } => "unserializable_label",
            ConvoError::BadDialogue { .. } => "bad_dialogue",
            ConvoError::InvalidCoordinateText { .. } => "invalid_coordinate_text",
            ConvoError::BadBudget(_) => "bad_budget",
        }
    }
}

/// Writes a grid box as `[x1, y1, x2, y2]`.
pub fn serialize_box(b: &BBox) -> String {
    let [x1, y1, x2, y2] = b.grid_coords();
    format!("[{x1}, {y1}, {x2}, {y2}]")
}

fn grid_boxes(sample_id: &str, boxes: &[BBox], w: u32, h: u32, bins: u32) -> Result<String, ConvoError> {
    boxes
        .iter()
        .map(|b| {
            to_grid(*b, w as f64, h as f64, bins)
                .map(|g| serialize_box(&g))
                .map_err(|error| ConvoError::BadBox {
                    sample_id: sample_id.to_string(),
                    error,
                })
        })
        .collect()
}

fn check_label(sample_id: &str, label: &str) -> Result<(), ConvoError> {
    let bad = label.is_empty()
        || label != label.trim()
        || label.contains(['\n', ';', '[', ']'])
        || label == "None";
    if bad {
        return Err(ConvoError::UnserializableLabel {
            sample_id: sample_id.to_string(),
            label: label.to_string(),
        });
    }
    Ok(())
}

/// One `label-[..][..]` line per entry; `label-None` for an empty entry.
pub fn serialize_entries(
    sample_id: &str,
    entries: &[LabeledBoxes],
    w: u32,
    h: u32,
    bins: u32,
) -> Result<String, ConvoError> {
    let lines = entries
        .iter()
        .map(|e| {
            check_label(sample_id, &e.label)?;
            let body = if e.boxes.is_empty() {
                "None".to_string()
            } else {
                grid_boxes(sample_id, &e.boxes, w, h, bins)?
            };
            Ok(format!("{}-{body}", e.label))
        })
        .collect::<Result<Vec<_>, ConvoError>>()?;
    Ok(lines.join("\n"))
}

/// Builds the conversation for one sample.
///
/// The template paraphrase is drawn from a stream keyed by `(seed, sample_id)`,
/// so the choice does not depend on the order samples are rendered in.
pub fn serialize_sample(
    s: &TaskSample,
    pack: &TemplatePack,
    seed: u64,
    bins: u32,
) -> Result<ConversationRecord, ConvoError> {
    let id = s.sample_id.as_str();
    let turns = if let Payload::Dialogue { turns } = &s.payload {
        if !turns_alternate(turns) {
            return Err(ConvoError::BadDialogue {
                sample_id: id.to_string(),
            });
        }
        turns.clone()
    } else {
        let mut rng = keyed_rng(seed, &format!("template:{id}"));
        let detailed = matches!(s.payload, Payload::Reg { detail: RegDetail::Detailed, .. })
            && !pack.reg_detailed.is_empty();
        let list = if detailed {
            &pack.reg_detailed[..]
        } else {
            pack.for_kind(s.kind)?
        };
        let template = list.choose(&mut rng).expect("non-empty template list");
        let phrase = if detailed {
            pack.responsive_phrases
                .choose(&mut rng)
                .cloned()
                .unwrap_or_default()
        } else {
            String::new()
        };
        let (user, answer) = match &s.payload {
            Payload::Caption { text, .. } => (templates::fill(template, &[]), text.clone()),
            Payload::Rec { width, height, expression, bbox } => (
                templates::fill(template, &[(templates::EXPR, expression)]),
                grid_boxes(id, std::slice::from_ref(bbox), *width, *height, bins)?,
            ),
            Payload::Reg { width, height, bbox, description, .. } => {
                let b = grid_boxes(id, std::slice::from_ref(bbox), *width, *height, bins)?;
                (
                    templates::fill(template, &[(templates::BOX, &b), (templates::PHRASE, &phrase)]),
                    description.clone(),
                )
            }
            Payload::Detection { width, height, objects } => (
                templates::fill(template, &[(templates::LABELS, &label_list(objects))]),
                serialize_entries(id, objects, *width, *height, bins)?,
            ),
            Payload::Grounding { width, height, queries } => {
                let answer = if queries.is_empty() {
                    "None".to_string()
                } else {
                    serialize_entries(id, queries, *width, *height, bins)?
                };
                (templates::fill(template, &[(templates::LABELS, &label_list(queries))]), answer)
            }
            Payload::Counting { width, height, label, boxes } => {
                let entry = LabeledBoxes {
                    label: label.clone(),
                    boxes: boxes.clone(),
                };
                let lines = serialize_entries(id, std::slice::from_ref(&entry), *width, *height, bins)?;
                (
                    templates::fill(template, &[(templates::LABELS, label)]),
                    format!("{lines}\n{}", boxes.len()),
                )
            }
            Payload::Dialogue { .. } => unreachable!(),
        };
        vec![Turn::user(user), Turn::assistant(answer)]
    };
    check_coordinate_text(id, &turns, bins)?;
    let mut rec = ConversationRecord {
        sample_id: s.sample_id.clone(),
        image_id: s.image_id.clone(),
        turns,
        token_estimate: 0,
    };
    rec.token_estimate = estimate_length(&rec);
    Ok(rec)
}

fn label_list(entries: &[LabeledBoxes]) -> String {
    if entries.is_empty() {
        return "no categories".to_string();
    }
    entries
        .iter()
        .map(|e| e.label.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Every bracket group in an assistant turn must be a valid grid box.
fn check_coordinate_text(sample_id: &str, turns: &[Turn], bins: u32) -> Result<(), ConvoError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"\[\s*-?\d+(?:\.\d+)?\s*(?:,\s*-?\d+(?:\.\d+)?\s*){3}\]").unwrap()
    });
    for t in turns.iter().filter(|t| t.role == crate::model::Role::Assistant) {
        for m in re.find_iter(&t.text) {
            if parse_localization(m.as_str(), bins).is_err() {
                return Err(ConvoError::InvalidCoordinateText {
                    sample_id: sample_id.to_string(),
                    group: m.as_str().to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Upper-bound token estimate: whitespace tokens over all turns times 1.3,
/// rounded up.
pub fn estimate_length(rec: &ConversationRecord) -> u64 {
    let words: u64 = rec
        .turns
        .iter()
        .map(|t| t.text.split_whitespace().count() as u64)
        .sum();
    (words * SAFETY_FACTOR_TENTHS).div_ceil(10)
}

pub fn check_budget(budget: u64) -> Result<u64, ConvoError> {
    match budget {
        STAGE1_BUDGET | LATER_STAGE_BUDGET => Ok(budget),
        other => Err(ConvoError::BadBudget(other)),
    }
}

/// Budget of a training stage (1, 2 or 3).
pub fn stage_budget(stage: u8) -> u64 {
    if stage <= 1 {
        STAGE1_BUDGET
    } else {
        LATER_STAGE_BUDGET
    }
}

pub fn over_budget(rec: &ConversationRecord, budget: u64) -> bool {
    rec.token_estimate > budget
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub seed: u64,
    pub bins: u32,
    pub budget: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderLedger {
    pub read: u64,
    pub emitted: u64,
    pub over_budget: u64,
    /// Samples that could not be rendered, by reason.
    pub failed: BTreeMap<String, u64>,
    pub emitted_by_kind: BTreeMap<String, u64>,
}

impl RenderLedger {
    pub fn balanced(&self) -> bool {
        self.read == self.emitted + self.over_budget + self.failed.values().sum::<u64>()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub records: Vec<ConversationRecord>,
    pub ledger: RenderLedger,
    /// First few failures, for the error report.
    pub failures: Vec<String>,
}

const MAX_REPORTED_FAILURES: usize = 20;

/// Renders samples in input order. Over-budget records are dropped and counted.
pub fn render(samples: &[TaskSample], pack: &TemplatePack, opts: &RenderOptions) -> Result<RenderOutput, ConvoError> {
    check_budget(opts.budget)?;
    let results: Vec<_> = samples
        .par_iter()
        .map(|s| serialize_sample(s, pack, opts.seed, opts.bins).map(|r| (s.kind, r)))
        .collect();
    let mut ledger = RenderLedger {
        read: samples.len() as u64,
        ..Default::default()
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((_, rec)) if over_budget(&rec, opts.budget) => ledger.over_budget += 1,
            Ok((kind, rec)) => {
                ledger.emitted += 1;
                *ledger.emitted_by_kind.entry(kind.to_string()).or_default() += 1;
                records.push(rec);
            }
            Err(e) => {
                *ledger.failed.entry(e.reason().to_string()).or_default() += 1;
                if failures.len() < MAX_REPORTED_FAILURES {
                    failures.push(e.to_string());
                }
            }
        }
    }
    Ok(RenderOutput {
        records,
        ledger,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{from_grid, Role};
    use proptest::prelude::*;

    fn sample(kind: TaskKind, payload: Payload) -> TaskSample {
        let image = kind.needs_image().then(|| "mscoco:1".to_string());
        TaskSample::new(format!("mscoco:1#{kind}"), kind, image, payload).unwrap()
    }

    fn answer(rec: &ConversationRecord) -> &str {
        &rec.turns[1].text
    }

    #[test]
    fn box_text() {
        assert_eq!(serialize_box(&BBox::grid(0, 0, 1000, 1000, 1000)), "[0, 0, 1000, 1000]");
        assert_eq!(serialize_box(&BBox::grid(250, 250, 750, 750, 1000)), "[250, 250, 750, 750]");
        assert_eq!(serialize_box(&BBox::grid(3, 7, 4, 9, 1000)), "[3, 7, 4, 9]");
    }

    #[test]
    fn detection_and_grounding_answers() {
        let s = sample(
            TaskKind::Detection,
            Payload::Detection {
                width: 100,
                height: 100,
                objects: vec![LabeledBoxes {
                    label: "dog".into(),
                    boxes: vec![BBox::pixels(0., 0., 100., 100.), BBox::pixels(25., 25., 75., 75.)],
                }],
            },
        );
        let rec = serialize_sample(&s, &TemplatePack::default(), 1, 1000).unwrap();
        assert_eq!(answer(&rec), "dog-[0, 0, 1000, 1000][250, 250, 750, 750]");
        assert_eq!(rec.turns[0].role, Role::User);

        let s = sample(
            TaskKind::Grounding,
            Payload::Grounding {
                width: 100,
                height: 100,
                queries: vec![LabeledBoxes { label: "zebra".into(), boxes: vec![] }],
            },
        );
        let rec = serialize_sample(&s, &TemplatePack::default(), 1, 1000).unwrap();
        assert_eq!(answer(&rec), "zebra-None");
        assert!(rec.turns[0].text.contains("zebra"));

        let empty = sample(TaskKind::Grounding, Payload::Grounding { width: 1, height: 1, queries: vec![] });
        let rec = serialize_sample(&empty, &TemplatePack::default(), 1, 1000).unwrap();
        assert_eq!(answer(&rec), "None");
    }

    #[test]
    fn rec_reg_counting() {
        let pack = TemplatePack::default();
        let rec = serialize_sample(
            &sample(
                TaskKind::Rec,
                Payload::Rec { width: 100, height: 100, expression: "the red car".into(), bbox: BBox::pixels(25., 25., 75., 75.) },
            ),
            &pack,
            3,
            1000,
        )
        .unwrap();
        assert_eq!(answer(&rec), "[250, 250, 750, 750]");
        assert!(rec.turns[0].text.contains("the red car"));

        let reg = |detail| {
            sample(
                TaskKind::Reg,
                Payload::Reg {
                    width: 100,
                    height: 100,
                    bbox: BBox::pixels(25., 25., 75., 75.),
                    description: "a man in a red coat".into(),
                    detail,
                },
            )
        };
        for seed in 0..20 {
            let d = serialize_sample(&reg(RegDetail::Detailed), &pack, seed, 1000).unwrap();
            assert!(d.turns[0].text.contains("more detailed"));
            assert!(d.turns[0].text.contains("[250, 250, 750, 750]"));
            let c = serialize_sample(&reg(RegDetail::Concise), &pack, seed, 1000).unwrap();
            assert!(!c.turns[0].text.contains("more detailed"));
        }

        let cnt = serialize_sample(
            &sample(
                TaskKind::Counting,
                Payload::Counting {
                    width: 10,
                    height: 10,
                    label: "person".into(),
                    boxes: vec![BBox::pixels(0., 0., 1., 1.), BBox::pixels(1., 1., 2., 2.)],
                },
            ),
            &pack,
            0,
            1000,
        )
        .unwrap();
        assert_eq!(answer(&cnt), "person-[0, 0, 100, 100][100, 100, 200, 200]\n2");
        let parsed = parse_localization(answer(&cnt), 1000).unwrap();
        assert_eq!(parsed.count, Some(2));
        assert_eq!(parsed.entries[0].boxes.len(), 2);
    }

    #[test]
    fn template_choice_is_seeded_per_sample() {
        let pack = TemplatePack::default();
        let s = sample(TaskKind::Caption, Payload::Caption { width: 1, height: 1, text: "x".into() });
        let a = serialize_sample(&s, &pack, 5, 1000).unwrap();
        assert_eq!(a, serialize_sample(&s, &pack, 5, 1000).unwrap());
        let seen: std::collections::BTreeSet<_> = (0..40)
            .map(|seed| serialize_sample(&s, &pack, seed, 1000).unwrap().turns[0].text.clone())
            .collect();
        assert!(seen.len() > 1);
    }

    #[test]
    fn missing_template_and_dialogue_passthrough() {
        let mut pack = TemplatePack::default();
        pack.templates.remove(&TaskKind::Caption);
        let s = sample(TaskKind::Caption, Payload::Caption { width: 1, height: 1, text: "x".into() });
        assert!(matches!(serialize_sample(&s, &pack, 0, 1000), Err(ConvoError::MissingTemplate(TaskKind::Caption))));

        let turns = vec![Turn::user("hi"), Turn::assistant("hello there")];
        let s = sample(TaskKind::LanguageOnly, Payload::Dialogue { turns: turns.clone() });
        let rec = serialize_sample(&s, &pack, 0, 1000).unwrap();
        assert_eq!(rec.turns, turns);
        assert_eq!(rec.image_id, None);
        let s = sample(TaskKind::LanguageOnly, Payload::Dialogue { turns: vec![Turn::assistant("x")] });
        assert!(matches!(serialize_sample(&s, &pack, 0, 1000), Err(ConvoError::BadDialogue { .. })));
    }

    #[test]
    fn bad_labels_are_rejected() {
        let s = sample(
            TaskKind::Detection,
            Payload::Detection {
                width: 10,
                height: 10,
                objects: vec![LabeledBoxes { label: "a;b".into(), boxes: vec![BBox::pixels(0., 0., 1., 1.)] }],
            },
        );
        assert!(matches!(
            serialize_sample(&s, &TemplatePack::default(), 0, 1000),
            Err(ConvoError::UnserializableLabel { .. })
        ));
    }

    #[test]
    fn coordinate_text_in_dialogue_is_checked() {
        let s = sample(
            TaskKind::VLInstruction,
            Payload::Dialogue { turns: vec![Turn::user("where?"), Turn::assistant("at [5, 5, 2000, 9]")] },
        );
        assert!(matches!(
            serialize_sample(&s, &TemplatePack::default(), 0, 1000),
            Err(ConvoError::InvalidCoordinateText { .. })
        ));
    }

    #[test]
    fn length_estimate() {
        let mut rec = ConversationRecord { sample_id: "x".into(), image_id: None, turns: vec![], token_estimate: 0 };
        assert_eq!(estimate_length(&rec), 0);
        assert!(!over_budget(&rec, 2048));
        rec.turns = vec![Turn::user("a b c"), Turn::assistant("d e f g")];
        // 7 words * 1.3 = 9.1 -> 10
        assert_eq!(estimate_length(&rec), 10);
        rec.token_estimate = 5000;
        assert!(over_budget(&rec, 4096));
        assert_eq!(stage_budget(1), 2048);
        assert_eq!(stage_budget(3), 4096);
        assert!(check_budget(1000).is_err());
    }

    #[test]
    fn render_drops_over_budget() {
        let long = "word ".repeat(2000);
        let samples = vec![
            sample(TaskKind::Caption, Payload::Caption { width: 1, height: 1, text: long }),
            sample(TaskKind::Rec, Payload::Rec { width: 10, height: 10, expression: "x".into(), bbox: BBox::pixels(0., 0., 1., 1.) }),
        ];
        let out = render(&samples, &TemplatePack::default(), &RenderOptions { seed: 0, bins: 1000, budget: 2048 }).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.ledger.over_budget, 1);
        assert!(out.ledger.balanced());
    }

    fn entries_strategy() -> impl Strategy<Value = Vec<LabeledBoxes>> {
        let b = (0u32..600, 0u32..400, 1u32..40, 1u32..80)
            .prop_map(|(x, y, w, h)| BBox::pixels(x as f64, y as f64, (x + w) as f64, (y + h) as f64));
        prop::collection::btree_map("[a-z]{1,6}( [a-z]{1,6})?(-[a-z]{1,4})?", prop::collection::vec(b, 0..5), 0..10)
            .prop_map(|m| m.into_iter().map(|(label, boxes)| LabeledBoxes { label, boxes }).collect())
    }

    proptest! {
        #[test]
        fn grounding_round_trip(queries in entries_strategy(), bins in prop::sample::select(vec![100u32, 1000, 4096])) {
            let s = sample(TaskKind::Grounding, Payload::Grounding { width: 640, height: 480, queries: queries.clone() });
            let rec = serialize_sample(&s, &TemplatePack::default(), 0, bins).unwrap();
            let parsed = parse_localization(answer(&rec), bins).unwrap();
            prop_assert!(parsed.diagnostics.is_empty());
            prop_assert_eq!(parsed.entries.len(), queries.len());
            for (p, q) in parsed.entries.iter().zip(&queries) {
                prop_assert_eq!(&p.label, &q.label);
                let want: Vec<BBox> = q.boxes.iter().map(|b| to_grid(*b, 640., 480., bins).unwrap()).collect();
                prop_assert_eq!(&p.boxes, &want);
                for (g, b) in p.boxes.iter().zip(&q.boxes) {
                    let back = from_grid(*g, 640., 480.);
                    prop_assert!((back.x1 - b.x1).abs() <= 640. / bins as f64 + 1e-9);
                }
            }
        }

        #[test]
        fn single_box_identity(x1 in 0u32..999, y1 in 0u32..999, dx in 1u32..500, dy in 1u32..500) {
            let b = BBox::grid(x1, y1, (x1 + dx).min(1000), (y1 + dy).min(1000), 1000);
            let parsed = parse_localization(&serialize_box(&b), 1000).unwrap();
            prop_assert_eq!(&parsed.entries[0].boxes, &vec![b]);
        }

        #[test]
        fn recovery_never_invents_numbers(text in "[a-z \\[\\],0-9.!\n-]{0,80}") {
            if let Ok(out) = parse_localization(&text, 1000) {
                for (_, b) in out.boxes() {
                    for v in b.grid_coords() {
                        prop_assert!(text.contains(&v.to_string()));
                    }
                }
            }
        }
    }
}
