//! Parser for localization answers.
//!
//! Strict grammar, one entry per line (or `;`-separated):
//!
//! ```text
//! output  := entry (("\n" | ";") entry)*
//! entry   := label "-" (boxlist | "None") | boxlist | "None" | count
//! boxlist := box+
//! box     := "[" int ("," WS* int){3} "]"
//! ```
//!
//! A bare boxlist has an empty label (REC answers), a bare `None` answers a
//! grounding query with no categories, and a lone integer is the total of a
//! counting answer. Segments that do not match fall back to recovery: every
//! bracket group of four integers is attached to the nearest preceding word
//! that is not a function word. Each recovery is reported as a diagnostic.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_box, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub label: String,
    /// Grid boxes; empty for a `None` entry.
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "diagnostic")]
pub enum Diagnostic {
    /// A segment outside the grammar whose bracket groups were recovered.
    Recovered { segment: String, boxes: usize },
    DroppedBox { text: String, reason: String },
    UnlabeledBox { text: String },
    IgnoredSegment { segment: String },
    RepeatedCount { kept: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseOutput {
    /// One entry per label, in order of first appearance.
    pub entries: Vec<Localization>,
    pub count: Option<u64>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseOutput {
    pub fn recovered(&self) -> bool {
        self.diagnostics
            .iter()
            .any(|d| matches!(d, Diagnostic::Recovered { .. }))
    }

    pub fn boxes(&self) -> impl Iterator<Item = (&str, &BBox)> {
        self.entries
            .iter()
            .flat_map(|e| e.boxes.iter().map(move |b| (e.label.as_str(), b)))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no boxes found ({} diagnostics)", diagnostics.len())]
    NoBoxesFound { diagnostics: Vec<Diagnostic> },
}

const BOX: &str = r"\[(\d+),\s*(\d+),\s*(\d+),\s*(\d+)\]";

/// Words skipped when looking for the label of a recovered box.
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "and", "answer", "are", "as", "at", "be", "bounding", "box", "boxes", "by", "can",
    "coordinate", "coordinates", "find", "for", "found", "from", "here", "i", "in", "is", "it",
    "its", "located", "location", "of", "on", "or", "position", "positioned", "region", "see",
    "sure", "that", "the", "there", "these", "this", "those", "to", "was", "were", "which", "with",
];

struct Patterns {
    strict_box: Regex,
    loose_box: Regex,
    entry: Regex,
    bare: Regex,
    count: Regex,
    word: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        strict_box: Regex::new(BOX).unwrap(),
        loose_box: Regex::new(r"\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]").unwrap(),
        entry: Regex::new(&format!(r"^(?P<label>[^\[\]]+?)\s*-\s*(?P<body>(?:{BOX})+|None)$")).unwrap(),
        bare: Regex::new(&format!(r"^(?:{BOX})+$")).unwrap(),
        count: Regex::new(r"^\d+$").unwrap(),
        word: Regex::new(r"\p{L}[\p{L}\p{N}'_]*").unwrap(),
    })
}

/// Converts the four captures of a box match into a valid grid box.
fn grid_box(c: &regex::Captures, bins: u32) -> Result<BBox, String> {
    let mut v = [0u32; 4];
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = c[i + 1].parse().map_err(|_| format!("integer {} out of range", &c[i + 1]))?;
    }
    validate_box(BBox::grid(v[0], v[1], v[2], v[3], bins), bins as f64, bins as f64)
        .map_err(|e| e.to_string())
}

#[derive(Default)]
struct Builder {
    out: ParseOutput,
    saw_none: bool,
}

impl Builder {
    fn entry(&mut self, label: &str) -> &mut Localization {
        let i = match self.out.entries.iter().position(|e| e.label == label) {
            Some(i) => i,
            None => {
                self.out.entries.push(Localization {
                    label: label.to_string(),
                    boxes: Vec::new(),
                });
                self.out.entries.len() - 1
            }
        };
        &mut self.out.entries[i]
    }

    fn boxes(&mut self, body: &str, bins: u32) -> Vec<BBox> {
        let mut kept = Vec::new();
        for c in patterns().strict_box.captures_iter(body) {
            match grid_box(&c, bins) {
                Ok(b) => kept.push(b),
                Err(reason) => self.out.diagnostics.push(Diagnostic::DroppedBox {
                    text: c[0].to_string(),
                    reason,
                }),
            }
        }
        kept
    }

    fn strict(&mut self, seg: &str, bins: u32) -> bool {
        let p = patterns();
        if seg == "None" {
            self.saw_none = true;
        } else if let Some(c) = p.entry.captures(seg) {
            let label = c["label"].trim().to_string();
            let body = &c["body"];
            if body == "None" {
                self.entry(&label);
            } else {
                let boxes = self.boxes(body, bins);
                if !boxes.is_empty() {
                    self.entry(&label).boxes.extend(boxes);
                }
            }
        } else if p.bare.is_match(seg) {
            let boxes = self.boxes(seg, bins);
            if !boxes.is_empty() {
                self.entry("").boxes.extend(boxes);
            }
        } else if p.count.is_match(seg) {
            match seg.parse::<u64>() {
                Ok(n) => {
                    if self.out.count.is_some() {
                        self.out.diagnostics.push(Diagnostic::RepeatedCount { kept: n });
                    }
                    self.out.count = Some(n);
                }
                Err(_) => return false,
            }
        } else {
            return false;
        }
        true
    }

    fn recover(&mut self, seg: &str, bins: u32) {
        let p = patterns();
        let groups: Vec<_> = p.loose_box.captures_iter(seg).collect();
        if groups.is_empty() {
            self.out.diagnostics.push(Diagnostic::IgnoredSegment {
                segment: seg.to_string(),
            });
            return;
        }
        // Blank out the bracket groups so their digits never become labels.
        let mut masked = seg.to_string();
        for g in &groups {
            let m = g.get(0).unwrap();
            masked.replace_range(m.range(), &" ".repeat(m.len()));
        }
        let mut recovered = 0;
        for g in &groups {
            let m = g.get(0).unwrap();
            let label = p
                .word
                .find_iter(&masked[..m.start()])
                .map(|w| w.as_str())
                .filter(|w| !FUNCTION_WORDS.contains(&w.to_lowercase().as_str()))
                .last();
            let b = match grid_box(g, bins) {
                Ok(b) => b,
                Err(reason) => {
                    self.out.diagnostics.push(Diagnostic::DroppedBox {
                        text: m.as_str().to_string(),
                        reason,
                    });
                    continue;
                }
            };
            if label.is_none() {
                self.out.diagnostics.push(Diagnostic::UnlabeledBox {
                    text: m.as_str().to_string(),
                });
            }
            self.entry(label.unwrap_or("")).boxes.push(b);
            recovered += 1;
        }
        self.out.diagnostics.push(Diagnostic::Recovered {
            segment: seg.to_string(),
            boxes: recovered,
        });
    }
}

/// Parses a localization answer into labelled grid boxes on a `bins` grid.
///
/// Fails only when the text yields no box, no `None` entry and no count.
/// Every returned coordinate appears verbatim in `text`.
pub fn parse_localization(text: &str, bins: u32) -> Result<ParseOutput, ParseError> {
    let mut b = Builder::default();
    for seg in text.split(['\n', ';']).map(str::trim).filter(|s| !s.is_empty()) {
        if !b.strict(seg, bins) {
            b.recover(seg, bins);
        }
    }
    let found = b.saw_none || b.out.count.is_some() || !b.out.entries.is_empty();
    if found {
        Ok(b.out)
    } else {
        Err(ParseError::NoBoxesFound {
            diagnostics: b.out.diagnostics,
        })
    }
}
