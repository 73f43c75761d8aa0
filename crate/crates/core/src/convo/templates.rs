//! Instruction templates. Each templated kind carries a list of paraphrases;
//! one is picked per sample from a seeded stream.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ConvoError;
use crate::model::TaskKind;

pub const EXPR: &str = "{expr}";
pub const BOX: &str = "{box}";
pub const LABELS: &str = "{labels}";
pub const PHRASE: &str = "{phrase}";

/// Kinds whose user turn is built from a template. The dialogue kinds keep
/// their recorded turns.
pub const TEMPLATED_KINDS: [TaskKind; 6] = [
    TaskKind::Caption,
    TaskKind::Rec,
    TaskKind::Reg,
    TaskKind::Detection,
    TaskKind::Grounding,
    TaskKind::Counting,
];

pub fn is_templated(kind: TaskKind) -> bool {
    TEMPLATED_KINDS.contains(&kind)
}

/// Placeholders a template for `kind` must contain.
pub fn required_placeholders(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::Rec => &[EXPR],
        TaskKind::Reg => &[BOX],
        TaskKind::Grounding | TaskKind::Counting => &[LABELS],
        _ => &[],
    }
}

fn allowed_placeholders(kind: TaskKind, detailed: bool) -> &'static [&'static str] {
    match (kind, detailed) {
        (TaskKind::Reg, true) => &[BOX, PHRASE],
        (TaskKind::Rec, _) => &[EXPR],
        (TaskKind::Reg, false) => &[BOX],
        (TaskKind::Detection | TaskKind::Grounding | TaskKind::Counting, _) => &[LABELS],
        _ => &[],
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{[A-Za-z_]+\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePack {
    pub templates: BTreeMap<TaskKind, Vec<String>>,
    /// Templates for REG samples carrying detailed descriptions; each holds
    /// `{phrase}`, filled from `responsive_phrases`.
    #[serde(default)]
    pub reg_detailed: Vec<String>,
    #[serde(default = "default_phrases")]
    pub responsive_phrases: Vec<String>,
}

fn default_phrases() -> Vec<String> {
    vec!["more detailed".to_string()]
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for TemplatePack {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            TaskKind::Caption,
            strings(&[
                "Describe this image in detail.",
                "Give a thorough description of the picture.",
                "What does this image show? Describe it carefully.",
            ]),
        );
        templates.insert(
            TaskKind::Rec,
            strings(&[
                "Where is {expr} in the image? Answer with its coordinates.",
                "Locate {expr} and output its bounding box.",
                "Give the box of the region described as: {expr}.",
            ]),
        );
        templates.insert(
            TaskKind::Reg,
            strings(&[
                "Describe the region {box} briefly.",
                "What is in {box}? Answer with a short phrase.",
                "Provide a short description of the object at {box}.",
            ]),
        );
        templates.insert(
            TaskKind::Detection,
            strings(&[
                "Detect all objects in the image.",
                "Find every object in this picture and output their boxes.",
                "Report all objects in the image with their bounding boxes.",
            ]),
        );
        templates.insert(
            TaskKind::Grounding,
            strings(&[
                "Find the following categories in the image: {labels}.",
                "Locate every instance of {labels}. Answer None for anything absent.",
            ]),
        );
        templates.insert(
            TaskKind::Counting,
            strings(&[
                "Count the {labels} in the image and locate each one.",
                "How many {labels} are there? Give their boxes and the total.",
            ]),
        );
        Self {
            templates,
            reg_detailed: strings(&[
                "Give a {phrase} description of the region {box}.",
                "Describe the object at {box}. Make the answer {phrase}.",
            ]),
            responsive_phrases: default_phrases(),
        }
    }
}

impl TemplatePack {
    pub fn load(path: &Path) -> Result<Self, ConvoError> {
        let err = |message: String| ConvoError::TemplatePack {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let pack: TemplatePack = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        pack.validate()?;
        Ok(pack)
    }

    /// Checks that every template holds the placeholders its kind requires and
    /// no others, and that detailed REG templates can be filled.
    pub fn validate(&self) -> Result<(), ConvoError> {
        let check = |kind: TaskKind, t: &str, detailed: bool| -> Result<(), ConvoError> {
            let bad = |placeholder: &str, reason: &str| ConvoError::BadPlaceholder {
                kind,
                template: t.to_string(),
                placeholder: placeholder.to_string(),
                reason: reason.to_string(),
            };
            let mut required = required_placeholders(kind).to_vec();
            if detailed {
                required.push(PHRASE);
            }
            for p in required {
                if !t.contains(p) {
                    return Err(bad(p, "missing"));
                }
            }
            let allowed = allowed_placeholders(kind, detailed);
            for m in placeholder_re().find_iter(t) {
                if !allowed.contains(&m.as_str()) {
                    return Err(bad(m.as_str(), "not defined for this kind"));
                }
            }
            Ok(())
        };
        for (kind, list) in &self.templates {
            if !is_templated(*kind) {
                return Err(ConvoError::BadPlaceholder {
                    kind: *kind,
                    template: String::new(),
                    placeholder: String::new(),
                    reason: "dialogue kinds keep their own turns and take no templates".into(),
                });
            }
            for t in list {
                check(*kind, t, false)?;
            }
        }
        for t in &self.reg_detailed {
            check(TaskKind::Reg, t, true)?;
        }
        if !self.reg_detailed.is_empty() && self.responsive_phrases.is_empty() {
            return Err(ConvoError::BadPlaceholder {
                kind: TaskKind::Reg,
                template: self.reg_detailed[0].clone(),
                placeholder: PHRASE.into(),
                reason: "no responsive phrases configured".into(),
            });
        }
        Ok(())
    }

    pub fn for_kind(&self, kind: TaskKind) -> Result<&[String], ConvoError> {
        match self.templates.get(&kind) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(ConvoError::MissingTemplate(kind)),
        }
    }
}

/// Replaces each placeholder in one pass, so substituted text is never
/// re-scanned.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    placeholder_re()
        .replace_all(template, |c: &regex::Captures| {
            let key = &c[0];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map_or_else(|| key.to_string(), |(_, v)| v.to_string())
        })
        .into_owned()
}
