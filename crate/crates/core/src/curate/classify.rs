//! Rule-cascade classifier for region expressions.
//!
//! Cascade, first match wins:
//!
//! 1. tokenize on anything that is not alphanumeric, lowercase;
//! 2. strip leading articles;
//! 3. `ClassLevel` when at most 3 tokens remain and every token before the head
//!    (last token) is a positional/ordinal modifier;
//! 4. `Detailed` when more than 12 tokens remain, or a finite-verb marker is
//!    followed by at least 2 more tokens;
//! 5. `Concise` otherwise.
//!
//! The word lists live in a [`Lexicon`] that can be loaded from JSON.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CurateError;
use crate::model::DetailLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionLevel {
    ClassLevel,
    Concise,
    Detailed,
}

impl From<ExpressionLevel> for DetailLevel {
    fn from(l: ExpressionLevel) -> Self {
        match l {
            ExpressionLevel::ClassLevel => DetailLevel::ClassLevel,
            ExpressionLevel::Concise => DetailLevel::Concise,
            ExpressionLevel::Detailed => DetailLevel::Detailed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionClass {
    pub level: ExpressionLevel,
    /// Identifiers of the rules that fired, in cascade order.
    pub evidence: Vec<String>,
}

pub mod rule {
    pub const STRIP_ARTICLES: &str = "strip-articles";
    pub const ARTICLES_ONLY: &str = "class-level:articles-only";
    pub const BARE_NOUN: &str = "class-level:bare-noun";
    pub const POSITIONAL: &str = "class-level:positional-modifiers";
    pub const LENGTH: &str = "detailed:length";
    pub const VERB: &str = "detailed:verb";
    pub const DEFAULT: &str = "concise:default";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lexicon {
    pub articles: BTreeSet<String>,
    /// Positional and ordinal modifiers that do not make an expression more
    /// specific than its category.
    pub stop_list: BTreeSet<String>,
    pub verb_markers: BTreeSet<String>,
    /// Words that open a post-modifier ("of", "with", "that", ...); the head
    /// noun precedes them.
    pub head_boundaries: BTreeSet<String>,
    pub class_level_max_tokens: usize,
    pub detailed_min_tokens: usize,
    pub verb_min_followers: usize,
}

fn set(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            articles: set(&["a", "an", "the"]),
            stop_list: set(&[
                "left", "right", "top", "bottom", "front", "back", "middle", "center", "near",
                "far", "first", "second", "third", "upper", "lower",
            ]),
            verb_markers: set(&[
                "is", "are", "was", "were", "has", "have", "had", "wearing", "holding",
                "standing", "sitting", "riding", "walking", "running", "looking", "playing",
                "eating", "carrying", "lying", "laying", "leaning", "hanging", "using", "watching",
                "talking", "driving", "reading", "drinking", "waiting", "facing", "flying",
                "parked", "covered", "filled",
            ]),
            head_boundaries: set(&[
                "of", "with", "in", "on", "at", "by", "near", "next", "behind", "under", "above",
                "beside", "between", "from", "to", "down", "up", "into", "over", "that", "which",
                "who", "whose", "wearing", "holding",
            ]),
            class_level_max_tokens: 3,
            detailed_min_tokens: 12,
            verb_min_followers: 2,
        }
    }
}

impl Lexicon {
    /// Loads a lexicon from JSON. Missing keys fall back to the defaults.
    pub fn load(path: &Path) -> Result<Self, CurateError> {
        let bytes = std::fs::read(path).map_err(|e| CurateError::Lexicon {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| CurateError::Lexicon {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn content<'a>(&self, tokens: &'a [String]) -> &'a [String] {
        let start = tokens
            .iter()
            .take_while(|t| self.articles.contains(*t))
            .count();
        &tokens[start..]
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn classify_expression(expr: &str, lex: &Lexicon) -> Result<ExpressionClass, CurateError> {
    let tokens = tokenize(expr);
    if tokens.is_empty() {
        return Err(CurateError::EmptyExpression);
    }
    let content = lex.content(&tokens);
    let mut evidence = Vec::new();
    if content.len() < tokens.len() {
        evidence.push(rule::STRIP_ARTICLES.to_string());
    }
    let done = |level, mut evidence: Vec<String>, id: String| {
        evidence.push(id);
        Ok(ExpressionClass { level, evidence })
    };

    if content.len() <= lex.class_level_max_tokens {
        let modifiers = &content[..content.len().saturating_sub(1)];
        if modifiers.iter().all(|t| lex.stop_list.contains(t)) {
            let id = match content.len() {
                0 => rule::ARTICLES_ONLY,
                1 => rule::BARE_NOUN,
                _ => rule::POSITIONAL,
            };
            return done(ExpressionLevel::ClassLevel, evidence, id.to_string());
        }
    }
    if content.len() > lex.detailed_min_tokens {
        return done(ExpressionLevel::Detailed, evidence, rule::LENGTH.to_string());
    }
    let verb = content.iter().enumerate().find(|(i, t)| {
        lex.verb_markers.contains(*t) && content.len() - i - 1 >= lex.verb_min_followers
    });
    if let Some((_, v)) = verb {
        return done(ExpressionLevel::Detailed, evidence, format!("{}:{v}", rule::VERB));
    }
    done(ExpressionLevel::Concise, evidence, rule::DEFAULT.to_string())
}

/// Head noun of an expression: the last token before the first verb marker
/// or post-modifier, once articles and stop-list modifiers are removed,
/// falling back to the last token overall.
pub fn head_noun(expr: &str, lex: &Lexicon) -> Option<String> {
    let tokens = tokenize(expr);
    let start = tokens.iter().take_while(|t| lex.articles.contains(*t)).count();
    let end = tokens[start..]
        .iter()
        .skip(1)
        .position(|t| lex.verb_markers.contains(t) || lex.head_boundaries.contains(t))
        .map_or(tokens.len(), |i| start + 1 + i);
    tokens[..end]
        .iter()
        .rev()
        .find(|t| !lex.articles.contains(*t) && !lex.stop_list.contains(*t))
        .or_else(|| tokens.last())
        .cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(s: &str) -> ExpressionLevel {
        classify_expression(s, &Lexicon::default()).unwrap().level
    }

    #[test]
    fn examples() {
        assert_eq!(level("left sandwich"), ExpressionLevel::ClassLevel);
        assert_eq!(level("dog"), ExpressionLevel::ClassLevel);
        assert_eq!(
            level("a man wearing a red jacket standing next to a blue bicycle near the fence"),
            ExpressionLevel::Detailed
        );
        assert_eq!(level("a red car with open doors"), ExpressionLevel::Concise);
        assert_eq!(level("The top-left  Sandwich!"), ExpressionLevel::ClassLevel);
        assert_eq!(level("the"), ExpressionLevel::ClassLevel);
        assert_eq!(level("man is here"), ExpressionLevel::Concise);
        assert_eq!(level("man is sitting down"), ExpressionLevel::Detailed);
        assert!(matches!(
            classify_expression(" ?! ", &Lexicon::default()),
            Err(CurateError::EmptyExpression)
        ));
    }

    #[test]
    fn evidence_names_the_rules() {
        let c = classify_expression("the left sandwich", &Lexicon::default()).unwrap();
        assert_eq!(c.evidence, vec![rule::STRIP_ARTICLES, rule::POSITIONAL]);
        let c = classify_expression("a woman holding an umbrella", &Lexicon::default()).unwrap();
        assert_eq!(c.evidence.last().unwrap(), "detailed:verb:holding");
        let long = "one two three four five six seven eight nine ten eleven twelve thirteen";
        let c = classify_expression(long, &Lexicon::default()).unwrap();
        assert_eq!(c.evidence, vec![rule::LENGTH]);
    }

    #[test]
    fn class_and_detailed_conditions_are_disjoint() {
        let lex = Lexicon::default();
        // The class-level rule caps length below the detailed threshold and
        // requires modifiers from the stop list, which shares no verb marker.
        assert!(lex.class_level_max_tokens <= lex.detailed_min_tokens);
        assert!(lex.stop_list.is_disjoint(&lex.verb_markers));
    }

    #[test]
    fn head_nouns() {
        let lex = Lexicon::default();
        assert_eq!(head_noun("a dog", &lex).as_deref(), Some("dog"));
        assert_eq!(head_noun("The dog on the left", &lex).as_deref(), Some("dog"));
        assert_eq!(head_noun("a man riding a bike down the street", &lex).as_deref(), Some("man"));
        assert_eq!(head_noun("a cup of coffee next to the laptop", &lex).as_deref(), Some("cup"));
        assert_eq!(head_noun("second car from left", &lex).as_deref(), Some("car"));
        assert_eq!(head_noun("left sandwich", &lex).as_deref(), Some("sandwich"));
        assert_eq!(head_noun("left", &lex).as_deref(), Some("left"));
        assert_eq!(head_noun("...", &lex), None);
    }

    #[test]
    fn lexicon_json_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.json");
        std::fs::write(&p, r#"{"stop_list": ["red"]}"#).unwrap();
        let lex = Lexicon::load(&p).unwrap();
        assert_eq!(lex.articles, Lexicon::default().articles);
        assert_eq!(
            classify_expression("red car", &lex).unwrap().level,
            ExpressionLevel::ClassLevel
        );
    }
}
