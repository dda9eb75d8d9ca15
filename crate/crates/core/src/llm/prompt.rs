//! Prompt templates and response parsing.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The template shipped with the crate.
pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/default.toml");

const LABELS_SLOT: &str = "{labels}";

/// What the model is asked to return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    Label,
    LabelConfidence,
    LabelScore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerDirectives {
    pub label: String,
    pub label_confidence: String,
    pub label_score: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub version: String,
    pub system: String,
    /// Task instruction; `{labels}` is replaced by the class list.
    pub instruction: String,
    /// Few-shot example block, with `{text}` and `{label}`.
    pub example: String,
    /// The query block, with `{text}`.
    pub query: String,
    pub answer: AnswerDirectives,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template is not valid TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot read template: {0}")]
    Io(#[from] std::io::Error),
    #[error("instruction must contain {{labels}} exactly once")]
    LabelsSlot,
    #[error("{0} block must contain {{text}}")]
    TextSlot(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("built-in template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(s: &str) -> Result<Self, TemplateError> {
        let t: PromptTemplate = toml::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.instruction.matches(LABELS_SLOT).count() != 1 {
            return Err(TemplateError::LabelsSlot);
        }
        if !self.example.contains("{text}") {
            return Err(TemplateError::TextSlot("example"));
        }
        if !self.query.contains("{text}") {
            return Err(TemplateError::TextSlot("query"));
        }
        Ok(())
    }

    pub fn instruction_for(&self, class_names: &[String]) -> String {
        self.instruction.replace(LABELS_SLOT, &class_names.join(", "))
    }

    pub fn directive(&self, format: AnswerFormat) -> &str {
        match format {
            AnswerFormat::Label => &self.answer.label,
            AnswerFormat::LabelConfidence => &self.answer.label_confidence,
            AnswerFormat::LabelScore => &self.answer.label_score,
        }
    }

    /// Render a system message and one user message.
    pub fn render(
        &self,
        class_names: &[String],
        examples: &[(String, usize)],
        text: &str,
        format: AnswerFormat,
    ) -> Vec<ChatMessage> {
        let mut user = format!("{}\n{}", self.instruction_for(class_names), self.directive(format));
        for (ex_text, label) in examples {
            user.push_str("\n\n");
            user.push_str(
                &self
                    .example
                    .replace("{label}", &class_names[*label])
                    .replace("{text}", ex_text),
            );
        }
        user.push_str("\n\n");
        user.push_str(&self.query.replace("{text}", text));
        vec![ChatMessage::new("system", &self.system), ChatMessage::new("user", user)]
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseError {
    #[error("response names no class: {raw:?}")]
    NoClass { raw: String },
    #[error("response names several classes {classes:?}: {raw:?}")]
    Ambiguous { raw: String, classes: Vec<String> },
    #[error("response has no confident: yes/no field: {raw:?}")]
    MissingConfidence { raw: String },
    #[error("response has no score field: {raw:?}")]
    MissingScore { raw: String },
    #[error("score {value} outside [0, 1]: {raw:?}")]
    ScoreOutOfRange { raw: String, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub label: usize,
    pub confident: Option<bool>,
    pub score: Option<f64>,
}

fn confidence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bconfident\s*[:=]\s*(yes|no|true|false)\b").unwrap())
}

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:confidence\s+)?score\s*[:=]\s*([-+]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:e[-+]?[0-9]+)?)")
            .unwrap()
    })
}

/// Maps free-text responses onto class indices.
#[derive(Debug, Clone)]
pub struct ResponseParser {
    class_names: Vec<String>,
    patterns: Vec<Regex>,
}

impl ResponseParser {
    pub fn new(class_names: &[String]) -> Self {
        let patterns = class_names
            .iter()
            .map(|c| Regex::new(&format!(r"(?i)\b{}\b", regex::escape(c))).unwrap())
            .collect();
        Self {
            class_names: class_names.to_vec(),
            patterns,
        }
    }

    /// The class whose name occurs in `raw`, ignoring case. Zero or several
    /// distinct classes is an error.
    pub fn parse_label(&self, raw: &str) -> Result<usize, ParseError> {
        let stripped = score_re().replace_all(raw, " ");
        let stripped = confidence_re().replace_all(&stripped, " ");
        let hits: Vec<usize> = (0..self.patterns.len())
            .filter(|&c| self.patterns[c].is_match(&stripped))
            .collect();
        match hits.as_slice() {
            [c] => Ok(*c),
            [] => Err(ParseError::NoClass { raw: raw.to_string() }),
            _ => Err(ParseError::Ambiguous {
                raw: raw.to_string(),
                classes: hits.iter().map(|&c| self.class_names[c].clone()).collect(),
            }),
        }
    }

    pub fn parse(&self, raw: &str, format: AnswerFormat) -> Result<ParsedAnswer, ParseError> {
        let label = self.parse_label(raw)?;
        let mut answer = ParsedAnswer {
            label,
            confident: None,
            score: None,
        };
        match format {
            AnswerFormat::Label => {}
            AnswerFormat::LabelConfidence => {
                let caps = confidence_re()
                    .captures(raw)
                    .ok_or_else(|| ParseError::MissingConfidence { raw: raw.to_string() })?;
                let v = caps[1].to_ascii_lowercase();
                answer.confident = Some(v == "yes" || v == "true");
            }
            AnswerFormat::LabelScore => {
                let caps = score_re()
                    .captures(raw)
                    .ok_or_else(|| ParseError::MissingScore { raw: raw.to_string() })?;
                let value: f64 = caps[1]
                    .parse()
                    .map_err(|_| ParseError::MissingScore { raw: raw.to_string() })?;
                if !(0.0..=1.0).contains(&value) {
                    return Err(ParseError::ScoreOutOfRange {
                        raw: raw.to_string(),
                        value,
                    });
                }
                answer.score = Some(value);
            }
        }
        Ok(answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_class_names;

    fn parser() -> ResponseParser {
        ResponseParser::new(&default_class_names())
    }

    #[test]
    fn default_template_lists_each_class_once() {
        let t = PromptTemplate::default();
        let names = default_class_names();
        let instruction = t.instruction_for(&names);
        for name in &names {
            assert_eq!(instruction.matches(name.as_str()).count(), 1, "{name}");
        }
        let msgs = t.render(&names, &[("good".into(), 0)], "bad", AnswerFormat::LabelScore);
        assert_eq!(msgs.len(), 2);
        assert!(msgs[1].content.contains("Text: good\nLabel: positive"));
        assert!(msgs[1].content.ends_with("Text: bad\nLabel:"));
        assert!(msgs[1].content.contains("score"));
    }

    #[test]
    fn template_requires_slots() {
        let bad = DEFAULT_TEMPLATE.replace("{labels}", "x");
        assert!(matches!(PromptTemplate::parse(&bad), Err(TemplateError::LabelsSlot)));
        let unknown = format!("{DEFAULT_TEMPLATE}\nextra = 1\n");
        assert!(PromptTemplate::parse(&unknown).is_err());
    }

    #[test]
    fn phrasings_resolve_uniquely() {
        let p = parser();
        let cases = [
            ("negative", 1),
            ("Negative", 1),
            ("NEGATIVE", 1),
            ("The sentiment is Negative.", 1),
            ("Label: negative", 1),
            ("**negative**", 1),
            ("negative.", 1),
            ("I would say the text is negative overall.", 1),
            ("Answer: \"negative\"", 1),
            ("  negative\n", 1),
            ("positive", 0),
            ("Sentiment: Positive!", 0),
            ("The label is positive | confident: yes", 0),
            ("positive | score: 0.93", 0),
            ("This reads as (positive).", 0),
            ("neutral", 2),
            ("It's Neutral.", 2),
            ("label=neutral", 2),
            ("The text expresses a neutral stance", 2),
            ("neutral | score: 0.5", 2),
        ];
        for (raw, want) in cases {
            assert_eq!(p.parse_label(raw), Ok(want), "{raw}");
        }
    }

    #[test]
    fn ambiguous_and_missing() {
        let p = parser();
        assert!(matches!(p.parse_label("positive or negative"), Err(ParseError::Ambiguous { .. })));
        assert!(matches!(p.parse_label("I cannot tell"), Err(ParseError::NoClass { .. })));
        assert!(matches!(p.parse_label("positively"), Err(ParseError::NoClass { .. })));
    }

    #[test]
    fn confidence_and_score_fields() {
        let p = parser();
        let a = p.parse("negative | confident: yes", AnswerFormat::LabelConfidence).unwrap();
        assert_eq!((a.label, a.confident), (1, Some(true)));
        let a = p.parse("negative | Confident: NO", AnswerFormat::LabelConfidence).unwrap();
        assert_eq!(a.confident, Some(false));
        assert!(matches!(
            p.parse("negative", AnswerFormat::LabelConfidence),
            Err(ParseError::MissingConfidence { .. })
        ));
        let a = p.parse("neutral | score: .85", AnswerFormat::LabelScore).unwrap();
        assert_eq!(a.score, Some(0.85));
        let a = p.parse("neutral | score: 1", AnswerFormat::LabelScore).unwrap();
        assert_eq!(a.score, Some(1.0));
        assert!(matches!(
            p.parse("neutral | score: 1.2", AnswerFormat::LabelScore),
            Err(ParseError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            p.parse("neutral | score: -0.1", AnswerFormat::LabelScore),
            Err(ParseError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            p.parse("neutral", AnswerFormat::LabelScore),
            Err(ParseError::MissingScore { .. })
        ));
    }
}
