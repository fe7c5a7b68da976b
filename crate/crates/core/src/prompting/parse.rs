use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::McqOption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
    Maybe,
}

impl Label {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().trim_end_matches('.').to_ascii_lowercase().as_str() {
            "yes" => Some(Label::Yes),
            "no" => Some(Label::No),
            "maybe" => Some(Label::Maybe),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Yes => "yes",
            Label::No => "no",
            Label::Maybe => "maybe",
        }
    }
}

/// How the choice was recovered from the model's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseConfidence {
    /// An explicit `Answer: <key>`.
    Exact,
    /// `<key>)`, `the answer is <key>`, or a bare key.
    Pattern,
    /// The text of exactly one option appears.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub choice: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_label: Option<Label>,
    pub parse_confidence: ParseConfidence,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no options to choose from")]
    NoOptions,
    #[error("no option could be identified in {0:?}")]
    NoMatch(String),
}

fn key_alternation(options: &[McqOption]) -> String {
    let mut keys: Vec<&str> = options.iter().map(|o| o.key.as_str()).collect();
    keys.sort_by_key(|k| std::cmp::Reverse(k.len()));
    keys.iter().map(|k| regex::escape(k)).collect::<Vec<_>>().join("|")
}

fn decision(options: &[McqOption], key: &str, confidence: ParseConfidence) -> Decision {
    let option = options.iter().find(|o| o.key == key).expect("key comes from options");
    Decision {
        choice: option.key.clone(),
        normalized_label: Label::parse(&option.text),
        parse_confidence: confidence,
    }
}

/// Recovers the chosen option from free text.
///
/// Tried in order: an explicit `Answer: <key>` (last occurrence wins); a
/// `<key>)`, `the answer is <key>` or bare-key form naming a single distinct
/// key; the text of exactly one option as a whole word.
pub fn parse_choice(text: &str, options: &[McqOption]) -> Result<Decision, ParseError> {
    if options.is_empty() {
        return Err(ParseError::NoOptions);
    }
    let keys = key_alternation(options);

    let exact = Regex::new(&format!(
        r"(?i:answer)\s*[:：]\s*\**\s*\(?\s*({keys})(?:\)|\b|$)"
    ))
    .expect("valid regex");
    if let Some(c) = exact.captures_iter(text).last() {
        return Ok(decision(options, &c[1], ParseConfidence::Exact));
    }

    let paren = Regex::new(&format!(r"(?:^|[^\w])\(?({keys})\)")).expect("valid regex");
    let stated = Regex::new(&format!(r"(?i:answer\s+is)\s*[:：]?\s*\(?({keys})(?:\)|\b|$)"))
        .expect("valid regex");
    let bare = Regex::new(&format!(r"^\s*\(?({keys})\)?\.?\s*$")).expect("valid regex");
    let mut named: Vec<&str> = paren
        .captures_iter(text)
        .chain(stated.captures_iter(text))
        .chain(bare.captures_iter(text))
        .map(|c| c.get(1).expect("group 1").as_str())
        .collect();
    named.sort_unstable();
    named.dedup();
    if let [key] = named.as_slice() {
        return Ok(decision(options, key, ParseConfidence::Pattern));
    }

    let contained: Vec<&McqOption> = options
        .iter()
        .filter(|o| {
            let t = o.text.trim();
            !t.is_empty()
                && Regex::new(&format!(r"(?i)(?:^|\W){}(?:\W|$)", regex::escape(t)))
                    .expect("valid regex")
                    .is_match(text)
        })
        .collect();
    if let [only] = contained.as_slice() {
        return Ok(decision(options, &only.key, ParseConfidence::Fallback));
    }
    Err(ParseError::NoMatch(text.chars().take(200).collect()))
}
