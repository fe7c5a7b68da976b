//! Minimum-perplexity option selection.
//!
//! The stem (question text) is concatenated with each option and the backend
//! scores the option continuation. Perplexity is `exp(-mean logprob)` over the
//! option's tokens (natural log, normalized per token), and the option with
//! the smallest perplexity wins; ties go to the earlier option.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{self, map_bounded, Backend, BackendError};
use crate::corpus::McqRecord;
use crate::prompting::{Template, TemplateError};

/// Recorded with every result so runs under other conventions stay comparable.
pub const NORMALIZATION: &str = "natural-log, mean over option tokens";

pub const DEFAULT_STEM: &str = "{{contexts}}\nQUESTION: {{question}}\nANSWER:";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PplError {
    #[error("record {record_id}: {source}")]
    Scoring {
        record_id: String,
        #[source]
        source: BackendError,
    },
    #[error("record {0} has no options")]
    NoOptions(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionPpl {
    pub key: String,
    pub ppl: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplResult {
    pub record_id: String,
    /// In option declaration order.
    pub per_option: Vec<OptionPpl>,
    pub chosen: String,
    pub normalization: String,
}

impl PplResult {
    pub fn ppl_of(&self, key: &str) -> Option<f64> {
        self.per_option.iter().find(|o| o.key == key).map(|o| o.ppl)
    }
}

/// `exp(-(1/m) * sum(logprobs))`.
pub fn perplexity(logprobs: &[f64]) -> f64 {
    let m = logprobs.len() as f64;
    (-logprobs.iter().sum::<f64>() / m).exp()
}

pub fn option_ppl(backend: &dyn Backend, stem: &str, option_text: &str) -> Result<(f64, usize), BackendError> {
    let lps = backend::score_tokens(backend, stem, option_text)?;
    if lps.is_empty() {
        return Err(BackendError::Protocol {
            status: 0,
            message: "backend scored zero tokens".into(),
        });
    }
    Ok((perplexity(&lps), lps.len()))
}

/// Index of the smallest value; the first one wins ties.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn render_stem(record: &McqRecord, stem_template: &Template) -> Result<String, TemplateError> {
    let mut slots = BTreeMap::new();
    slots.insert("question", record.question.clone());
    slots.insert("contexts", record.contexts.join("\n"));
    stem_template.render(&slots)
}

pub fn rank_options(
    backend: &dyn Backend,
    record: &McqRecord,
    stem_template: &Template,
) -> Result<PplResult, PplError> {
    rank_options_with(backend, record, stem_template, 1)
}

/// As [`rank_options`], scoring up to `concurrency` options at once.
pub fn rank_options_with(
    backend: &dyn Backend,
    record: &McqRecord,
    stem_template: &Template,
    concurrency: usize,
) -> Result<PplResult, PplError> {
    if record.options.is_empty() {
        return Err(PplError::NoOptions(record.id.clone()));
    }
    stem_template.check_slots(&["question", "contexts"])?;
    let stem = render_stem(record, stem_template)?;
    let scored = map_bounded(&record.options, concurrency, |_, o| option_ppl(backend, &stem, &o.text));
    let per_option = record
        .options
        .iter()
        .zip(scored)
        .map(|(o, r)| {
            let (ppl, token_count) = r.map_err(|source| PplError::Scoring {
                record_id: record.id.clone(),
                source,
            })?;
            Ok(OptionPpl {
                key: o.key.clone(),
                ppl,
                token_count,
            })
        })
        .collect::<Result<Vec<_>, PplError>>()?;
    let ppls: Vec<f64> = per_option.iter().map(|o| o.ppl).collect();
    let chosen = per_option[argmin_first(&ppls).expect("non-empty")].key.clone();
    Ok(PplResult {
        record_id: record.id.clone(),
        per_option,
        chosen,
        normalization: NORMALIZATION.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::corpus::{LabelSource, McqOption, SubsetTag};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn perplexity_formula() {
        assert_eq!(perplexity(&[0.0, 0.0]), 1.0);
        assert!(close(perplexity(&[-0.1, -0.1]), 1.1051709180756477));
        assert!(close(perplexity(&[-2.0]), 7.38905609893065));
    }

    #[test]
    fn certain_tokens_have_unit_ppl() {
        let mock = MockBackend::new(MockScript::new().unigram([("yes", 1.0)]).unwrap());
        assert_eq!(option_ppl(&mock, "stem", "yes yes").unwrap(), (1.0, 2));
    }

    #[test]
    fn argmin_breaks_ties_by_order() {
        assert_eq!(argmin_first(&[1.105, 7.389]), Some(0));
        assert_eq!(argmin_first(&[2.0, 1.0, 1.0]), Some(1));
        assert_eq!(argmin_first(&[]), None);
    }

    fn rec(options: &[(&str, &str)]) -> McqRecord {
        McqRecord {
            id: "p".into(),
            question: "q".into(),
            contexts: vec![],
            options: options.iter().map(|(k, t)| McqOption::new(*k, *t)).collect(),
            gold: None,
            long_answer: None,
            subset_tag: SubsetTag::Other,
            label_source: LabelSource::Gold,
        }
    }

    #[test]
    fn identical_options_pick_first() {
        let mock = MockBackend::new(MockScript::new().unigram([("x", 0.3), ("y", 0.7)]).unwrap());
        let stem = Template::parse("stem", DEFAULT_STEM).unwrap();
        let r = rank_options(&mock, &rec(&[("A", "x y"), ("B", "x y")]), &stem).unwrap();
        assert_eq!(r.chosen, "A");
        let single = rank_options(&mock, &rec(&[("Z", "x")]), &stem).unwrap();
        assert_eq!(single.chosen, "Z");
    }

    #[test]
    fn scoring_error_aborts_record() {
        let mock = MockBackend::new(MockScript::new().unigram([("x", 1.0)]).unwrap());
        let stem = Template::parse("stem", DEFAULT_STEM).unwrap();
        let err = rank_options(&mock, &rec(&[("A", "x"), ("B", "unknown")]), &stem).unwrap_err();
        assert!(matches!(err, PplError::Scoring { .. }));
        let no_scoring = MockBackend::new(MockScript::new());
        assert!(matches!(
            rank_options(&no_scoring, &rec(&[("A", "x")]), &stem),
            Err(PplError::Scoring { source: BackendError::Capability(_), .. })
        ));
    }
}
