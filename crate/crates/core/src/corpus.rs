//! Multi-choice QA corpora: PubMedQA ingestion, statistics, splits, and
//! template verbalization of knowledge-graph triplets and exam items.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

/// The three PubMedQA answer labels, in display order.
pub const PUBMEDQA_LABELS: [&str; 3] = ["yes", "no", "maybe"];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error{}: {message}", record_suffix(.record_id))]
    Parse {
        record_id: Option<String>,
        message: String,
    },
    #[error("validation error for record {record_id}: {message}")]
    Validation { record_id: String, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("template error: {0}")]
    Template(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

fn record_suffix(id: &Option<String>) -> String {
    id.as_ref().map(|id| format!(" in record {id}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetTag {
    #[serde(rename = "PQA-L")]
    PqaL,
    #[serde(rename = "PQA-U")]
    PqaU,
    #[serde(rename = "PQA-A")]
    PqaA,
    #[serde(rename = "other")]
    Other,
}

impl SubsetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsetTag::PqaL => "PQA-L",
            SubsetTag::PqaU => "PQA-U",
            SubsetTag::PqaA => "PQA-A",
            SubsetTag::Other => "other",
        }
    }
}

impl std::str::FromStr for SubsetTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PQA-L" | "PQAL" => Ok(SubsetTag::PqaL),
            "PQA-U" | "PQAU" => Ok(SubsetTag::PqaU),
            "PQA-A" | "PQAA" => Ok(SubsetTag::PqaA),
            "OTHER" => Ok(SubsetTag::Other),
            _ => Err(CorpusError::InvalidArgument(format!(
                "unknown subset tag `{s}` (expected PQA-L, PQA-U, PQA-A or other)"
            ))),
        }
    }
}

impl fmt::Display for SubsetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a record's gold label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Gold,
    /// Model-generated label attached by the annotator.
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOption {
    pub key: String,
    pub text: String,
}

impl McqOption {
    pub fn new(key: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            text: text.into(),
        }
    }
}

/// One multi-choice QA item.
///
/// `gold` holds an option *key*; [`McqRecord::gold_label`] resolves it to the
/// option text (`yes`/`no`/`maybe` for PubMedQA).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqRecord {
    pub id: String,
    pub question: String,
    pub contexts: Vec<String>,
    pub options: Vec<McqOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_answer: Option<String>,
    pub subset_tag: SubsetTag,
    #[serde(default, skip_serializing_if = "is_gold_source")]
    pub label_source: LabelSource,
}

fn is_gold_source(s: &LabelSource) -> bool {
    *s == LabelSource::Gold
}

/// Options `A) yes`, `B) no`, `C) maybe`.
pub fn pubmedqa_options() -> Vec<McqOption> {
    ["A", "B", "C"]
        .iter()
        .zip(PUBMEDQA_LABELS)
        .map(|(k, t)| McqOption::new(*k, t))
        .collect()
}

impl McqRecord {
    pub fn option(&self, key: &str) -> Option<&McqOption> {
        self.options.iter().find(|o| o.key == key)
    }

    /// Lower-cased text of the gold option.
    pub fn gold_label(&self) -> Option<String> {
        self.gold
            .as_deref()
            .and_then(|k| self.option(k))
            .map(|o| o.text.trim().to_lowercase())
    }

    /// Option key whose text equals `label` (case-insensitive).
    pub fn key_for_label(&self, label: &str) -> Option<&str> {
        let label = label.trim();
        self.options
            .iter()
            .find(|o| o.text.trim().eq_ignore_ascii_case(label))
            .map(|o| o.key.as_str())
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |message: String| CorpusError::Validation {
            record_id: self.id.clone(),
            message,
        };
        if self.options.is_empty() {
            return Err(fail("record has no options".into()));
        }
        let mut seen = HashSet::new();
        for o in &self.options {
            if !seen.insert(o.key.as_str()) {
                return Err(fail(format!("duplicate option key `{}`", o.key)));
            }
        }
        if let Some(g) = &self.gold {
            if self.option(g).is_none() {
                return Err(fail(format!("gold `{g}` is not an option key")));
            }
        }
        if self.subset_tag == SubsetTag::PqaU {
            if self.long_answer.is_none() {
                return Err(fail("PQA-U record without a long answer".into()));
            }
            if self.gold.is_some() && self.label_source != LabelSource::Pseudo {
                return Err(fail("PQA-U record carries a non-pseudo gold label".into()));
            }
        }
        Ok(())
    }
}

/// Immutable, validated collection of records with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<McqRecord>,
}

impl Dataset {
    pub fn new(records: Vec<McqRecord>) -> Result<Self, CorpusError> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !ids.insert(r.id.as_str()) {
                return Err(CorpusError::Validation {
                    record_id: r.id.clone(),
                    message: "duplicate record id".into(),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[McqRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&McqRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn into_records(self) -> Vec<McqRecord> {
        self.records
    }

    pub fn to_jsonl(&self) -> Result<String, CorpusError> {
        Ok(jsonl::to_string(&self.records)?)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        Self::new(jsonl::from_str(text, "<memory>")?)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        Self::new(jsonl::read(path)?)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        Ok(jsonl::write_atomic(path, &self.records)?)
    }
}

#[derive(Debug, Deserialize)]
struct PubMedQaEntry {
    #[serde(rename = "QUESTION")]
    question: String,
    #[serde(rename = "CONTEXTS")]
    contexts: Vec<String>,
    #[serde(rename = "LONG_ANSWER", default)]
    long_answer: Option<String>,
    #[serde(default)]
    final_decision: Option<String>,
}

/// Parses the official PubMedQA layout: a JSON object mapping record id to
/// `{QUESTION, CONTEXTS, LONG_ANSWER, final_decision, ...}`. Records come back
/// ordered by id.
pub fn parse_pubmedqa(text: &str, subset: SubsetTag) -> Result<Dataset, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::Parse {
            record_id: None,
            message: "empty input".into(),
        });
    }
    let top: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            record_id: None,
            message: e.to_string(),
        })?;
    let mut records = Vec::with_capacity(top.len());
    for (id, value) in top {
        let entry: PubMedQaEntry =
            serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                record_id: Some(id.clone()),
                message: e.to_string(),
            })?;
        let options = pubmedqa_options();
        let gold = match subset {
            SubsetTag::PqaU => None,
            _ => {
                let decision = entry.final_decision.as_deref().ok_or_else(|| {
                    CorpusError::Validation {
                        record_id: id.clone(),
                        message: "labeled subset record has no final_decision".into(),
                    }
                })?;
                let label = decision.trim().to_lowercase();
                let idx = PUBMEDQA_LABELS
                    .iter()
                    .position(|l| *l == label)
                    .ok_or_else(|| CorpusError::Validation {
                        record_id: id.clone(),
                        message: format!("final_decision `{decision}` is not yes/no/maybe"),
                    })?;
                Some(options[idx].key.clone())
            }
        };
        records.push(McqRecord {
            id,
            question: entry.question,
            contexts: entry.contexts,
            options,
            gold,
            long_answer: entry.long_answer,
            subset_tag: subset,
            label_source: LabelSource::Gold,
        });
    }
    Dataset::new(records)
}

pub fn load_pubmedqa(path: &Path, subset: SubsetTag) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pubmedqa(&text, subset)
}

/// Loads either an official PubMedQA `.json` file or a `.jsonl` record file.
pub fn load_any(path: &Path, subset: SubsetTag) -> Result<Dataset, CorpusError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => Dataset::read_jsonl(path),
        _ => load_pubmedqa(path, subset),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub record_count: usize,
    pub labeled_count: usize,
    /// Gold label text to fraction of labeled records.
    pub label_proportions: BTreeMap<String, f64>,
    pub avg_question_len: f64,
    pub avg_context_len: f64,
    /// Mean over records that carry a long answer; 0 when none do.
    pub avg_long_answer_len: f64,
}

impl StatsReport {
    pub fn proportion(&self, label: &str) -> f64 {
        self.label_proportions.get(label).copied().unwrap_or(0.0)
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.record_count)?;
        writeln!(f, "labeled: {}", self.labeled_count)?;
        let mut labels: Vec<&String> = self.label_proportions.keys().collect();
        labels.sort_by_key(|l| {
            (
                PUBMEDQA_LABELS.iter().position(|p| p == l).unwrap_or(usize::MAX),
                l.to_string(),
            )
        });
        for label in labels {
            writeln!(f, "{label}: {:.1}%", 100.0 * self.label_proportions[label])?;
        }
        writeln!(f, "avg question length: {:.1}", self.avg_question_len)?;
        writeln!(f, "avg context length: {:.1}", self.avg_context_len)?;
        write!(f, "avg long answer length: {:.1}", self.avg_long_answer_len)
    }
}

fn whitespace_tokens(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn dataset_stats(dataset: &Dataset) -> Result<StatsReport, CorpusError> {
    let records = dataset.records();
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    let n = records.len() as f64;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut labeled = 0usize;
    let (mut q, mut c, mut la, mut la_n) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        if let Some(label) = r.gold_label() {
            *counts.entry(label).or_default() += 1;
            labeled += 1;
        }
        q += whitespace_tokens(&r.question);
        c += r.contexts.iter().map(|b| whitespace_tokens(b)).sum::<usize>();
        if let Some(a) = &r.long_answer {
            la += whitespace_tokens(a);
            la_n += 1;
        }
    }
    let label_proportions = counts
        .into_iter()
        .map(|(k, v)| (k, v as f64 / labeled as f64))
        .collect();
    Ok(StatsReport {
        record_count: records.len(),
        labeled_count: labeled,
        label_proportions,
        avg_question_len: q as f64 / n,
        avg_context_len: c as f64 / n,
        avg_long_answer_len: if la_n == 0 { 0.0 } else { la as f64 / la_n as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let t = Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        };
        if [&t.subject, &t.predicate, &t.object]
            .iter()
            .any(|f| f.trim().is_empty())
        {
            return Err(CorpusError::InvalidArgument(format!(
                "triplet has an empty field: {t:?}"
            )));
        }
        Ok(t)
    }
}

/// Reads tab-separated `subject<TAB>predicate<TAB>object` lines.
pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                [s, p, o] => Triplet::new(s.trim(), p.trim(), o.trim()),
                _ => Err(CorpusError::Parse {
                    record_id: Some(format!("line {}", i + 1)),
                    message: "expected three tab-separated fields".into(),
                }),
            }
        })
        .collect()
}

/// Draws `k` distinct triplets, deterministic under `seed`.
pub fn sample_subgraph(
    triplets: &[Triplet],
    k: usize,
    seed: u64,
) -> Result<Vec<Triplet>, CorpusError> {
    if k > triplets.len() {
        return Err(CorpusError::InvalidArgument(format!(
            "cannot sample {k} triplets from {}",
            triplets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..triplets.len()).collect();
    idx.shuffle(&mut rng);
    Ok(idx[..k].iter().map(|&i| triplets[i].clone()).collect())
}

/// A pattern with `{name}` slots. Literal braces are written `{{` and `}}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldTemplate {
    pattern: String,
    slots: BTreeSet<String>,
}

impl FieldTemplate {
    pub fn parse(pattern: &str, required: &[&str]) -> Result<Self, CorpusError> {
        let slots = Self::scan(pattern)?;
        let missing: Vec<&str> = required
            .iter()
            .copied()
            .filter(|r| !slots.contains(*r))
            .collect();
        if !missing.is_empty() {
            return Err(CorpusError::Template(format!(
                "template `{pattern}` is missing slot(s) {}",
                missing
                    .iter()
                    .map(|m| format!("{{{m}}}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(Self {
            pattern: pattern.to_string(),
            slots,
        })
    }

    fn scan(pattern: &str) -> Result<BTreeSet<String>, CorpusError> {
        let mut slots = BTreeSet::new();
        let mut chars = pattern.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                }
                '{' => {
                    let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                        return Err(CorpusError::Template(format!(
                            "bad slot `{{{name}` in `{pattern}`"
                        )));
                    }
                    slots.insert(name);
                }
                '}' => {
                    return Err(CorpusError::Template(format!(
                        "unmatched `}}` in `{pattern}`"
                    )))
                }
                _ => {}
            }
        }
        Ok(slots)
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(String::as_str)
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, CorpusError> {
        let lookup = |name: &str| {
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| CorpusError::Template(format!("no value for slot {{{name}}}")))
        };
        let mut out = String::with_capacity(self.pattern.len() + 32);
        let mut chars = self.pattern.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    out.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    out.push('}');
                }
                '{' => {
                    let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                    out.push_str(lookup(&name)?);
                }
                c => out.push(c),
            }
        }
        Ok(out)
    }
}

/// One sentence per triplet. The template must use `{s}`, `{p}` and `{o}`.
pub fn kg_to_text(triplets: &[Triplet], template: &str) -> Result<Vec<String>, CorpusError> {
    let tpl = FieldTemplate::parse(template, &["s", "p", "o"])?;
    triplets
        .iter()
        .map(|t| {
            tpl.render(&[
                ("s", t.subject.as_str()),
                ("p", t.predicate.as_str()),
                ("o", t.object.as_str()),
            ])
        })
        .collect()
}

/// An exam question with its answer and explanation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamItem {
    pub question: String,
    pub answer: String,
    pub explanation: String,
}

/// Rewrites exam items into knowledge-point text with a
/// `{question}`/`{answer}`/`{explanation}` template.
pub fn exam_to_text(items: &[ExamItem], template: &str) -> Result<Vec<String>, CorpusError> {
    let tpl = FieldTemplate::parse(template, &["question", "answer", "explanation"])?;
    items
        .iter()
        .map(|e| {
            tpl.render(&[
                ("question", e.question.as_str()),
                ("answer", e.answer.as_str()),
                ("explanation", e.explanation.as_str()),
            ])
        })
        .collect()
}

fn check_fractions(fractions: &[f64]) -> Result<(), CorpusError> {
    if fractions.is_empty() {
        return Err(CorpusError::InvalidArgument("no split fractions".into()));
    }
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(CorpusError::InvalidArgument(format!(
            "split fractions must be positive: {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidArgument(format!(
            "split fractions sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Partitions `dataset` by `fractions`, stratified on gold label (unlabeled
/// records form their own stratum). Each part keeps input order.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>, CorpusError> {
    check_fractions(fractions)?;
    let records = dataset.records();
    let mut strata: BTreeMap<Option<String>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.gold_label()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; records.len()];
    let mut part_sizes = vec![0usize; fractions.len()];
    let mut allocated_total = 0usize;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        allocated_total += n;
        // Remainders go to the largest fractional parts, then to the parts
        // furthest below their overall target.
        let mut order: Vec<usize> = (0..fractions.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            let da = fractions[a] * allocated_total as f64 - (part_sizes[a] + counts[a]) as f64;
            let db = fractions[b] * allocated_total as f64 - (part_sizes[b] + counts[b]) as f64;
            fb.total_cmp(&fa).then(db.total_cmp(&da)).then(a.cmp(&b))
        });
        for &p in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[p] += 1;
            left -= 1;
        }
        let mut cursor = 0;
        for (p, &cnt) in counts.iter().enumerate() {
            for &i in &members[cursor..cursor + cnt] {
                assignment[i] = p;
            }
            cursor += cnt;
            part_sizes[p] += cnt;
        }
    }

    let mut parts: Vec<Vec<McqRecord>> = vec![Vec::new(); fractions.len()];
    for (i, r) in records.iter().enumerate() {
        parts[assignment[i]].push(r.clone());
    }
    parts.into_iter().map(Dataset::new).collect()
}
