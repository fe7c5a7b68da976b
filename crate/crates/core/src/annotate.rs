//! Pseudo-labeling of unlabeled (PQA-U style) records.
//!
//! Each record's long answer is shown to the model, either in a single direct
//! prompt or as an extra context block under Verification-of-Choice, and the
//! parsed answer becomes a pseudo gold label. Records whose answer cannot be
//! parsed are counted as unannotated and never receive a default label.
//!
//! Corpus runs checkpoint into `<out>/checkpoint/` as atomically renamed
//! segment files, so an interrupted run resumes where it stopped. Final
//! outputs are written sorted by record id:
//!
//! - `pseudo.jsonl`: pseudo-labeled records (loadable as a [`Dataset`])
//! - `labels.jsonl`: one [`PseudoLabel`] per annotated record
//! - `unannotated.jsonl`: ids and reasons for records left unlabeled
//! - `transcripts.jsonl`: every transcript, annotated or not
//! - `summary.json`: counts and label distribution

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{self, map_bounded, Backend, BackendError, BackendRequest};
use crate::corpus::{CorpusError, Dataset, LabelSource, McqRecord};
use crate::jsonl::{self, JsonlError};
use crate::prompting::{
    base_slots, parse_choice, run_strategy, Label, Strategy, StrategyErrorKind, StrategyKind, Transcript,
};

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    LongAnswerOnly,
    LongAnswerPlusVoc,
}

impl AnnotationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationMode::LongAnswerOnly => "long_answer_only",
            AnnotationMode::LongAnswerPlusVoc => "long_answer_plus_voc",
        }
    }
}

impl fmt::Display for AnnotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnnotationMode {
    type Err = AnnotateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "long_answer_only" => Ok(AnnotationMode::LongAnswerOnly),
            "long_answer_plus_voc" | "voc" => Ok(AnnotationMode::LongAnswerPlusVoc),
            _ => Err(AnnotateError::Precondition(format!(
                "unknown annotation mode `{s}` (long_answer_only, long_answer_plus_voc)"
            ))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("record {record_id}: {source}")]
    Backend {
        record_id: String,
        #[source]
        source: BackendError,
    },
    #[error("id collision between labeled and pseudo sets: {}", .0.join(", "))]
    IdCollision(Vec<String>),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_error(path: &Path, e: impl fmt::Display) -> AnnotateError {
    AnnotateError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub record_id: String,
    /// Option key of the pseudo answer.
    pub choice: String,
    pub label: Label,
    pub source: AnnotationMode,
    /// `transcripts.jsonl#<record id>`.
    pub transcript_ref: String,
    /// The VoC step-2 judgment, kept for agreement filtering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Annotation {
    Labeled {
        label: PseudoLabel,
        transcript: Transcript,
    },
    Unannotated {
        record_id: String,
        reason: String,
        transcript: Transcript,
    },
}

impl Annotation {
    pub fn record_id(&self) -> &str {
        match self {
            Annotation::Labeled { label, .. } => &label.record_id,
            Annotation::Unannotated { record_id, .. } => record_id,
        }
    }

    pub fn transcript(&self) -> &Transcript {
        match self {
            Annotation::Labeled { transcript, .. } | Annotation::Unannotated { transcript, .. } => transcript,
        }
    }

    pub fn label(&self) -> Option<&PseudoLabel> {
        match self {
            Annotation::Labeled { label, .. } => Some(label),
            Annotation::Unannotated { .. } => None,
        }
    }
}

fn check_unlabeled(record: &McqRecord) -> Result<(), AnnotateError> {
    if record.long_answer.as_deref().is_none_or(|a| a.trim().is_empty()) {
        return Err(AnnotateError::Precondition(format!(
            "record {} has no long answer",
            record.id
        )));
    }
    if record.gold.is_some() {
        return Err(AnnotateError::Precondition(format!(
            "record {} already carries a gold label",
            record.id
        )));
    }
    if record.options.is_empty() {
        return Err(AnnotateError::Precondition(format!("record {} has no options", record.id)));
    }
    Ok(())
}

/// Copy of `record` with its long answer appended as a labeled context block.
pub fn with_long_answer_context(record: &McqRecord) -> McqRecord {
    let mut r = record.clone();
    if let Some(a) = &record.long_answer {
        r.contexts.push(format!("LONG ANSWER. {}", a.trim()));
    }
    r
}

fn finish(
    record: &McqRecord,
    mode: AnnotationMode,
    transcript: Transcript,
    choice: Result<String, String>,
) -> Annotation {
    let outcome = choice.and_then(|key| {
        let text = record.option(&key).map(|o| o.text.as_str()).unwrap_or_default();
        Label::parse(text)
            .map(|l| (key.clone(), l))
            .ok_or_else(|| format!("chosen option {key} ({text:?}) is not yes/no/maybe"))
    });
    match outcome {
        Ok((choice, label)) => Annotation::Labeled {
            label: PseudoLabel {
                record_id: record.id.clone(),
                choice,
                label,
                source: mode,
                transcript_ref: format!("{TRANSCRIPTS_FILE}#{}", record.id),
                judgment: transcript.verification.clone(),
            },
            transcript,
        },
        Err(reason) => Annotation::Unannotated {
            record_id: record.id.clone(),
            reason,
            transcript,
        },
    }
}

/// Annotates one unlabeled record. Backend failures are errors; unparseable
/// answers yield [`Annotation::Unannotated`].
pub fn annotate_record(
    record: &McqRecord,
    backend: &dyn Backend,
    mode: AnnotationMode,
    strategy: &Strategy,
) -> Result<Annotation, AnnotateError> {
    check_unlabeled(record)?;
    let backend_err = |source| AnnotateError::Backend {
        record_id: record.id.clone(),
        source,
    };
    match mode {
        AnnotationMode::LongAnswerOnly => {
            let mut slots = base_slots(record);
            slots.insert("long_answer", record.long_answer.clone().unwrap_or_default());
            let prompt = strategy
                .templates
                .get("annotate_long_answer")
                .and_then(|t| t.render(&slots))
                .map_err(|e| AnnotateError::Precondition(e.to_string()))?;
            let request = BackendRequest::new(prompt.clone())
                .max_tokens(strategy.max_tokens)
                .temperature(strategy.temperature);
            let completion = backend::complete(backend, &request).map_err(backend_err)?;
            let parsed = parse_choice(&completion.text, &record.options);
            let mut t = Transcript::new(record, StrategyKind::Direct);
            t.push("long_answer", prompt, completion);
            if let Ok(d) = &parsed {
                t.decision = Some(d.clone());
            }
            Ok(finish(record, mode, t, parsed.map(|d| d.choice).map_err(|e| e.to_string())))
        }
        AnnotationMode::LongAnswerPlusVoc => {
            let augmented = with_long_answer_context(record);
            let mut voc = strategy.clone();
            voc.kind = StrategyKind::Voc;
            match run_strategy(&voc, &augmented, backend) {
                Ok((d, t)) => Ok(finish(record, mode, t, Ok(d.choice))),
                Err(e) => match e.kind {
                    StrategyErrorKind::Backend(b) => Err(backend_err(b)),
                    StrategyErrorKind::Parse(p) => Ok(finish(record, mode, *e.transcript, Err(p.to_string()))),
                    StrategyErrorKind::Prompt(p) => Err(AnnotateError::Precondition(p.to_string())),
                },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub mode: AnnotationMode,
    pub total: usize,
    pub annotated: usize,
    pub unannotated: usize,
    pub label_distribution: BTreeMap<String, usize>,
    /// Records annotated by this invocation (0 on a fully resumed run).
    #[serde(skip)]
    pub newly_processed: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CheckpointMeta {
    mode: AnnotationMode,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnannotatedEntry {
    record_id: String,
    reason: String,
}

/// Options for [`annotate_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusRun<'a> {
    pub mode: AnnotationMode,
    pub strategy: &'a Strategy,
    pub concurrency_limit: usize,
    pub out_dir: &'a Path,
    /// Records per checkpoint segment.
    pub batch_size: usize,
}

impl<'a> CorpusRun<'a> {
    pub fn new(mode: AnnotationMode, strategy: &'a Strategy, out_dir: &'a Path) -> Self {
        Self {
            mode,
            strategy,
            concurrency_limit: 1,
            out_dir,
            batch_size: 32,
        }
    }

    pub fn concurrency(mut self, n: usize) -> Self {
        self.concurrency_limit = n.max(1);
        self
    }
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

fn load_checkpoint(dir: &Path, mode: AnnotationMode) -> Result<(BTreeMap<String, Annotation>, usize), AnnotateError> {
    let mut done = BTreeMap::new();
    if !dir.exists() {
        return Ok((done, 0));
    }
    let meta_path = dir.join("meta.json");
    if meta_path.exists() {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| io_error(&meta_path, e))?)
            .map_err(|e| io_error(&meta_path, e))?;
        if meta.mode != mode {
            return Err(AnnotateError::Precondition(format!(
                "checkpoint in {} was written in mode {}, not {mode}",
                dir.display(),
                meta.mode
            )));
        }
    }
    let mut segments: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("segment-") && n.ends_with(".jsonl"))
        })
        .collect();
    segments.sort();
    for seg in &segments {
        for a in jsonl::read::<Annotation>(seg)? {
            done.insert(a.record_id().to_string(), a);
        }
    }
    Ok((done, segments.len()))
}

/// Annotates every record of `dataset`, resuming from any checkpoint in
/// `run.out_dir`. An error leaves all completed batches checkpointed.
pub fn annotate_corpus(
    dataset: &Dataset,
    backend: &dyn Backend,
    run: &CorpusRun<'_>,
) -> Result<AnnotationSummary, AnnotateError> {
    for r in dataset.records() {
        check_unlabeled(r)?;
    }
    let ckpt = checkpoint_dir(run.out_dir);
    let (mut done, mut segment_no) = load_checkpoint(&ckpt, run.mode)?;
    fs::create_dir_all(&ckpt).map_err(|e| io_error(&ckpt, e))?;
    let meta = serde_json::to_string(&CheckpointMeta { mode: run.mode }).expect("meta serializes");
    jsonl::write_text_atomic(&ckpt.join("meta.json"), &meta).map_err(|e| io_error(&ckpt, e))?;

    let mut pending: Vec<&McqRecord> = dataset.records().iter().filter(|r| !done.contains_key(&r.id)).collect();
    pending.sort_by(|a, b| a.id.cmp(&b.id));
    let mut newly_processed = 0usize;
    for batch in pending.chunks(run.batch_size.max(1)) {
        let results = map_bounded(batch, run.concurrency_limit, |_, r| {
            annotate_record(r, backend, run.mode, run.strategy)
        });
        let mut finished = Vec::with_capacity(results.len());
        let mut first_err = None;
        for r in results {
            match r {
                Ok(a) => finished.push(a),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if !finished.is_empty() {
            let seg = ckpt.join(format!("segment-{segment_no:06}.jsonl"));
            jsonl::write_atomic(&seg, &finished)?;
            segment_no += 1;
            newly_processed += finished.len();
            for a in finished {
                done.insert(a.record_id().to_string(), a);
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
    }

    // Only ids of the current dataset make it into the outputs.
    let wanted: HashSet<&str> = dataset.ids().collect();
    let outcomes: Vec<&Annotation> = done.values().filter(|a| wanted.contains(a.record_id())).collect();
    write_outputs(dataset, &outcomes, run, newly_processed)
}

fn write_outputs(
    dataset: &Dataset,
    outcomes: &[&Annotation],
    run: &CorpusRun<'_>,
    newly_processed: usize,
) -> Result<AnnotationSummary, AnnotateError> {
    let mut pseudo_records = Vec::new();
    let mut labels = Vec::new();
    let mut unannotated = Vec::new();
    let mut transcripts = Vec::new();
    let mut distribution: BTreeMap<String, usize> = BTreeMap::new();
    for a in outcomes {
        transcripts.push(a.transcript().clone());
        match a {
            Annotation::Labeled { label, .. } => {
                let mut r = dataset.get(&label.record_id).expect("filtered to dataset ids").clone();
                r.gold = Some(label.choice.clone());
                r.label_source = LabelSource::Pseudo;
                pseudo_records.push(r);
                *distribution.entry(label.label.as_str().to_string()).or_default() += 1;
                labels.push(label.clone());
            }
            Annotation::Unannotated { record_id, reason, .. } => unannotated.push(UnannotatedEntry {
                record_id: record_id.clone(),
                reason: reason.clone(),
            }),
        }
    }
    let summary = AnnotationSummary {
        mode: run.mode,
        total: outcomes.len(),
        annotated: labels.len(),
        unannotated: unannotated.len(),
        label_distribution: distribution,
        newly_processed,
    };
    let out = run.out_dir;
    jsonl::write_atomic(&out.join("pseudo.jsonl"), &pseudo_records)?;
    jsonl::write_atomic(&out.join("labels.jsonl"), &labels)?;
    jsonl::write_atomic(&out.join("unannotated.jsonl"), &unannotated)?;
    jsonl::write_atomic(&out.join(TRANSCRIPTS_FILE), &transcripts)?;
    let body = serde_json::to_string_pretty(&summary).map_err(JsonlError::from)? + "\n";
    let path = out.join("summary.json");
    jsonl::write_text_atomic(&path, &body).map_err(|e| io_error(&path, e))?;
    Ok(summary)
}

/// Union of a labeled set and a pseudo-labeled set. Pseudo records are tagged
/// [`LabelSource::Pseudo`]; ids must not collide.
pub fn merge_pseudo(labeled: &Dataset, pseudo: &Dataset) -> Result<Dataset, AnnotateError> {
    let ids: HashSet<&str> = labeled.ids().collect();
    let collisions: Vec<String> = pseudo.ids().filter(|id| ids.contains(id)).map(String::from).collect();
    if !collisions.is_empty() {
        return Err(AnnotateError::IdCollision(collisions));
    }
    let mut records = labeled.records().to_vec();
    records.extend(pseudo.records().iter().cloned().map(|mut r| {
        r.label_source = LabelSource::Pseudo;
        r
    }));
    Ok(Dataset::new(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::corpus::{pubmedqa_options, SubsetTag};

    fn unlabeled(id: &str, long_answer: &str) -> McqRecord {
        McqRecord {
            id: id.into(),
            question: format!("Question {id}?"),
            contexts: vec!["Background.".into()],
            options: pubmedqa_options(),
            gold: None,
            long_answer: Some(long_answer.into()),
            subset_tag: SubsetTag::PqaU,
            label_source: LabelSource::Gold,
        }
    }

    #[test]
    fn long_answer_only_maps_positive_answer_to_yes() {
        let mock = MockBackend::new(MockScript::new().contains("LONG ANSWER: It clearly helps", "Answer: A"));
        let a = annotate_record(
            &unlabeled("1", "It clearly helps."),
            &mock,
            AnnotationMode::LongAnswerOnly,
            &Strategy::voc(),
        )
        .unwrap();
        assert_eq!(a.label().unwrap().label, Label::Yes);
        assert_eq!(a.transcript().exchanges.len(), 1);
    }

    #[test]
    fn gold_present_is_rejected() {
        let mut r = unlabeled("1", "x");
        r.gold = Some("A".into());
        let mock = MockBackend::new(MockScript::new());
        assert!(matches!(
            annotate_record(&r, &mock, AnnotationMode::LongAnswerOnly, &Strategy::voc()),
            Err(AnnotateError::Precondition(_))
        ));
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn unparseable_answer_is_not_guessed() {
        let mock = MockBackend::new(MockScript::new().contains("LONG ANSWER", "unclear"));
        let a = annotate_record(&unlabeled("1", "x"), &mock, AnnotationMode::LongAnswerOnly, &Strategy::voc()).unwrap();
        assert!(matches!(a, Annotation::Unannotated { .. }));
    }

    #[test]
    fn voc_mode_injects_long_answer_block() {
        let script = MockScript::new()
            .contains("Generate Final Response", "Answer: B")
            .contains("Please judge", "B is consistent with the long answer.")
            .contains("Think about why", "Explanation.");
        let mock = MockBackend::new(script);
        let a = annotate_record(
            &unlabeled("7", "No benefit was found."),
            &mock,
            AnnotationMode::LongAnswerPlusVoc,
            &Strategy::voc(),
        )
        .unwrap();
        let label = a.label().unwrap();
        assert_eq!(label.label, Label::No);
        assert_eq!(label.judgment.as_deref(), Some("B is consistent with the long answer."));
        assert_eq!(mock.calls(), 5);
        assert!(mock.prompts()[0].contains("LONG ANSWER. No benefit was found."));
        assert!(mock.prompts()[0].contains("Background."));
    }

    #[test]
    fn empty_corpus_gives_zero_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockBackend::new(MockScript::new());
        let strategy = Strategy::voc();
        let run = CorpusRun::new(AnnotationMode::LongAnswerOnly, &strategy, dir.path());
        let s = annotate_corpus(&Dataset::default(), &mock, &run).unwrap();
        assert_eq!((s.total, s.annotated, s.unannotated), (0, 0, 0));
        assert_eq!(fs::read_to_string(dir.path().join("pseudo.jsonl")).unwrap(), "");
    }

    #[test]
    fn merge_rules() {
        let labeled = Dataset::new(vec![{
            let mut r = unlabeled("a", "x");
            r.subset_tag = SubsetTag::PqaL;
            r.gold = Some("A".into());
            r
        }])
        .unwrap();
        let mut p = unlabeled("b", "y");
        p.gold = Some("B".into());
        p.label_source = LabelSource::Pseudo;
        let pseudo = Dataset::new(vec![p.clone()]).unwrap();
        let merged = merge_pseudo(&labeled, &pseudo).unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(merged.records()[1].label_source, LabelSource::Pseudo);
        assert_eq!(merge_pseudo(&labeled, &Dataset::default()).unwrap(), labeled);
        p.id = "a".into();
        let clash = Dataset::new(vec![p]).unwrap();
        assert!(matches!(
            merge_pseudo(&labeled, &clash),
            Err(AnnotateError::IdCollision(ids)) if ids == vec!["a".to_string()]
        ));
    }
}
