//! Prompting strategies over a [`Backend`]: Direct, Chain-of-Thought,
//! Chain-of-Verification and Verification-of-Choice (VoC).
//!
//! VoC runs three steps. Step 1 asks, once per option and independently,
//! why that option would be the answer. Step 2 shows all explanations
//! together and asks for a judgment on their consistency with the context.
//! Step 3 asks for the final answer given that judgment. Every exchange is
//! kept in a [`Transcript`] for auditing.

mod parse;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{self, map_bounded, Backend, BackendError, BackendRequest, Completion};
use crate::corpus::McqRecord;
use crate::jsonl::{self, JsonlError};

pub use parse::{parse_choice, Decision, Label, ParseConfidence, ParseError};
pub use template::{Template, TemplateError, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Direct,
    Cot,
    Cove,
    Voc,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Direct => "direct",
            StrategyKind::Cot => "cot",
            StrategyKind::Cove => "cove",
            StrategyKind::Voc => "voc",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(StrategyKind::Direct),
            "cot" => Ok(StrategyKind::Cot),
            "cove" => Ok(StrategyKind::Cove),
            "voc" => Ok(StrategyKind::Voc),
            other => Err(PromptError::InvalidArgument(format!(
                "unknown strategy `{other}` (direct, cot, cove, voc)"
            ))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("plan is missing explanations for option(s) {}", .0.join(", "))]
    IncompletePlan(Vec<String>),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("{0}")]
    InvalidArgument(String),
}

/// A strategy kind with its templates and decoding settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub templates: TemplateSet,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Upper bound on concurrent independent calls (VoC step 1, CoVe answers).
    pub concurrency: usize,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            templates: TemplateSet::default(),
            temperature: 0.0,
            max_tokens: 512,
            concurrency: 1,
        }
    }

    pub fn voc() -> Self {
        Self::new(StrategyKind::Voc)
    }

    pub fn with_template(mut self, name: &str, text: &str) -> Result<Self, PromptError> {
        self.templates.set(name, text)?;
        Ok(self)
    }

    pub fn with_templates_dir(mut self, dir: &Path) -> Result<Self, PromptError> {
        self.templates.load_dir(dir)?;
        Ok(self)
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    fn request(&self, prompt: String) -> BackendRequest {
        BackendRequest::new(prompt)
            .max_tokens(self.max_tokens)
            .temperature(self.temperature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub step: String,
    pub prompt: String,
    pub completion: Completion,
}

/// Everything a strategy run sent and received.
///
/// For VoC, `plan` maps option key to its step-1 explanation and
/// `verification` holds the step-2 judgment. For CoVe, `plan` maps
/// `q1`, `q2`, ... to each verification question and its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub record_id: String,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub plan: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<String>,
    #[serde(rename = "final", default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    pub exchanges: Vec<Exchange>,
}

impl Transcript {
    pub(crate) fn new(record: &McqRecord, strategy: StrategyKind) -> Self {
        Self {
            record_id: record.id.clone(),
            strategy,
            plan: BTreeMap::new(),
            verification: None,
            decision: None,
            exchanges: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, step: impl Into<String>, prompt: String, completion: Completion) {
        self.exchanges.push(Exchange {
            step: step.into(),
            prompt,
            completion,
        });
    }
}

pub type VocTranscript = Transcript;

pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<(), JsonlError> {
    jsonl::write_atomic(path, transcripts)
}

pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>, JsonlError> {
    jsonl::read(path)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrategyErrorKind {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A failed run, carrying the exchanges completed before the failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{kind} (after {} exchange(s) for record {})", .transcript.exchanges.len(), .transcript.record_id)]
pub struct StrategyError {
    pub kind: StrategyErrorKind,
    pub transcript: Box<Transcript>,
}

fn fail(kind: impl Into<StrategyErrorKind>, transcript: Transcript) -> StrategyError {
    StrategyError {
        kind: kind.into(),
        transcript: Box::new(transcript),
    }
}

fn option_line(key: &str, text: &str) -> String {
    format!("{key}) {text}")
}

pub(crate) fn base_slots(record: &McqRecord) -> BTreeMap<&'static str, String> {
    let mut v = BTreeMap::new();
    v.insert("contexts", record.contexts.join("\n"));
    v.insert("question", record.question.clone());
    v.insert(
        "options",
        record
            .options
            .iter()
            .map(|o| option_line(&o.key, &o.text))
            .collect::<Vec<_>>()
            .join("  "),
    );
    v.insert(
        "choices",
        record
            .options
            .iter()
            .map(|o| o.text.as_str())
            .collect::<Vec<_>>()
            .join("/"),
    );
    v
}

fn check_record(record: &McqRecord) -> Result<(), PromptError> {
    record
        .validate()
        .map_err(|e| PromptError::InvalidRecord(e.to_string()))
}

/// Step-1 prompts, one per option in declaration order.
pub fn render_voc_plan(
    record: &McqRecord,
    templates: &TemplateSet,
) -> Result<Vec<(String, String)>, PromptError> {
    check_record(record)?;
    let tpl = templates.get("voc_plan")?;
    let mut slots = base_slots(record);
    record
        .options
        .iter()
        .map(|o| {
            slots.insert("option", option_line(&o.key, &o.text));
            Ok((o.key.clone(), tpl.render(&slots)?))
        })
        .collect()
}

fn explanations_block(record: &McqRecord, plan: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let missing: Vec<String> = record
        .options
        .iter()
        .filter(|o| !plan.contains_key(&o.key))
        .map(|o| o.key.clone())
        .collect();
    if !missing.is_empty() {
        return Err(PromptError::IncompletePlan(missing));
    }
    Ok(record
        .options
        .iter()
        .map(|o| {
            format!(
                "Think about why the answer is {}.\n\n{}",
                option_line(&o.key, &o.text),
                plan[&o.key].trim()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n"))
}

/// Step-2 prompt: all explanations plus the judgment directive.
pub fn render_voc_execute(
    record: &McqRecord,
    plan: &BTreeMap<String, String>,
    templates: &TemplateSet,
) -> Result<String, PromptError> {
    check_record(record)?;
    let mut slots = base_slots(record);
    slots.insert("explanations", explanations_block(record, plan)?);
    Ok(templates.get("voc_execute")?.render(&slots)?)
}

/// Step-3 prompt: the judgment and the final-answer directive.
pub fn render_voc_final(
    record: &McqRecord,
    verification: &str,
    templates: &TemplateSet,
) -> Result<String, PromptError> {
    check_record(record)?;
    let mut slots = base_slots(record);
    slots.insert("verification", verification.trim().to_string());
    Ok(templates.get("voc_final")?.render(&slots)?)
}

/// Renders a single-call template (`direct`, `cot`, `cove_draft`, ...) that
/// only needs the record's base slots.
pub fn render_simple(record: &McqRecord, name: &str, templates: &TemplateSet) -> Result<String, PromptError> {
    check_record(record)?;
    Ok(templates.get(name)?.render(&base_slots(record))?)
}

fn call(backend: &dyn Backend, strategy: &Strategy, prompt: &str) -> Result<Completion, BackendError> {
    backend::complete(backend, &strategy.request(prompt.to_string()))
}

/// Runs `strategy` on `record`. The decision is parsed from the last exchange.
pub fn run_strategy(
    strategy: &Strategy,
    record: &McqRecord,
    backend: &dyn Backend,
) -> Result<(Decision, Transcript), StrategyError> {
    let mut t = Transcript::new(record, strategy.kind);
    if let Err(e) = check_record(record) {
        return Err(fail(e, t));
    }
    let final_text = match strategy.kind {
        StrategyKind::Direct | StrategyKind::Cot => {
            let name = strategy.kind.as_str();
            let prompt = match render_simple(record, name, &strategy.templates) {
                Ok(p) => p,
                Err(e) => return Err(fail(e, t)),
            };
            match call(backend, strategy, &prompt) {
                Ok(c) => {
                    let text = c.text.clone();
                    t.push(name, prompt, c);
                    text
                }
                Err(e) => return Err(fail(e, t)),
            }
        }
        StrategyKind::Voc => match run_voc(strategy, record, backend, &mut t) {
            Ok(text) => text,
            Err(kind) => return Err(fail(kind, t)),
        },
        StrategyKind::Cove => match run_cove(strategy, record, backend, &mut t) {
            Ok(text) => text,
            Err(kind) => return Err(fail(kind, t)),
        },
    };
    match parse_choice(&final_text, &record.options) {
        Ok(d) => {
            t.decision = Some(d.clone());
            Ok((d, t))
        }
        Err(e) => Err(fail(e, t)),
    }
}

fn run_voc(
    strategy: &Strategy,
    record: &McqRecord,
    backend: &dyn Backend,
    t: &mut Transcript,
) -> Result<String, StrategyErrorKind> {
    let plan_prompts = render_voc_plan(record, &strategy.templates)?;
    // Step-1 calls are independent of each other; results come back in
    // option order whatever order they complete in.
    let replies = map_bounded(&plan_prompts, strategy.concurrency, |_, (_, prompt)| {
        call(backend, strategy, prompt)
    });
    let mut first_err = None;
    for ((key, prompt), reply) in plan_prompts.into_iter().zip(replies) {
        match reply {
            Ok(c) => {
                t.plan.insert(key.clone(), c.text.trim().to_string());
                t.push(format!("plan:{key}"), prompt, c);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e.into());
    }

    let execute = render_voc_execute(record, &t.plan, &strategy.templates)?;
    let judged = call(backend, strategy, &execute)?;
    t.verification = Some(judged.text.trim().to_string());
    t.push("execute", execute, judged);

    let final_prompt = render_voc_final(record, t.verification.as_deref().unwrap_or_default(), &strategy.templates)?;
    let answer = call(backend, strategy, &final_prompt)?;
    let text = answer.text.clone();
    t.push("final", final_prompt, answer);
    Ok(text)
}

/// Splits a verification plan into questions, dropping list markers.
fn plan_questions(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*' | ' '))
                .trim_start_matches("Q:")
                .trim()
                .to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

fn run_cove(
    strategy: &Strategy,
    record: &McqRecord,
    backend: &dyn Backend,
    t: &mut Transcript,
) -> Result<String, StrategyErrorKind> {
    let draft_prompt = render_simple(record, "cove_draft", &strategy.templates)?;
    let draft = call(backend, strategy, &draft_prompt)?;
    let draft_text = draft.text.trim().to_string();
    t.push("draft", draft_prompt, draft);

    let mut slots = base_slots(record);
    slots.insert("draft", draft_text);
    let plan_prompt = strategy.templates.get("cove_plan").map_err(PromptError::from)?.render(&slots).map_err(PromptError::from)?;
    let plan = call(backend, strategy, &plan_prompt)?;
    let questions = plan_questions(&plan.text);
    t.push("plan", plan_prompt, plan);

    // Each question is answered without seeing the draft or other answers.
    let answer_tpl = strategy.templates.get("cove_answer").map_err(PromptError::from)?;
    let prompts: Vec<String> = questions
        .iter()
        .map(|q| {
            let mut s = BTreeMap::new();
            s.insert("contexts", record.contexts.join("\n"));
            s.insert("verification_question", q.clone());
            answer_tpl.render(&s)
        })
        .collect::<Result<_, _>>()
        .map_err(PromptError::from)?;
    let answers = map_bounded(&prompts, strategy.concurrency, |_, p| call(backend, strategy, p));
    let mut block = Vec::with_capacity(questions.len());
    for (i, ((q, prompt), a)) in questions.iter().zip(prompts).zip(answers).enumerate() {
        let a = a?;
        let qa = format!("Q: {q}\nA: {}", a.text.trim());
        t.plan.insert(format!("q{}", i + 1), qa.clone());
        block.push(qa);
        t.push(format!("verify:{}", i + 1), prompt, a);
    }
    let verification = block.join("\n");
    t.verification = Some(verification.clone());

    slots.insert("verification", verification);
    let final_prompt = strategy.templates.get("cove_final").map_err(PromptError::from)?.render(&slots).map_err(PromptError::from)?;
    let answer = call(backend, strategy, &final_prompt)?;
    let text = answer.text.clone();
    t.push("final", final_prompt, answer);
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::corpus::{pubmedqa_options, LabelSource, McqOption, SubsetTag};

    fn record() -> McqRecord {
        McqRecord {
            id: "r1".into(),
            question: "Does it work?".into(),
            contexts: vec!["It was tested.".into(), "It worked.".into()],
            options: pubmedqa_options(),
            gold: Some("A".into()),
            long_answer: None,
            subset_tag: SubsetTag::PqaL,
            label_source: LabelSource::Gold,
        }
    }

    #[test]
    fn plan_prompts_one_per_option() {
        let prompts = render_voc_plan(&record(), &TemplateSet::default()).unwrap();
        assert_eq!(prompts.len(), 3);
        assert!(prompts[0].1.ends_with("Think about why the answer is A) yes."));
        assert!(prompts[2].1.contains("A) yes  B) no  C) maybe"));
        let mut one = record();
        one.options = vec![McqOption::new("A", "yes")];
        one.gold = None;
        assert_eq!(render_voc_plan(&one, &TemplateSet::default()).unwrap().len(), 1);
    }

    #[test]
    fn execute_needs_every_explanation() {
        let mut plan = BTreeMap::new();
        plan.insert("A".to_string(), "because".to_string());
        plan.insert("B".to_string(), "because not".to_string());
        assert_eq!(
            render_voc_execute(&record(), &plan, &TemplateSet::default()),
            Err(PromptError::IncompletePlan(vec!["C".into()]))
        );
        plan.insert("C".to_string(), "unclear".to_string());
        let p = render_voc_execute(&record(), &plan, &TemplateSet::default()).unwrap();
        assert!(p.contains("judge the yes/no/maybe thinking process"));
        assert!(p.contains("because not"));
    }

    #[test]
    fn direct_strategy_single_exchange() {
        let mock = MockBackend::new(MockScript::new().contains("QUESTION", "B"));
        let (d, t) = run_strategy(&Strategy::new(StrategyKind::Direct), &record(), &mock).unwrap();
        assert_eq!(d.choice, "B");
        assert_eq!(t.exchanges.len(), 1);
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn voc_call_count_and_partial_transcript() {
        let script = MockScript::new()
            .contains("Generate Final Response", "Answer: C")
            .contains("Please judge", "C looks most consistent.")
            .contains("Think about why", "An explanation.");
        let mock = MockBackend::new(script);
        let (d, t) = run_strategy(&Strategy::voc(), &record(), &mock).unwrap();
        assert_eq!(d.choice, "C");
        assert_eq!(mock.calls(), 5);
        assert_eq!(t.exchanges.len(), 5);

        let broken = MockBackend::new(
            MockScript::new()
                .contains("Generate Final Response", "I am unsure")
                .contains("Please judge", "hmm")
                .contains("Think about why", "Because."),
        );
        let err = run_strategy(&Strategy::voc(), &record(), &broken).unwrap_err();
        assert!(matches!(err.kind, StrategyErrorKind::Parse(_)));
        assert_eq!(err.transcript.exchanges.len(), 5);
    }

    #[test]
    fn backend_failure_keeps_partial_transcript() {
        let mock = MockBackend::new(MockScript::new().contains("Think about why", "x")).failing_after(3);
        let err = run_strategy(&Strategy::voc(), &record(), &mock).unwrap_err();
        assert!(matches!(err.kind, StrategyErrorKind::Backend(BackendError::Transport { .. })));
        assert_eq!(err.transcript.plan.len(), 3);
        assert_eq!(err.transcript.exchanges.len(), 3);
    }

    #[test]
    fn cove_runs_draft_plan_verify_final() {
        let script = MockScript::new()
            .contains("revise the draft", "Answer: A")
            .contains("Plan verification questions", "1. Was it tested?\n2. Did it work?")
            .contains("Answer the following question", "Yes.")
            .contains("Draft an answer", "It works. Answer: A");
        let mock = MockBackend::new(script);
        let (d, t) = run_strategy(&Strategy::new(StrategyKind::Cove), &record(), &mock).unwrap();
        assert_eq!(d.choice, "A");
        assert_eq!(mock.calls(), 5);
        assert_eq!(t.plan["q1"], "Q: Was it tested?\nA: Yes.");
        // Verification answers must not see the draft.
        assert!(mock
            .prompts()
            .iter()
            .filter(|p| p.contains("Answer the following question"))
            .all(|p| !p.contains("It works.")));
    }

    #[test]
    fn plan_question_markers() {
        assert_eq!(
            plan_questions("1. a?\n- b?\n\n  3) c?\nQ: d?"),
            vec!["a?", "b?", "c?", "d?"]
        );
    }
}
