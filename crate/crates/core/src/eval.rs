//! Scoring, report tables and the three stage-training recipes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("records without a gold label: {}", .0.join(", "))]
    UnlabeledGold(Vec<String>),
    #[error("missing predictions for {} record(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("duplicate prediction for record {0}")]
    DuplicatePrediction(String),
    #[error("accuracy {value} for `{name}` is outside [0, 1]")]
    AccuracyRange { name: String, value: f64 },
    #[error("nothing to report")]
    EmptyReport,
    #[error("unknown stage `{0}` (knowledge_injection, instruction_tuning, task_adaptation)")]
    UnknownStage(String),
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// What to do when a gold record has no prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Error,
    /// Count the record as wrong, predicted as [`MISSING`].
    CountWrong,
}

/// Confusion-matrix column for records without a prediction.
pub const MISSING: &str = "<missing>";

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: String,
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, String>, EvalError> {
    predictions_map(jsonl::read::<Prediction>(path)?)
}

pub fn predictions_map(preds: Vec<Prediction>) -> Result<BTreeMap<String, String>, EvalError> {
    let mut map = BTreeMap::new();
    for p in preds {
        if map.insert(p.id.clone(), p.label).is_some() {
            return Err(EvalError::DuplicatePrediction(p.id));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCount {
    pub correct: usize,
    pub total: usize,
}

/// `counts[g][p]`: gold label `labels[g]` predicted as `labels[p]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn get(&self, gold: &str, predicted: &str) -> usize {
        let idx = |l: &str| self.labels.iter().position(|x| x == l);
        match (idx(gold), idx(predicted)) {
            (Some(g), Some(p)) => self.counts[g][p],
            _ => 0,
        }
    }

    pub fn row_sum(&self, gold: &str) -> usize {
        self.labels
            .iter()
            .position(|x| x == gold)
            .map_or(0, |g| self.counts[g].iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub per_label: BTreeMap<String, LabelCount>,
    pub confusion: Confusion,
    /// Predictions whose id is not in the gold set.
    pub ignored_predictions: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let correct: usize = self.per_label.values().map(|c| c.correct).sum();
        writeln!(f, "accuracy: {:.1}% ({correct}/{})", self.accuracy * 100.0, self.n)?;
        for (label, c) in &self.per_label {
            writeln!(f, "  {label:<8} {}/{}", c.correct, c.total)?;
        }
        let width = self.confusion.labels.iter().map(String::len).max().unwrap_or(4).max(9);
        write!(f, "{:width$}", "gold\\pred")?;
        for l in &self.confusion.labels {
            write!(f, " {l:>width$}")?;
        }
        writeln!(f)?;
        for (l, row) in self.confusion.labels.iter().zip(&self.confusion.counts) {
            write!(f, "{l:width$}")?;
            for c in row {
                write!(f, " {c:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Normalizes a predicted label: an option key of the record becomes the
/// option text; anything else is lowercased and trimmed.
fn normalize(dataset: &Dataset, id: &str, label: &str) -> String {
    let label = label.trim();
    if let Some(opt) = dataset.get(id).and_then(|r| r.option(label)) {
        return opt.text.trim().to_lowercase();
    }
    label.to_lowercase()
}

/// Scores `predictions` (id to label text or option key) against the gold
/// labels of `gold`.
pub fn score(
    predictions: &BTreeMap<String, String>,
    gold: &Dataset,
    policy: MissingPolicy,
) -> Result<EvalReport, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let unlabeled: Vec<String> = gold
        .records()
        .iter()
        .filter(|r| r.gold_label().is_none())
        .map(|r| r.id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(EvalError::UnlabeledGold(unlabeled));
    }
    let missing: Vec<String> = gold
        .ids()
        .filter(|id| !predictions.contains_key(*id))
        .map(String::from)
        .collect();
    if !missing.is_empty() && policy == MissingPolicy::Error {
        return Err(EvalError::MissingPredictions(missing));
    }

    let pairs: Vec<(String, String)> = gold
        .records()
        .iter()
        .map(|r| {
            let g = r.gold_label().expect("checked above");
            let p = predictions
                .get(&r.id)
                .map_or_else(|| MISSING.to_string(), |l| normalize(gold, &r.id, l));
            (g, p)
        })
        .collect();

    let labels: Vec<String> = pairs
        .iter()
        .flat_map(|(g, p)| [g.clone(), p.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![vec![0usize; labels.len()]; labels.len()];
    let mut per_label: BTreeMap<String, LabelCount> = BTreeMap::new();
    let mut correct = 0usize;
    for (g, p) in &pairs {
        counts[index[g.as_str()]][index[p.as_str()]] += 1;
        let entry = per_label.entry(g.clone()).or_default();
        entry.total += 1;
        if g == p {
            entry.correct += 1;
            correct += 1;
        }
    }
    let ignored_predictions = predictions.keys().filter(|id| gold.get(id).is_none()).count();
    Ok(EvalReport {
        accuracy: correct as f64 / pairs.len() as f64,
        n: pairs.len(),
        per_label,
        confusion: Confusion { labels, counts },
        ignored_predictions,
    })
}

fn check_accuracy(name: &str, value: f64) -> Result<(), EvalError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(EvalError::AccuracyRange {
            name: name.into(),
            value,
        });
    }
    Ok(())
}

/// One row per stage; a stage whose accuracy fell below the previous stage
/// is marked `DECREASE`.
pub fn render_stage_report(stages: &[(String, f64)]) -> Result<String, EvalError> {
    if stages.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    for (name, acc) in stages {
        check_accuracy(name, *acc)?;
    }
    let width = stages.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    writeln!(out, "{:width$}  {:>8}  {:>7}  flag", "stage", "accuracy", "delta").unwrap();
    let mut prev: Option<f64> = None;
    for (name, acc) in stages {
        let delta = prev.map_or_else(|| "-".to_string(), |p| format!("{:+.1}", (acc - p) * 100.0));
        let flag = if prev.is_some_and(|p| *acc < p) { "DECREASE" } else { "" };
        let line = format!("{name:width$}  {:>7.1}%  {delta:>7}  {flag}", acc * 100.0);
        writeln!(out, "{}", line.trim_end()).unwrap();
        prev = Some(*acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub model: String,
    pub size: String,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub provenance: String,
    #[serde(rename = "row")]
    pub rows: Vec<LeaderboardRow>,
}

const LEADERBOARD_FIXTURE: &str = include_str!("../data/leaderboard.toml");
const STAGES_FIXTURE: &str = include_str!("../data/stages.toml");

/// The bundled reference rows. They are quoted numbers, not measurements.
pub fn reference_leaderboard() -> Leaderboard {
    toml::from_str(LEADERBOARD_FIXTURE).expect("bundled leaderboard parses")
}

#[derive(Debug, Deserialize)]
struct StagesFixture {
    stage: Vec<StageEntry>,
}

#[derive(Debug, Deserialize)]
struct StageEntry {
    name: String,
    accuracy: f64,
}

/// The two reported stage endpoints.
pub fn reference_stages() -> Vec<(String, f64)> {
    let f: StagesFixture = toml::from_str(STAGES_FIXTURE).expect("bundled stages parse");
    f.stage.into_iter().map(|s| (s.name, s.accuracy)).collect()
}

pub fn parse_stage_results(text: &str) -> Result<Vec<(String, f64)>, EvalError> {
    let f: StagesFixture = toml::from_str(text).map_err(|e| EvalError::Format {
        what: "stage results".into(),
        message: e.to_string(),
    })?;
    Ok(f.stage.into_iter().map(|s| (s.name, s.accuracy)).collect())
}

/// Reference rows plus `ours` (accuracy as a fraction), sorted by accuracy,
/// highest first. Equal accuracies keep fixture order with `ours` after them.
pub fn render_leaderboard(reference: &Leaderboard, ours: (&str, f64)) -> Result<String, EvalError> {
    check_accuracy(ours.0, ours.1)?;
    let mut rows: Vec<(String, String, f64, &str)> = reference
        .rows
        .iter()
        .map(|r| (r.model.clone(), r.size.clone(), r.accuracy, reference.provenance.as_str()))
        .collect();
    rows.push((ours.0.to_string(), "-".into(), ours.1 * 100.0, "measured"));
    rows.sort_by(|a, b| b.2.total_cmp(&a.2));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    writeln!(out, "{:>4}  {:width$}  {:>5}  {:>8}  source", "rank", "model", "size", "accuracy").unwrap();
    for (i, (model, size, acc, source)) in rows.iter().enumerate() {
        writeln!(out, "{:>4}  {model:width$}  {size:>5}  {acc:>8.1}  {source}", i + 1).unwrap();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    KnowledgeInjection,
    InstructionTuning,
    TaskAdaptation,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::KnowledgeInjection, Stage::InstructionTuning, Stage::TaskAdaptation];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::KnowledgeInjection => "knowledge_injection",
            Stage::InstructionTuning => "instruction_tuning",
            Stage::TaskAdaptation => "task_adaptation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.replace('-', "_"))
            .ok_or_else(|| EvalError::UnknownStage(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecipe {
    pub lora_rank: u32,
    pub cpoly_shared: u32,
    pub cpoly_per_task: u32,
    pub cpoly_rank: u32,
}

/// Training hyperparameters for one stage. Fields the source leaves
/// unstated are `None` rather than guessed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecipe {
    pub stage: Stage,
    pub optimizer: Option<String>,
    pub learning_rate: f64,
    pub schedule: String,
    /// Final learning rate as a fraction of the peak, for cosine schedules.
    pub final_lr_ratio: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub batch_size: u32,
    pub epochs: Option<u32>,
    pub warmup_ratio: Option<f64>,
    pub adapters: Option<AdapterRecipe>,
}

impl StageRecipe {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |what: &str| {
            Err(EvalError::Format {
                what: format!("{} recipe", self.stage),
                message: format!("{what} must be positive"),
            })
        };
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.epochs == Some(0) {
            return bad("epochs");
        }
        for (name, v) in [
            ("final_lr_ratio", self.final_lr_ratio),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("grad_clip", self.grad_clip),
            ("warmup_ratio", self.warmup_ratio),
        ] {
            if v.is_some_and(|v| !(v > 0.0)) {
                return bad(name);
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let r: StageRecipe = toml::from_str(text).map_err(|e| EvalError::Format {
            what: "recipe".into(),
            message: e.to_string(),
        })?;
        r.validate()?;
        Ok(r)
    }
}

pub fn emit_recipe(stage: Stage) -> StageRecipe {
    match stage {
        Stage::KnowledgeInjection => StageRecipe {
            stage,
            optimizer: Some("adam".into()),
            learning_rate: 7e-6,
            schedule: "cosine".into(),
            final_lr_ratio: Some(0.1),
            beta1: Some(0.9),
            beta2: Some(0.95),
            weight_decay: 0.1,
            grad_clip: Some(1.0),
            batch_size: 256,
            epochs: None,
            warmup_ratio: None,
            adapters: None,
        },
        Stage::InstructionTuning => StageRecipe {
            stage,
            optimizer: None,
            learning_rate: 6e-6,
            schedule: "cosine".into(),
            final_lr_ratio: None,
            beta1: None,
            beta2: None,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
            batch_size: 360,
            epochs: None,
            warmup_ratio: None,
            adapters: None,
        },
        Stage::TaskAdaptation => StageRecipe {
            stage,
            optimizer: Some("adamw".into()),
            learning_rate: 5e-5,
            schedule: "linear".into(),
            final_lr_ratio: None,
            beta1: None,
            beta2: None,
            weight_decay: 0.01,
            grad_clip: None,
            batch_size: 12,
            epochs: Some(10),
            warmup_ratio: Some(0.06),
            adapters: Some(AdapterRecipe {
                lora_rank: 8,
                cpoly_shared: 4,
                cpoly_per_task: 1,
                cpoly_rank: 4,
            }),
        },
    }
}

/// Parses the stage name first so unknown names fail before anything else.
pub fn emit_recipe_named(stage: &str) -> Result<StageRecipe, EvalError> {
    Ok(emit_recipe(stage.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{pubmedqa_options, LabelSource, McqRecord, SubsetTag};

    fn gold(labels: &[&str]) -> Dataset {
        Dataset::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| McqRecord {
                    id: format!("r{i:03}"),
                    question: "q".into(),
                    contexts: vec![],
                    options: pubmedqa_options(),
                    gold: Some(match *l {
                        "yes" => "A",
                        "no" => "B",
                        _ => "C",
                    }
                    .into()),
                    long_answer: None,
                    subset_tag: SubsetTag::PqaL,
                    label_source: LabelSource::Gold,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn counting() {
        let g = gold(&vec!["yes"; 500]);
        let mut preds: BTreeMap<String, String> = g.ids().map(|id| (id.to_string(), "yes".to_string())).collect();
        assert_eq!(score(&preds, &g, MissingPolicy::Error).unwrap().accuracy, 1.0);
        for id in g.ids().take(97) {
            preds.insert(id.to_string(), "B".into());
        }
        let r = score(&preds, &g, MissingPolicy::Error).unwrap();
        assert_eq!(r.accuracy, 403.0 / 500.0);
        assert_eq!(r.confusion.get("yes", "no"), 97);
        assert_eq!(r.confusion.row_sum("yes"), r.per_label["yes"].total);
    }

    #[test]
    fn missing_and_empty() {
        let g = gold(&["yes", "no"]);
        let mut preds = BTreeMap::new();
        preds.insert("r000".to_string(), "yes".to_string());
        assert!(matches!(
            score(&preds, &g, MissingPolicy::Error),
            Err(EvalError::MissingPredictions(ids)) if ids == vec!["r001".to_string()]
        ));
        let r = score(&preds, &g, MissingPolicy::CountWrong).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.confusion.get("no", MISSING), 1);
        assert!(matches!(score(&preds, &Dataset::default(), MissingPolicy::Error), Err(EvalError::EmptyGold)));
    }

    #[test]
    fn stage_report_flags_decrease() {
        let up = render_stage_report(&reference_stages()).unwrap();
        assert!(up.contains("57.2%") && up.contains("80.6%") && !up.contains("DECREASE"));
        let down = render_stage_report(&[("a".into(), 0.8), ("b".into(), 0.7)]).unwrap();
        assert!(down.lines().nth(2).unwrap().ends_with("DECREASE"));
        assert_eq!(render_stage_report(&[("only".into(), 0.5)]).unwrap().lines().count(), 2);
        assert!(render_stage_report(&[("x".into(), 1.2)]).is_err());
        assert!(render_stage_report(&[]).is_err());
    }

    #[test]
    fn leaderboard_order() {
        let lb = reference_leaderboard();
        assert_eq!(lb.provenance, "reported");
        let text = render_leaderboard(&lb, ("ours", 0.0)).unwrap();
        let pos = |s: &str| text.find(s).unwrap();
        assert!(pos("Med-PaLM 2") < pos("AntGLM-Med"));
        assert!(text.contains("Human Performance"));
        assert!(text.lines().last().unwrap().contains("ours"));
        assert!(render_leaderboard(&lb, ("ours", 1.5)).is_err());
    }

    #[test]
    fn recipes_round_trip() {
        for stage in Stage::ALL {
            let r = emit_recipe(stage);
            r.validate().unwrap();
            assert_eq!(StageRecipe::from_toml(&r.to_toml()).unwrap(), r);
        }
        assert!(matches!(emit_recipe_named("stage4"), Err(EvalError::UnknownStage(_))));
    }
}
