//! Pseudo-label unlabeled records from their long answers, then merge them
//! with a labeled set. Unparseable replies stay unannotated instead of
//! getting a default label.
//!
//! ```text
//! cargo run --example pseudo_label
//! ```

use medadapt::annotate::{annotate_corpus, merge_pseudo, AnnotationMode, CorpusRun};
use medadapt::backend::{MockBackend, MockScript};
use medadapt::corpus::{pubmedqa_options, Dataset, LabelSource, McqRecord, SubsetTag};
use medadapt::prompting::{Strategy, StrategyKind};

fn record(id: &str, long_answer: Option<&str>, gold: Option<&str>) -> McqRecord {
    McqRecord {
        id: id.into(),
        question: format!("Is finding {id} clinically relevant?"),
        contexts: vec![format!("Study {id} enrolled 120 patients.")],
        options: pubmedqa_options(),
        gold: gold.map(String::from),
        long_answer: long_answer.map(String::from),
        subset_tag: if gold.is_some() { SubsetTag::PqaL } else { SubsetTag::PqaU },
        label_source: LabelSource::Gold,
    }
}

fn main() -> anyhow::Result<()> {
    let unlabeled = Dataset::new(vec![
        record("u1", Some("The effect was large and reproducible."), None),
        record("u2", Some("No benefit was observed."), None),
        record("u3", Some("Results were mixed across sites."), None),
    ])?;
    let labeled = Dataset::new(vec![record("l1", None, Some("A")), record("l2", None, Some("B"))])?;

    // The scripted model reads each long answer; the third reply has no
    // recognizable choice.
    let backend = MockBackend::new(
        MockScript::new()
            .contains("large and reproducible", "Answer: A")
            .contains("No benefit", "Answer: B")
            .contains("mixed across sites", "It is hard to say."),
    );

    let out = tempfile::tempdir()?;
    let strategy = Strategy::new(StrategyKind::Direct);
    let run = CorpusRun::new(AnnotationMode::LongAnswerOnly, &strategy, out.path());
    let summary = annotate_corpus(&unlabeled, &backend, &run)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let pseudo = Dataset::read_jsonl(&out.path().join("pseudo.jsonl"))?;
    let merged = merge_pseudo(&labeled, &pseudo)?;
    for r in merged.records() {
        println!("{:>3}  {:<6} {:?}", r.id, r.gold_label().unwrap_or_default(), r.label_source);
    }
    println!("unannotated:\n{}", std::fs::read_to_string(out.path().join("unannotated.jsonl"))?);
    Ok(())
}
