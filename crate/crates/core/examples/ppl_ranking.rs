//! Choose an answer by minimum option perplexity, using a mock backend with
//! a unigram table in place of a scoring model.
//!
//! ```text
//! cargo run --example ppl_ranking
//! ```

use medadapt::backend::{MockBackend, MockScript};
use medadapt::corpus::{LabelSource, McqOption, McqRecord, SubsetTag};
use medadapt::ppl::{rank_options, DEFAULT_STEM};
use medadapt::prompting::Template;

fn main() -> anyhow::Result<()> {
    let table = [
        ("metformin", 0.30),
        ("insulin", 0.20),
        ("glargine", 0.05),
        ("sulfonylurea", 0.10),
        ("therapy", 0.25),
        ("acarbose", 0.10),
    ];
    let backend = MockBackend::new(MockScript::new().unigram(table.iter().map(|(w, p)| (w.to_string(), *p)))?);

    let record = McqRecord {
        id: "dm-first-line".into(),
        question: "Which agent is usually started first in type 2 diabetes?".into(),
        contexts: vec!["Adults with newly diagnosed type 2 diabetes and normal renal function.".into()],
        options: vec![
            McqOption::new("A", "insulin glargine"),
            McqOption::new("B", "metformin therapy"),
            McqOption::new("C", "sulfonylurea therapy"),
            McqOption::new("D", "acarbose"),
        ],
        gold: Some("B".into()),
        long_answer: None,
        subset_tag: SubsetTag::Other,
        label_source: LabelSource::Gold,
    };

    let result = rank_options(&backend, &record, &Template::parse("stem", DEFAULT_STEM)?)?;
    for o in &result.per_option {
        println!("{}  ppl {:>8.4}  over {} tokens", o.key, o.ppl, o.token_count);
    }
    println!("chosen: {} ({})", result.chosen, result.normalization);
    Ok(())
}
