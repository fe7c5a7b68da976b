//! Training recipes for the three stages, a scored prediction file, a stage
//! report, and the reference leaderboard with a measured row added.
//!
//! ```text
//! cargo run --example recipes_and_reports
//! ```

use std::collections::BTreeMap;

use medadapt::corpus::{pubmedqa_options, Dataset, LabelSource, McqRecord, SubsetTag};
use medadapt::eval::{
    emit_recipe, reference_leaderboard, reference_stages, render_leaderboard, render_stage_report, score,
    MissingPolicy, Stage,
};

fn main() -> anyhow::Result<()> {
    for stage in Stage::ALL {
        println!("# {}\n{}", stage.as_str(), emit_recipe(stage).to_toml());
    }

    let gold = Dataset::new(
        ["A", "B", "A", "C", "A", "B"]
            .iter()
            .enumerate()
            .map(|(i, g)| McqRecord {
                id: format!("q{i}"),
                question: format!("Question {i}?"),
                contexts: vec!["Context.".into()],
                options: pubmedqa_options(),
                gold: Some(g.to_string()),
                long_answer: None,
                subset_tag: SubsetTag::PqaL,
                label_source: LabelSource::Gold,
            })
            .collect(),
    )?;
    // Predictions may name the option key or its text.
    let predictions: BTreeMap<String, String> = [("q0", "yes"), ("q1", "no"), ("q2", "B"), ("q3", "maybe"), ("q4", "A"), ("q5", "yes")]
        .iter()
        .map(|(id, l)| (id.to_string(), l.to_string()))
        .collect();
    let report = score(&predictions, &gold, MissingPolicy::Error)?;
    println!("{report}");

    let mut stages = reference_stages();
    stages.push(("this run".into(), report.accuracy));
    println!("{}", render_stage_report(&stages)?);
    println!("{}", render_leaderboard(&reference_leaderboard(), ("this run", report.accuracy))?);
    Ok(())
}
