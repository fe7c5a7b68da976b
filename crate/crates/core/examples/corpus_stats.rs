//! Load PubMedQA-format records, print corpus statistics, and make a
//! stratified, seeded split.
//!
//! ```text
//! cargo run --example corpus_stats
//! ```

use medadapt::corpus::{dataset_stats, parse_pubmedqa, split, SubsetTag};
use serde_json::json;

fn main() -> anyhow::Result<()> {
    // PubMedQA files map a PMID to its question, abstract sections, long
    // answer and (for the expert-labeled subset) a final decision.
    let mut raw = serde_json::Map::new();
    for (i, decision) in ["yes", "no", "yes", "maybe", "yes", "no", "yes", "no", "yes", "maybe"]
        .iter()
        .enumerate()
    {
        raw.insert(
            format!("{}", 21_000_000 + i),
            json!({
                "QUESTION": format!("Does treatment {i} improve outcomes in elderly patients?"),
                "CONTEXTS": [
                    "We reviewed consecutive admissions over five years.",
                    format!("Outcome {i} was compared between matched groups."),
                ],
                "LONG_ANSWER": "The association was consistent across subgroups.",
                "final_decision": decision,
            }),
        );
    }
    let ds = parse_pubmedqa(&serde_json::Value::Object(raw).to_string(), SubsetTag::PqaL)?;

    println!("{}", dataset_stats(&ds)?);

    let parts = split(&ds, &[0.6, 0.2, 0.2], 42)?;
    for (name, part) in ["train", "dev", "test"].iter().zip(&parts) {
        let labels: Vec<String> = part.records().iter().filter_map(|r| r.gold_label()).collect();
        println!("{name:>5}: {} records {labels:?}", part.len());
    }
    Ok(())
}
