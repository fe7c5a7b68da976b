//! Turn knowledge-graph triplets and exam items into plain training text.
//!
//! ```text
//! cargo run --example kg_to_text
//! ```

use medadapt::corpus::{exam_to_text, kg_to_text, sample_subgraph, ExamItem, Triplet};

fn main() -> anyhow::Result<()> {
    let graph = vec![
        Triplet::new("metformin", "treats", "type 2 diabetes")?,
        Triplet::new("metformin", "may cause", "lactic acidosis")?,
        Triplet::new("aspirin", "inhibits", "platelet aggregation")?,
        Triplet::new("warfarin", "interacts with", "aspirin")?,
        Triplet::new("insulin", "lowers", "blood glucose")?,
    ];

    // A seeded sample of the graph, verbalized with a fixed pattern.
    let sample = sample_subgraph(&graph, 3, 7)?;
    for line in kg_to_text(&sample, "{s} {p} {o}.")? {
        println!("{line}");
    }

    let exam = vec![ExamItem {
        question: "Which drug is first-line for type 2 diabetes?".into(),
        answer: "Metformin".into(),
        explanation: "It lowers hepatic glucose output and rarely causes hypoglycemia.".into(),
    }];
    for line in exam_to_text(&exam, "Q: {question} A: {answer}. Because: {explanation}")? {
        println!("{line}");
    }
    Ok(())
}
