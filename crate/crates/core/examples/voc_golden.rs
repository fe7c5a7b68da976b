//! Verification-of-Choice on one record with a scripted backend: one
//! explanation per option, a judgment step, then the final answer. Prints
//! the auditable transcript.
//!
//! ```text
//! cargo run --example voc_golden
//! ```

use std::path::Path;

use medadapt::backend::{MockBackend, MockScript};
use medadapt::corpus::Dataset;
use medadapt::prompting::{run_strategy, Strategy};

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let ds = Dataset::read_jsonl(&fixtures.join("hospital_mortality.jsonl"))?;
    let backend = MockBackend::new(MockScript::load(&fixtures.join("hospital_mortality_mock.toml"))?);

    let record = &ds.records()[0];
    let (decision, transcript) = run_strategy(&Strategy::voc(), record, &backend)?;

    for ex in &transcript.exchanges {
        println!("=== {} ===", ex.step);
        println!("--- prompt ---\n{}", ex.prompt);
        println!("--- reply ---\n{}\n", ex.completion.text);
    }
    println!(
        "decision: {} ({:?}, {:?}) after {} backend calls",
        decision.choice,
        decision.normalized_label,
        decision.parse_confidence,
        backend.calls()
    );
    Ok(())
}
