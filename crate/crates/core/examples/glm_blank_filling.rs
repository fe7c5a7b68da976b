//! Build one blank-filling pretraining example: sample spans, lay out
//! Part A / Part B with two-dimensional positions, show the attention mask,
//! and invert the corruption.
//!
//! ```text
//! cargo run --example glm_blank_filling
//! ```

use medadapt::glm::{attention_mask, corrupt, reconstruct, sample_spans, Sentinels};

fn main() -> anyhow::Result<()> {
    let tokens: Vec<u32> = (10..30).collect();
    let sentinels = Sentinels::after(100);
    let spans = sample_spans(tokens.len(), 0.3, 2.0, 11)?;
    let ex = corrupt(&tokens, &spans, &sentinels)?;

    let name = |t: u32| match t {
        t if t == sentinels.mask => "[M]".to_string(),
        t if t == sentinels.start => "[S]".to_string(),
        t if t == sentinels.end => "[E]".to_string(),
        t => t.to_string(),
    };
    println!("spans (start, len): {:?}", spans.spans.iter().map(|s| (s.start, s.len)).collect::<Vec<_>>());
    println!("emission order:     {:?}", spans.permutation);
    println!("part A:  {}", ex.part_a.iter().map(|t| name(*t)).collect::<Vec<_>>().join(" "));
    println!("part B:  {}", ex.part_b.iter().map(|t| name(*t)).collect::<Vec<_>>().join(" "));
    println!("targets: {}", ex.targets.iter().map(|t| name(*t)).collect::<Vec<_>>().join(" "));
    println!("pos_1:   {:?}", ex.pos_1);
    println!("pos_2:   {:?}", ex.pos_2);

    println!("\nattention (row = query, # = visible):");
    for row in attention_mask(&ex) {
        println!("  {}", row.iter().map(|v| if *v { '#' } else { '.' }).collect::<String>());
    }

    assert_eq!(reconstruct(&ex, &sentinels)?, tokens);
    println!("\nreconstruct(corrupt(x)) == x");
    Ok(())
}
