//! A shared/task-specific low-rank adapter mixture: forward pass in each
//! mode, finite-difference gradient checks for every parameter class, and
//! a save/load round trip.
//!
//! ```text
//! cargo run --example cpoly_gradcheck
//! ```

use medadapt::cpoly::{
    check_all_gradients, cpoly_forward_mode, load_config, save_config, shared_mixture_weights, CpolyConfig,
    CpolyShape, ForwardMode,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = CpolyShape::default();
    let cfg = CpolyConfig::random(&mut rng, &shape)?;
    let x = DVector::from_fn(shape.d_in, |i, _| (i as f64 * 0.7).sin());
    let c = DVector::from_fn(shape.d_out, |i, _| (i as f64 * 0.3).cos());

    for (t, mode) in [(0, ForwardMode::Direct), (1, ForwardMode::Eval), (2, ForwardMode::Train { seed: 5 })] {
        let weights = shared_mixture_weights(&cfg, t, mode)?;
        let y = cpoly_forward_mode(&cfg, t, &x, mode)?;
        println!("task {t} {mode:?}");
        println!("  shared weights {:?}", weights.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>());
        println!("  task weight    {:.3}", cfg.task_weight(t));
        println!("  |y|            {:.6}", y.norm());
        for (class, err) in check_all_gradients(&cfg, t, &x, &c, mode, 1e-5)? {
            println!("  grad {:<16} rel err {err:.2e}", class.to_string());
        }
    }

    let dir = tempfile::tempdir()?;
    let manifest = save_config(&cfg, dir.path(), "cpoly")?;
    assert_eq!(load_config(&manifest)?, cfg);
    println!("\nmanifest:\n{}", std::fs::read_to_string(&manifest)?);
    Ok(())
}
