//! Stops a run halfway, serializes the full simulation state, resumes it
//! and checks the result matches an uninterrupted run.

use pfedseq::harness::{run_rows, ExperimentConfig, Simulation, SimulationCheckpoint};

fn main() -> pfedseq::Result<()> {
    let cfg = ExperimentConfig {
        rounds: 20,
        warmup: 5,
        max_seq_len: 5,
        ..Default::default()
    };
    let (straight, _) = run_rows(&cfg)?;

    let mut sim = Simulation::new(&cfg)?;
    let mut rows = Vec::new();
    for _ in 0..10 {
        rows.extend(sim.step()?);
    }
    let json = serde_json::to_string(&sim.checkpoint()?).expect("checkpoint serializes");
    println!("checkpoint after round 10: {} bytes", json.len());
    let ck: SimulationCheckpoint = serde_json::from_str(&json).expect("checkpoint parses");
    let mut resumed = Simulation::resume(ck)?;
    rows.extend(resumed.run()?);

    assert_eq!(rows, straight);
    println!("resumed run matches the uninterrupted run bit for bit");
    Ok(())
}
