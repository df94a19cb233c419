//! Runs the default personalized method and prints the mean test accuracy
//! per round. Pass a TOML config path to override the defaults.

use pfedseq::harness::{run_rows, test_curve, ExperimentConfig};

fn main() -> pfedseq::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let (rows, sim) = run_rows(&cfg)?;
    for line in &sim.construction_log {
        println!("built {line}");
    }
    for (round, acc) in test_curve(&rows) {
        let marker = if round == cfg.warmup { "  <- end of warm-up" } else { "" };
        println!("round {round:>3}  test acc {acc:.4}{marker}");
    }
    println!("messages exchanged: {}", sim.channel.messages);
    Ok(())
}
