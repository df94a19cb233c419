//! Runs the learner ablations: direct personalization (A), a history of
//! one update (B), per-client learners (C) and an MLP learner.

use pfedseq::harness::{compare, ExperimentConfig, Method};

fn main() -> pfedseq::Result<()> {
    let base = ExperimentConfig {
        seeds: vec![0, 1, 2],
        ..Default::default()
    };
    let configs: Vec<_> = [
        Method::Pfedseq,
        Method::VariantA,
        Method::VariantB,
        Method::VariantC,
        Method::MlpLearner,
    ]
    .into_iter()
    .map(|method| ExperimentConfig {
        method,
        max_seq_len: if method == Method::VariantB { 1 } else { base.max_seq_len },
        ..base.clone()
    })
    .collect();
    let cmp = compare(&configs, false)?;
    let reference = cmp.summary[0].mean_final_accuracy;
    for row in &cmp.summary {
        println!(
            "{:<12} L={:<3} {:.4} ± {:.4}  ({:+.4} vs pfedseq)",
            row.label,
            row.max_seq_len,
            row.mean_final_accuracy,
            row.std_final_accuracy,
            row.mean_final_accuracy - reference
        );
    }
    Ok(())
}
