//! Compares the personalized method against FedAvg and purely local
//! training on the same data and seeds.

use pfedseq::harness::{compare, ExperimentConfig, Method};

fn main() -> pfedseq::Result<()> {
    let base = ExperimentConfig {
        seeds: vec![0, 1, 2],
        ..Default::default()
    };
    let configs: Vec<_> = [Method::Pfedseq, Method::Fedavg, Method::Local]
        .into_iter()
        .map(|method| ExperimentConfig { method, ..base.clone() })
        .collect();
    let cmp = compare(&configs, false)?;
    for (row, finals) in cmp.summary.iter().zip(&cmp.per_seed) {
        println!(
            "{:<8} {:.4} ± {:.4}  per seed {:?}",
            row.label, row.mean_final_accuracy, row.std_final_accuracy, finals
        );
    }
    Ok(())
}
