//! Sweeps the length of the update history fed to the learner and writes
//! summary and curve CSVs for plotting.

use pfedseq::harness::{compare, sweep_seq_len, write_comparison, ExperimentConfig};

fn main() -> pfedseq::Result<()> {
    let base = ExperimentConfig::default();
    let cmp = compare(&sweep_seq_len(&base, &[1, 2, 5, 10, 20]), false)?;
    for row in &cmp.summary {
        println!("L={:<3} final acc {:.4}", row.max_seq_len, row.mean_final_accuracy);
    }
    let (summary, curves) = write_comparison(&cmp, &base.output.dir.join("seq_len_sweep"))?;
    println!("wrote {} and {}", summary.display(), curves.display());
    Ok(())
}
