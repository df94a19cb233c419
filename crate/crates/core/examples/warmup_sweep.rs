//! Sweeps the warm-up length. During warm-up every client receives the
//! global adapter, so each curve tracks FedAvg until its own warm-up ends.

use pfedseq::harness::{compare, sweep_warmup, write_comparison, ExperimentConfig};

fn main() -> pfedseq::Result<()> {
    let base = ExperimentConfig::default();
    let cmp = compare(&sweep_warmup(&base, &[0, 5, 10, 20]), false)?;
    for row in &cmp.summary {
        println!("W={:<3} final acc {:.4}", row.warmup, row.mean_final_accuracy);
    }
    let (summary, curves) = write_comparison(&cmp, &base.output.dir.join("warmup_sweep"))?;
    println!("wrote {} and {}", summary.display(), curves.display());
    Ok(())
}
