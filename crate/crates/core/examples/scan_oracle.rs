//! Evaluates random selective scans with the sequential recurrence and the
//! Blelloch scan and reports the largest disagreement.

use pfedseq::rng::stream_rng;
use pfedseq::seqlearner::{ssm_scan_parallel, ssm_scan_sequential, ScanProblem};
use rand::Rng as _;

fn main() -> pfedseq::Result<()> {
    let mut rng = stream_rng(0, &[42]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (d, l, e, m) = (
            rng.random_range(1..=4),
            rng.random_range(1..=16),
            rng.random_range(1..=4),
            rng.random_range(1..=8),
        );
        let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let p = ScanProblem {
            batch: d,
            steps: l,
            inner: e,
            state: m,
            abar: draw(d * l * e * m, 0.0, 1.0),
            bbar: draw(d * l * e * m, -1.0, 1.0),
            u: draw(d * l * e, -1.0, 1.0),
            c: draw(d * l * m, -1.0, 1.0),
            d_skip: draw(e, -1.0, 1.0),
        };
        let seq = ssm_scan_sequential(&p)?;
        let par = ssm_scan_parallel(&p)?;
        for (a, b) in seq.iter().zip(&par) {
            worst = worst.max((a - b).abs());
        }
    }
    println!("100 random scans, max |sequential - parallel| = {worst:.3e}");
    Ok(())
}
