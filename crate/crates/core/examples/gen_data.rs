//! Builds a label-skewed federated dataset, prints each client's class
//! histogram and round-trips it through the binary file format.

use pfedseq::harness::ExperimentConfig;
use pfedseq::synthdata::{build_federated_dataset, FederatedDataset};

fn main() -> pfedseq::Result<()> {
    let cfg = ExperimentConfig::default();
    let ds = build_federated_dataset(&cfg.data_config())?;
    println!("{} clients, {} classes, input dim {}", ds.clients.len(), ds.num_classes, ds.input_dim);
    for c in &ds.clients {
        let mut hist = vec![0usize; ds.num_classes];
        for &y in &c.train.labels {
            hist[y] += 1;
        }
        println!("client {}: train {:>4} test {:>4} classes {:?}", c.client_id, c.train.len(), c.test.len(), hist);
    }

    let path = std::env::temp_dir().join("pfedseq_example.bin");
    ds.write(&path)?;
    let back = FederatedDataset::read(&path)?;
    assert_eq!(back, ds);
    println!("round trip through {} ok", path.display());
    Ok(())
}
